//! Synthetic inputs shared by the benchmarks.

use perfab_core::{Bucket, DeviceClass, Engagement, UserCovariates, UserMetricValue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` users spread over `devices` device classes and both engagement levels,
/// giving `2 * devices` matching cells and `4 * devices` imputation cells.
/// Roughly `missing` of users have no value.
pub fn population(n: usize, devices: usize, missing: f64, seed: u64) -> (Vec<UserMetricValue>, Vec<UserCovariates>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<DeviceClass> = (0..devices).map(|d| DeviceClass::new(format!("model_{d}"))).collect();
    let mut values = Vec::with_capacity(n);
    let mut covariates = Vec::with_capacity(n);
    for i in 0..n {
        let id = perfab_core::UserId::new(format!("u{i}"));
        let bucket = if rng.random::<bool>() {
            Bucket::Treatment
        } else {
            Bucket::Control
        };
        let engagement = if rng.random::<f64>() < 0.4 {
            Engagement::High
        } else {
            Engagement::Low
        };
        covariates.push(UserCovariates {
            user_id: id.clone(),
            bucket,
            device_class: classes[rng.random_range(0..devices)].clone(),
            engagement_level: engagement,
            pre_period_event_count: 0,
        });
        values.push(if rng.random::<f64>() < missing {
            UserMetricValue::missing(id)
        } else {
            UserMetricValue::observed(id, rng.random_range(80.0..900.0), 1)
        });
    }
    (values, covariates)
}

/// Per-user event lists with 1 to `max_events` events each.
pub fn event_lists(users: usize, max_events: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..users)
        .map(|_| {
            let k = rng.random_range(1..=max_events);
            (0..k).map(|_| rng.random_range(50.0..1500.0)).collect()
        })
        .collect()
}
