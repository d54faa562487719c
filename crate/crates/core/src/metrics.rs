//! Event-level and user-level performance metrics.
//!
//! The event-level metric is a quantile over the pooled events of a bucket,
//! so heavy users (usually on high-end devices) dominate it. The user-level
//! metric takes the quantile per user and averages across users, weighting
//! every user equally. Reports always carry both.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{PerfEvent, UserCovariates};
use crate::stats::{self, TestResult};
use crate::types::{Bucket, UserId};

/// Per-user quantile for one metric. `value` is `None` (MISSING) exactly when
/// the user logged no event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetricValue {
    pub user_id: UserId,
    pub value: Option<f64>,
    pub event_count: u64,
}

impl UserMetricValue {
    pub fn observed(user_id: UserId, value: f64, event_count: u64) -> Self {
        UserMetricValue {
            user_id,
            value: Some(value),
            event_count,
        }
    }

    pub fn missing(user_id: UserId) -> Self {
        UserMetricValue {
            user_id,
            value: None,
            event_count: 0,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.value.is_none()
    }
}

/// Checks that `values[i]` and `covariates[i]` describe the same user.
pub(crate) fn check_aligned(values: &[UserMetricValue], covariates: &[UserCovariates]) -> Result<()> {
    if values.len() != covariates.len() {
        return Err(Error::InvalidInput(format!(
            "{} metric values for {} users",
            values.len(),
            covariates.len()
        )));
    }
    if let Some(i) = values
        .iter()
        .zip(covariates)
        .position(|(v, c)| !v.user_id.same(&c.user_id))
    {
        return Err(Error::InvalidInput(format!(
            "metric values and covariates are misaligned at index {i} ({} vs {})",
            values[i].user_id, covariates[i].user_id
        )));
    }
    Ok(())
}

/// Groups event values by user, keeping only assigned users.
fn events_by_user<'a>(events: &[PerfEvent], users: &'a [UserCovariates]) -> HashMap<&'a UserId, Vec<f64>> {
    let mut by_user: HashMap<&UserId, Vec<f64>> = users.iter().map(|u| (&u.user_id, Vec::new())).collect();
    for e in events {
        if let Some(v) = by_user.get_mut(&e.user_id) {
            v.push(e.value);
        }
    }
    by_user
}

/// One [`UserMetricValue`] per user in `users`, in the same order.
pub fn user_level_values(events: &[PerfEvent], users: &[UserCovariates], q: f64) -> Result<Vec<UserMetricValue>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("quantile level {q} outside [0, 1]")));
    }
    let mut by_user = events_by_user(events, users);
    users
        .iter()
        .map(|u| {
            let vals = by_user.get_mut(&u.user_id).expect("every user has an entry");
            if vals.is_empty() {
                Ok(UserMetricValue::missing(u.user_id.clone()))
            } else {
                vals.sort_unstable_by(f64::total_cmp);
                Ok(UserMetricValue::observed(
                    u.user_id.clone(),
                    stats::quantile_sorted(vals, q),
                    vals.len() as u64,
                ))
            }
        })
        .collect()
}

/// Assigned and missing user counts per bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MissingCounts {
    pub assigned: u64,
    pub missing: u64,
}

impl MissingCounts {
    pub fn observed(&self) -> u64 {
        self.assigned - self.missing
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.assigned == 0 {
            0.0
        } else {
            self.missing as f64 / self.assigned as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketMissing {
    pub treatment: MissingCounts,
    pub control: MissingCounts,
}

pub(crate) fn missing_counts(values: &[UserMetricValue], covariates: &[UserCovariates]) -> BucketMissing {
    let mut out = BucketMissing::default();
    for (v, c) in values.iter().zip(covariates) {
        let slot = match c.bucket {
            Bucket::Treatment => &mut out.treatment,
            Bucket::Control => &mut out.control,
        };
        slot.assigned += 1;
        if v.is_missing() {
            slot.missing += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLevelAte {
    pub test: TestResult,
    pub missing: BucketMissing,
}

fn observed_by_bucket(values: &[UserMetricValue], covariates: &[UserCovariates]) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::new();
    let mut c = Vec::new();
    for (v, cov) in values.iter().zip(covariates) {
        if let Some(x) = v.value {
            match cov.bucket {
                Bucket::Treatment => t.push(x),
                Bucket::Control => c.push(x),
            }
        }
    }
    (t, c)
}

/// Welch t-test of the user-level metric over non-missing users.
pub fn user_level_ate(values: &[UserMetricValue], covariates: &[UserCovariates]) -> Result<UserLevelAte> {
    check_aligned(values, covariates)?;
    let (t, c) = observed_by_bucket(values, covariates);
    for (name, g) in [("treatment", &t), ("control", &c)] {
        if g.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{name} has {} non-missing users, need at least 2",
                g.len()
            )));
        }
    }
    Ok(UserLevelAte {
        test: stats::welch_t_test(&t, &c)?,
        missing: missing_counts(values, covariates),
    })
}

/// Quantile over every event of one bucket.
pub fn event_level_quantile(events: &[PerfEvent], q: f64) -> Result<f64> {
    let vals: Vec<f64> = events.iter().map(|e| e.value).collect();
    stats::quantile(&vals, q)
}

/// Event lists per user, split by bucket. Users without events are dropped.
pub fn event_lists_by_bucket(events: &[PerfEvent], users: &[UserCovariates]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut by_user = events_by_user(events, users);
    let mut t = Vec::new();
    let mut c = Vec::new();
    for u in users {
        let vals = std::mem::take(by_user.get_mut(&u.user_id).expect("every user has an entry"));
        if vals.is_empty() {
            continue;
        }
        match u.bucket {
            Bucket::Treatment => t.push(vals),
            Bucket::Control => c.push(vals),
        }
    }
    (t, c)
}

/// Event-level quantile difference, tested with a user-level cluster bootstrap.
pub fn event_level_ate(
    events: &[PerfEvent],
    users: &[UserCovariates],
    q: f64,
    n_boot: usize,
    seed: u64,
) -> Result<TestResult> {
    let (t, c) = event_lists_by_bucket(events, users);
    stats::cluster_bootstrap_quantile_diff(&t, &c, q, n_boot, seed)
}

/// Users whose per-user high quantile rests on too few events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewEventReport {
    pub quantile: f64,
    pub min_events: u64,
    pub n_observed: u64,
    pub n_flagged: u64,
    pub flagged_fraction: f64,
}

/// Default event count below which a user's `q` quantile is flagged:
/// `max(2, ceil(1 / (1 - q)))`.
pub fn default_min_events(q: f64) -> u64 {
    if q >= 1.0 {
        return u64::MAX;
    }
    // 1 / (1 - 0.9) evaluates to 10.000000000000002; keep it at 10.
    let k = (1.0 / (1.0 - q) - 1e-9).ceil();
    (k as u64).max(2)
}

/// Fraction of non-missing users with fewer than `min_events` events. Purely
/// diagnostic; nothing is corrected.
pub fn few_event_diagnostic(values: &[UserMetricValue], q: f64, min_events: Option<u64>) -> FewEventReport {
    let min_events = min_events.unwrap_or_else(|| default_min_events(q));
    let observed: Vec<&UserMetricValue> = values.iter().filter(|v| !v.is_missing()).collect();
    let flagged = observed.iter().filter(|v| v.event_count < min_events).count() as u64;
    let n = observed.len() as u64;
    FewEventReport {
        quantile: q,
        min_events,
        n_observed: n,
        n_flagged: flagged,
        flagged_fraction: if n == 0 { 0.0 } else { flagged as f64 / n as f64 },
    }
}

/// User-level ATE per device class, for classes with at least two non-missing
/// users with some spread in each bucket.
pub fn per_device_ate(
    values: &[UserMetricValue],
    covariates: &[UserCovariates],
) -> Result<BTreeMap<String, TestResult>> {
    check_aligned(values, covariates)?;
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (v, c) in values.iter().zip(covariates) {
        if let Some(x) = v.value {
            let g = groups.entry(c.device_class.as_str()).or_default();
            match c.bucket {
                Bucket::Treatment => g.0.push(x),
                Bucket::Control => g.1.push(x),
            }
        }
    }
    Ok(groups
        .into_iter()
        .filter_map(|(k, (t, c))| stats::welch_t_test(&t, &c).ok().map(|r| (k.to_string(), r)))
        .collect())
}
