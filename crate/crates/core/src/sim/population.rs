use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::config::{Alphas, ScenarioConfig};
use crate::error::{Error, Result};
use crate::ingest::UserCovariates;
use crate::metrics::UserMetricValue;
use crate::seed;
use crate::stats::expit;
use crate::types::{Bucket, DeviceClass, Engagement, UserId};

/// A synthetic user with both potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub user_id: UserId,
    pub bucket: Bucket,
    /// Index into the scenario's device list.
    pub device: usize,
    pub engagement_level: Engagement,
    pub pre_period_event_count: u64,
    /// Outcome without treatment.
    pub y0: f64,
    /// Injected effect; the treated outcome is `y0 + delta`. Zero for control.
    pub delta: f64,
    pub observed: bool,
}

impl SyntheticUser {
    /// The outcome this user would report given their bucket.
    pub fn outcome(&self) -> f64 {
        self.y0 + self.delta
    }
}

/// Population plus the device names its `device` indices refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub devices: Vec<DeviceClass>,
    pub users: Vec<SyntheticUser>,
}

impl Population {
    pub fn covariates(&self) -> Vec<UserCovariates> {
        self.users
            .iter()
            .map(|u| UserCovariates {
                user_id: u.user_id.clone(),
                bucket: u.bucket,
                device_class: self.devices[u.device].clone(),
                engagement_level: u.engagement_level,
                pre_period_event_count: u.pre_period_event_count,
            })
            .collect()
    }

    /// Observed outcomes; unobserved users are missing.
    pub fn metric_values(&self) -> Vec<UserMetricValue> {
        self.users
            .iter()
            .map(|u| {
                if u.observed {
                    UserMetricValue::observed(u.user_id.clone(), u.outcome(), 1)
                } else {
                    UserMetricValue::missing(u.user_id.clone())
                }
            })
            .collect()
    }

    /// Missing share in treatment minus missing share in control.
    pub fn realized_delta_miss(&self) -> f64 {
        let mut n = [0u64; 2];
        let mut miss = [0u64; 2];
        for u in &self.users {
            let b = u.bucket.is_treatment() as usize;
            n[b] += 1;
            miss[b] += (!u.observed) as u64;
        }
        let rate = |b: usize| if n[b] == 0 { 0.0 } else { miss[b] as f64 / n[b] as f64 };
        rate(1) - rate(0)
    }

    /// Mean injected effect over treated users.
    pub fn true_ate(&self) -> f64 {
        let (s, n) = self
            .users
            .iter()
            .filter(|u| u.bucket.is_treatment())
            .fold((0.0, 0usize), |(s, n), u| (s + u.delta, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// Draws a population: device by share, log-normal base latency per device,
/// Poisson pre-period counts per device, and a fair coin for the bucket.
/// Engagement is high iff the count exceeds the population mean. Every user
/// starts observed with no effect.
pub fn gen_population(config: &ScenarioConfig, iteration_seed: u64) -> Population {
    let mut rng = seed::rng(iteration_seed, 0);
    let mut cumulative = Vec::with_capacity(config.devices.len());
    let mut acc = 0.0;
    for d in &config.devices {
        acc += d.share;
        cumulative.push(acc);
    }
    let poissons: Vec<Option<Poisson<f64>>> = config
        .devices
        .iter()
        .map(|d| (d.engagement_rate > 0.0).then(|| Poisson::new(d.engagement_rate).expect("positive rate")))
        .collect();

    let mut users: Vec<SyntheticUser> = (0..config.n_users)
        .map(|i| {
            let r = rng.random::<f64>() * acc;
            let device = cumulative
                .iter()
                .position(|&c| r < c)
                .unwrap_or(config.devices.len() - 1);
            let profile = &config.devices[device];
            let z: f64 = StandardNormal.sample(&mut rng);
            let count = poissons[device].as_ref().map_or(0, |p| p.sample(&mut rng) as u64);
            let bucket = if rng.random::<bool>() {
                Bucket::Treatment
            } else {
                Bucket::Control
            };
            SyntheticUser {
                user_id: UserId::new(format!("u{i}")),
                bucket,
                device,
                engagement_level: Engagement::Low,
                pre_period_event_count: count,
                y0: profile.median_ms * (profile.log_sd * z).exp(),
                delta: 0.0,
                observed: true,
            }
        })
        .collect();

    let n = users.len() as u128;
    let total: u128 = users.iter().map(|u| u.pre_period_event_count as u128).sum();
    for u in &mut users {
        if u.pre_period_event_count as u128 * n > total {
            u.engagement_level = Engagement::High;
        }
    }
    Population {
        devices: config.devices.iter().map(|d| DeviceClass::new(&d.name)).collect(),
        users,
    }
}

/// Effect means drawn for one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    /// One mean per device, in the population's device order.
    pub device_means: Vec<f64>,
    /// Mean effect over treated users.
    pub true_ate: f64,
}

/// Draws one effect mean per device from Uniform(a, b) and gives each treated
/// user an effect from N(mean, sd).
pub fn inject_treatment(population: &mut Population, effect_range: (f64, f64), effect_sd: f64, seed: u64) -> Injection {
    let (a, b) = effect_range;
    let mut rng = seed::rng(seed, 1);
    let means: Vec<f64> = (0..population.devices.len())
        .map(|_| {
            if a < b {
                Uniform::new(a, b).expect("a < b").sample(&mut rng)
            } else {
                a
            }
        })
        .collect();
    for u in &mut population.users {
        u.delta = if u.bucket.is_treatment() {
            let z: f64 = StandardNormal.sample(&mut rng);
            means[u.device] + effect_sd * z
        } else {
            0.0
        };
    }
    Injection {
        true_ate: population.true_ate(),
        device_means: means,
    }
}

fn linear_predictor(alphas: &Alphas, device_coef: f64, treated: bool, high: bool) -> f64 {
    alphas.intercept
        + if treated { alphas.treatment } else { 0.0 }
        + device_coef
        + if high { alphas.engagement } else { 0.0 }
}

/// Marks each user missing with probability
/// `expit(α0 + α1·X1 + α2[device] + α3·X3)`. User `i` always consumes the
/// same uniform draw for a given seed, so changing only the coefficients
/// changes the mask monotonically. Returns the realized Δ_miss.
pub fn apply_missingness(population: &mut Population, alphas: &Alphas, seed: u64) -> f64 {
    let mut rng = seed::rng(seed, 2);
    let coefs: Vec<f64> = population
        .devices
        .iter()
        .map(|d| alphas.device_coef(d.as_str()))
        .collect();
    for u in &mut population.users {
        let p = expit(linear_predictor(
            alphas,
            coefs[u.device],
            u.bucket.is_treatment(),
            u.engagement_level == Engagement::High,
        ));
        u.observed = rng.random::<f64>() >= p;
    }
    population.realized_delta_miss()
}

/// Share of users in each (device, engagement) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProfile {
    pub cells: Vec<ProfileCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileCell {
    pub device: String,
    pub high_engagement: bool,
    pub weight: f64,
}

impl CellProfile {
    pub fn of(population: &Population) -> Self {
        let k = population.devices.len();
        let mut counts = vec![[0u64; 2]; k];
        for u in &population.users {
            counts[u.device][(u.engagement_level == Engagement::High) as usize] += 1;
        }
        let n = population.users.len().max(1) as f64;
        let cells = population
            .devices
            .iter()
            .zip(&counts)
            .flat_map(|(d, c)| {
                [false, true].into_iter().map(move |h| ProfileCell {
                    device: d.as_str().to_string(),
                    high_engagement: h,
                    weight: c[h as usize] as f64 / n,
                })
            })
            .filter(|c| c.weight > 0.0)
            .collect();
        CellProfile { cells }
    }

    /// Expected missing share for one bucket.
    pub fn expected_missing(&self, alphas: &Alphas, treated: bool) -> f64 {
        let total: f64 = self.cells.iter().map(|c| c.weight).sum();
        self.cells
            .iter()
            .map(|c| {
                c.weight
                    * expit(linear_predictor(
                        alphas,
                        alphas.device_coef(&c.device),
                        treated,
                        c.high_engagement,
                    ))
            })
            .sum::<f64>()
            / total
    }

    /// Expected Δ_miss when both buckets share this profile.
    pub fn expected_delta_miss(&self, alphas: &Alphas) -> f64 {
        self.expected_missing(alphas, true) - self.expected_missing(alphas, false)
    }
}

const CALIBRATION_TOLERANCE: f64 = 1e-7;

/// Finds the treatment coefficient α1 whose expected Δ_miss over `profile`
/// equals `target`, by bisection. The other coefficients come from `alphas`.
pub fn calibrate_alpha1(target: f64, alphas: &Alphas, profile: &CellProfile) -> Result<f64> {
    if !target.is_finite() {
        return Err(Error::InvalidInput(format!("target Δ_miss {target} is not finite")));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    if profile.cells.is_empty() {
        return Err(Error::InvalidInput("empty covariate profile".into()));
    }
    let control = {
        let a = Alphas {
            treatment: 0.0,
            ..alphas.clone()
        };
        profile.expected_missing(&a, false)
    };
    // α1 → ±∞ drives the treatment missing share to 1 or 0.
    let (low, high) = (-control, 1.0 - control);
    if !(target > low && target < high) {
        return Err(Error::Unachievable { target, low, high });
    }
    let delta = |a1: f64| {
        profile.expected_delta_miss(&Alphas {
            treatment: a1,
            ..alphas.clone()
        })
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while delta(lo) > target {
        lo *= 2.0;
        if lo < -1e3 {
            return Err(Error::Unachievable { target, low, high });
        }
    }
    while delta(hi) < target {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Unachievable { target, low, high });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let d = delta(mid);
        if (d - target).abs() < CALIBRATION_TOLERANCE {
            return Ok(mid);
        }
        if d < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Samples `1 + Poisson(rate)` (or exactly 1 when the rate is zero).
pub(crate) fn one_plus_poisson(rng: &mut impl Rng, rate: f64) -> usize {
    if rate > 0.0 {
        1 + Poisson::new(rate).expect("positive rate").sample(rng) as usize
    } else {
        1
    }
}

/// Log-normal draw with the given median.
pub(crate) fn log_normal(rng: &mut impl Rng, median: f64, log_sd: f64) -> f64 {
    if log_sd > 0.0 {
        median * Normal::new(0.0, log_sd).expect("positive sd").sample(rng).exp()
    } else {
        median
    }
}
