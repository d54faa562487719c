use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::DivergenceConfig;
use super::population::{log_normal, one_plus_poisson};
use crate::error::Result;
use crate::ingest::{PerfEvent, UserCovariates};
use crate::metrics::{event_level_ate, user_level_ate, user_level_values};
use crate::seed;
use crate::stats::TestResult;
use crate::types::{Bucket, DeviceClass, Engagement, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRepeat {
    pub event_level: TestResult,
    pub user_level: TestResult,
    /// Share of all events logged by heavy users.
    pub heavy_event_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub config: DivergenceConfig,
    pub repeats: Vec<DivergenceRepeat>,
    pub event_significant_rate: f64,
    pub user_insignificant_rate: f64,
    /// Share of repeats where the event-level test is significant and the
    /// user-level test is not.
    pub divergence_rate: f64,
    pub mean_event_estimate: f64,
    pub mean_user_estimate: f64,
}

impl DivergenceReport {
    pub fn summary_line(&self) -> String {
        let sig = self.divergence_rate >= 0.5;
        format!(
            "event-level {} and user-level {} in {:.0}% of {} repeats (mean event-level estimate {:.2} ms, user-level {:.2} ms)",
            if sig { "significant" } else { "not consistently significant" },
            if sig { "insignificant" } else { "not consistently insignificant" },
            100.0 * self.divergence_rate,
            self.repeats.len(),
            self.mean_event_estimate,
            self.mean_user_estimate,
        )
    }
}

/// Events and covariates for one repeat. Heavy users sit on a high-end
/// device and log many fast events; light users sit on a low-end device and
/// log a few slow ones.
pub fn divergence_population(cfg: &DivergenceConfig, rep_seed: u64) -> (Vec<PerfEvent>, Vec<UserCovariates>) {
    let heavy_dev = DeviceClass::new("high_end");
    let light_dev = DeviceClass::new("low_end");
    let mut events = Vec::new();
    let mut users = Vec::with_capacity(2 * cfg.users_per_bucket);
    for (b, bucket) in [Bucket::Treatment, Bucket::Control].into_iter().enumerate() {
        let mut rng = seed::rng(rep_seed, b as u64);
        for i in 0..cfg.users_per_bucket {
            let id = UserId::new(format!("{}{i}", bucket.as_str()));
            let heavy = rand::Rng::random::<f64>(&mut rng) < cfg.heavy_share;
            let (rate, median, user_sd, event_sd, effect) = if heavy {
                (
                    cfg.heavy_event_rate,
                    cfg.heavy_median_ms,
                    cfg.heavy_user_log_sd,
                    cfg.heavy_event_log_sd,
                    cfg.heavy_effect_ms,
                )
            } else {
                (
                    cfg.light_event_rate,
                    cfg.light_median_ms,
                    cfg.light_user_log_sd,
                    cfg.light_event_log_sd,
                    cfg.light_effect_ms,
                )
            };
            let k = one_plus_poisson(&mut rng, rate);
            let base = log_normal(&mut rng, median, user_sd);
            for j in 0..k {
                let mut v = log_normal(&mut rng, base, event_sd);
                if bucket.is_treatment() {
                    v = (v + effect).max(0.0);
                }
                events.push(PerfEvent {
                    user_id: id.clone(),
                    metric_id: "latency_ms".into(),
                    value: v,
                    timestamp: 1 + j as i64,
                });
            }
            users.push(UserCovariates {
                user_id: id,
                bucket,
                device_class: if heavy { heavy_dev.clone() } else { light_dev.clone() },
                engagement_level: if heavy { Engagement::High } else { Engagement::Low },
                pre_period_event_count: 0,
            });
        }
    }
    (events, users)
}

fn run_repeat(cfg: &DivergenceConfig, r: u64) -> Result<DivergenceRepeat> {
    let rep_seed = seed::derive(cfg.seed, r);
    let (events, users) = divergence_population(cfg, rep_seed);
    let event_level = event_level_ate(&events, &users, cfg.quantile, cfg.n_boot, seed::derive(rep_seed, 2))?;
    let values = user_level_values(&events, &users, cfg.quantile)?;
    let user_level = user_level_ate(&values, &users)?.test;
    let heavy: HashSet<&UserId> = users
        .iter()
        .filter(|u| u.engagement_level == Engagement::High)
        .map(|u| &u.user_id)
        .collect();
    let heavy_events = events.iter().filter(|e| heavy.contains(&e.user_id)).count();
    Ok(DivergenceRepeat {
        event_level,
        user_level,
        heavy_event_share: heavy_events as f64 / events.len() as f64,
    })
}

/// Repeats the heterogeneous-population experiment and tallies how often the
/// event-level and user-level conclusions disagree.
pub fn divergence_scenario(cfg: &DivergenceConfig) -> Result<DivergenceReport> {
    cfg.validate()?;
    let repeats: Vec<DivergenceRepeat> = (0..cfg.repeats as u64)
        .into_par_iter()
        .map(|r| run_repeat(cfg, r))
        .collect::<Result<_>>()?;
    let n = repeats.len() as f64;
    let frac = |f: &dyn Fn(&DivergenceRepeat) -> bool| repeats.iter().filter(|r| f(r)).count() as f64 / n;
    let a = cfg.alpha;
    Ok(DivergenceReport {
        event_significant_rate: frac(&|r| r.event_level.p_value < a),
        user_insignificant_rate: frac(&|r| r.user_level.p_value >= a),
        divergence_rate: frac(&|r| r.event_level.p_value < a && r.user_level.p_value >= a),
        mean_event_estimate: repeats.iter().map(|r| r.event_level.estimate).sum::<f64>() / n,
        mean_user_estimate: repeats.iter().map(|r| r.user_level.estimate).sum::<f64>() / n,
        config: cfg.clone(),
        repeats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn light(repeats: usize) -> DivergenceConfig {
        DivergenceConfig {
            repeats,
            n_boot: 200,
            ..DivergenceConfig::default()
        }
    }

    #[test]
    fn heavy_minority_logs_most_events() {
        let r = run_repeat(&DivergenceConfig::default(), 0).unwrap();
        assert!((0.5..0.7).contains(&r.heavy_event_share), "{}", r.heavy_event_share);
    }

    #[test]
    fn homogeneous_effect_agrees_in_sign() {
        let cfg = DivergenceConfig {
            heavy_effect_ms: -40.0,
            light_effect_ms: -40.0,
            ..light(3)
        };
        let rep = divergence_scenario(&cfg).unwrap();
        for r in &rep.repeats {
            assert!(r.event_level.estimate < 0.0 && r.user_level.estimate < 0.0);
        }
    }

    #[test]
    fn null_is_mostly_quiet() {
        let cfg = DivergenceConfig {
            heavy_effect_ms: 0.0,
            ..light(20)
        };
        let rep = divergence_scenario(&cfg).unwrap();
        let both_quiet = rep
            .repeats
            .iter()
            .filter(|r| r.event_level.p_value >= 0.05 && r.user_level.p_value >= 0.05)
            .count();
        assert!(both_quiet >= 18, "{both_quiet} of 20");
    }

    #[test]
    fn deterministic() {
        let cfg = light(2);
        assert_eq!(divergence_scenario(&cfg).unwrap(), divergence_scenario(&cfg).unwrap());
    }
}
