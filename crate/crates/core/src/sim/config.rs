use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One device class in the synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub share: f64,
    /// Median of the log-normal base latency, in milliseconds.
    pub median_ms: f64,
    /// Standard deviation of log latency.
    pub log_sd: f64,
    /// Mean pre-period event count (Poisson).
    pub engagement_rate: f64,
}

/// Coefficients of the missingness model
/// `P(missing) = expit(intercept + treatment·X1 + device[X2] + engagement·X3)`,
/// with X1 = 1 for treatment and X3 = 1 for high engagement. Devices absent
/// from `device` have coefficient 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alphas {
    pub intercept: f64,
    #[serde(default)]
    pub treatment: f64,
    #[serde(default)]
    pub device: BTreeMap<String, f64>,
    #[serde(default)]
    pub engagement: f64,
}

impl Alphas {
    pub fn device_coef(&self, name: &str) -> f64 {
        self.device.get(name).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_users: usize,
    pub n_iterations: usize,
    /// Per-device effect means are drawn from Uniform(a, b).
    pub effect_range: (f64, f64),
    pub effect_sd: f64,
    pub alphas: Alphas,
    /// When set, `alphas.treatment` is calibrated to hit this expected
    /// Δ_miss (a fraction, e.g. 0.02) instead of being used as given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_delta_miss: Option<f64>,
    pub seed: u64,
    pub devices: Vec<DeviceProfile>,
    /// Significance level for decisions.
    pub alpha: f64,
    pub min_donors: usize,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let (a, b) = self.effect_range;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return fail(format!("effect_range ({a}, {b}) must satisfy a <= b"));
        }
        if !(self.effect_sd.is_finite() && self.effect_sd >= 0.0) {
            return fail(format!("effect_sd {} must be non-negative", self.effect_sd));
        }
        if self.n_iterations == 0 {
            return fail("n_iterations must be at least 1".into());
        }
        if self.n_users < 4 {
            return fail(format!("n_users {} is too small", self.n_users));
        }
        if self.devices.is_empty() {
            return fail("at least one device profile is required".into());
        }
        for d in &self.devices {
            if !(d.share >= 0.0 && d.median_ms > 0.0 && d.log_sd >= 0.0 && d.engagement_rate >= 0.0) {
                return fail(format!("device `{}` has invalid parameters", d.name));
            }
        }
        let total: f64 = self.devices.iter().map(|d| d.share).sum();
        if (total - 1.0).abs() > 1e-6 {
            return fail(format!("device shares sum to {total}, expected 1"));
        }
        let al = &self.alphas;
        if ![al.intercept, al.treatment, al.engagement]
            .iter()
            .chain(al.device.values())
            .all(|x| x.is_finite())
        {
            return fail("alphas must be finite".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha {} must lie in (0, 1)", self.alpha));
        }
        Ok(())
    }

    /// Devices and missingness tuned so that, at 100k users, self-selection
    /// shifts the naive estimate by several standard errors once Δ_miss
    /// reaches a couple of percent. Used by the fixed-effect and null sweeps.
    pub fn strong_selection() -> Self {
        let slow = 0.15;
        ScenarioConfig {
            n_users: 100_000,
            n_iterations: 100,
            effect_range: (3.0, 3.0),
            effect_sd: 0.3,
            alphas: Alphas {
                intercept: -1.0,
                treatment: 0.0,
                device: [("low_end", 1.0), ("mid_range", -4.0), ("high_end", -4.0)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
                engagement: -1.0,
            },
            target_delta_miss: None,
            seed: 20_240_601,
            devices: vec![
                DeviceProfile {
                    name: "low_end".into(),
                    share: slow,
                    median_ms: 300.0,
                    log_sd: 0.05,
                    engagement_rate: 2.0,
                },
                DeviceProfile {
                    name: "mid_range".into(),
                    share: (1.0 - slow) * 0.7,
                    median_ms: 150.0,
                    log_sd: 0.05,
                    engagement_rate: 6.0,
                },
                DeviceProfile {
                    name: "high_end".into(),
                    share: (1.0 - slow) * 0.3,
                    median_ms: 140.0,
                    log_sd: 0.05,
                    engagement_rate: 12.0,
                },
            ],
            alpha: 0.05,
            min_donors: 5,
        }
    }

    /// Milder selection: the naive estimate at Δ_miss = 2% is biased by
    /// about one standard error. Used by the effect-size sweep.
    pub fn mild_selection() -> Self {
        let mut c = Self::strong_selection();
        c.devices[0].median_ms = 220.0;
        c.alphas.device = [("low_end", -1.5), ("mid_range", -2.0), ("high_end", -2.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        c.alphas.engagement = -0.5;
        c
    }
}

/// A grid of scenarios: every Δ_miss target crossed with every effect range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub scenario: ScenarioConfig,
    pub delta_miss_targets: Vec<f64>,
    pub effect_ranges: Vec<(f64, f64)>,
}

impl SweepConfig {
    /// Fixed effect of 3, Δ_miss from 0 to 3%.
    pub fn setup_a() -> Self {
        SweepConfig {
            scenario: ScenarioConfig::strong_selection(),
            delta_miss_targets: vec![0.0, 0.005, 0.01, 0.02, 0.03],
            effect_ranges: vec![(3.0, 3.0)],
        }
    }

    /// No effect, Δ_miss from 0 to 3%.
    pub fn setup_b() -> Self {
        SweepConfig {
            effect_ranges: vec![(0.0, 0.0)],
            ..Self::setup_a()
        }
    }

    /// Δ_miss fixed at 2%, effect from 0.5 to 3.
    pub fn setup_c() -> Self {
        SweepConfig {
            scenario: ScenarioConfig::mild_selection(),
            delta_miss_targets: vec![0.02],
            effect_ranges: vec![(0.5, 0.5), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)],
        }
    }

    /// The same sweep at three million users.
    pub fn full(mut self) -> Self {
        self.scenario.n_users = 3_000_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_miss_targets.is_empty() || self.effect_ranges.is_empty() {
            return Err(Error::Config(
                "a sweep needs at least one target and one effect range".into(),
            ));
        }
        self.scenario.validate()
    }
}

/// Event-level vs user-level divergence scenario: a minority of heavy users on
/// fast devices improves while the light majority on slow devices does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceConfig {
    pub users_per_bucket: usize,
    /// Share of users in the heavy, high-end group.
    pub heavy_share: f64,
    /// Events per user are `1 + Poisson(rate)`.
    pub heavy_event_rate: f64,
    pub light_event_rate: f64,
    /// Per-user median latency is log-normal around these.
    pub heavy_median_ms: f64,
    pub light_median_ms: f64,
    pub heavy_user_log_sd: f64,
    pub light_user_log_sd: f64,
    /// Spread of a user's events around their own median (log scale).
    pub heavy_event_log_sd: f64,
    pub light_event_log_sd: f64,
    /// Additive change to every treated event, per group.
    pub heavy_effect_ms: f64,
    pub light_effect_ms: f64,
    pub quantile: f64,
    pub n_boot: usize,
    pub repeats: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig {
            users_per_bucket: 1500,
            heavy_share: 0.2,
            heavy_event_rate: 29.0,
            light_event_rate: 4.0,
            heavy_median_ms: 250.0,
            light_median_ms: 700.0,
            heavy_user_log_sd: 0.1,
            light_user_log_sd: 0.6,
            heavy_event_log_sd: 0.2,
            light_event_log_sd: 0.4,
            heavy_effect_ms: -30.0,
            light_effect_ms: 0.0,
            quantile: 0.5,
            n_boot: 1000,
            repeats: 50,
            alpha: 0.05,
            seed: 7,
        }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.users_per_bucket >= 2
            && (0.0..=1.0).contains(&self.heavy_share)
            && self.heavy_event_rate >= 0.0
            && self.light_event_rate >= 0.0
            && self.heavy_median_ms > 0.0
            && self.light_median_ms > 0.0
            && [
                self.heavy_user_log_sd,
                self.light_user_log_sd,
                self.heavy_event_log_sd,
                self.light_event_log_sd,
            ]
            .iter()
            .all(|s| *s >= 0.0)
            && (0.0..=1.0).contains(&self.quantile)
            && self.repeats >= 1
            && self.alpha > 0.0
            && self.alpha < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid divergence scenario parameters".into()))
        }
    }
}

/// Contents of a simulation config file. Every section is optional; keys
/// given in a section override that setup's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfigFile {
    pub setup_a: SweepConfig,
    pub setup_b: SweepConfig,
    pub setup_c: SweepConfig,
    pub divergence: DivergenceConfig,
}

impl Default for SimConfigFile {
    fn default() -> Self {
        SimConfigFile {
            setup_a: SweepConfig::setup_a(),
            setup_b: SweepConfig::setup_b(),
            setup_c: SweepConfig::setup_c(),
            divergence: DivergenceConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl SimConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(SimConfigFile::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let toml::Value::Table(t) = &over {
            let known = ["setup_a", "setup_b", "setup_c", "divergence"];
            if let Some(k) = t.keys().find(|k| !known.contains(&k.as_str())) {
                return Err(Error::Config(format!(
                    "unknown section `{k}`; expected one of {known:?}"
                )));
            }
        }
        merge(&mut base, over);
        let cfg: SimConfigFile = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.setup_a.validate()?;
        cfg.setup_b.validate()?;
        cfg.setup_c.validate()?;
        cfg.divergence.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
