use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Alphas, ScenarioConfig, SweepConfig};
use super::population::{apply_missingness, calibrate_alpha1, gen_population, inject_treatment, CellProfile};
use crate::correct::{corrected_ate_imputation, corrected_ate_matching, CorrectionMethod, ImputeOptions};
use crate::error::Result;
use crate::metrics::user_level_ate;
use crate::seed;
use crate::stats::TestResult;

/// Sign of the true effect, taken from the midpoint of the effect range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Positive,
    Zero,
    Negative,
}

impl Truth {
    pub fn of_range((a, b): (f64, f64)) -> Self {
        let mid = 0.5 * (a + b);
        if mid > 0.0 {
            Truth::Positive
        } else if mid < 0.0 {
            Truth::Negative
        } else {
            Truth::Zero
        }
    }
}

/// One simulated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub true_ate: f64,
    pub alpha1: f64,
    pub realized_delta_miss: f64,
    /// Results in [`CorrectionMethod::ALL`] order.
    pub tests: [TestResult; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: CorrectionMethod,
    pub mean_estimate: f64,
    pub estimates: Vec<f64>,
    pub p_values: Vec<f64>,
    pub significant_positive: usize,
    pub significant_negative: usize,
    pub insignificant: usize,
    /// Wrong sign or insignificant, when the truth is nonzero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fcr: Option<f64>,
    /// Any significant result, when the truth is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpr: Option<f64>,
    /// Insignificant result, when the truth is nonzero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fnr: Option<f64>,
}

impl MethodSummary {
    fn new(method: CorrectionMethod, tests: &[&TestResult], alpha: f64, truth: Truth) -> Self {
        let n = tests.len();
        let estimates: Vec<f64> = tests.iter().map(|t| t.estimate).collect();
        let p_values: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
        let sig_pos = tests.iter().filter(|t| t.p_value < alpha && t.estimate > 0.0).count();
        let sig_neg = tests.iter().filter(|t| t.p_value < alpha && t.estimate < 0.0).count();
        let insig = n - sig_pos - sig_neg;
        let rate = |k: usize| k as f64 / n as f64;
        let (fcr, fpr, fnr) = match truth {
            Truth::Positive => (Some(rate(insig + sig_neg)), None, Some(rate(insig))),
            Truth::Negative => (Some(rate(insig + sig_pos)), None, Some(rate(insig))),
            Truth::Zero => (None, Some(rate(sig_pos + sig_neg)), None),
        };
        MethodSummary {
            method,
            mean_estimate: estimates.iter().sum::<f64>() / n as f64,
            estimates,
            p_values,
            significant_positive: sig_pos,
            significant_negative: sig_neg,
            insignificant: insig,
            fcr,
            fpr,
            fnr,
        }
    }

    /// Monte Carlo standard error of `mean_estimate`.
    pub fn mc_std_error(&self) -> f64 {
        let n = self.estimates.len() as f64;
        if n < 2.0 {
            return f64::NAN;
        }
        let m = self.mean_estimate;
        let var = self.estimates.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub effect_range: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_delta_miss: Option<f64>,
    pub truth: Truth,
    /// Mean over iterations of the mean injected effect on treated users.
    pub true_ate: f64,
    pub mean_alpha1: f64,
    pub realized_delta_miss: f64,
    pub iterations: Vec<Iteration>,
    /// In [`CorrectionMethod::ALL`] order.
    pub methods: Vec<MethodSummary>,
}

impl ScenarioResult {
    pub fn method(&self, m: CorrectionMethod) -> &MethodSummary {
        self.methods
            .iter()
            .find(|s| s.method == m)
            .expect("every method is summarized")
    }
}

fn run_iteration(config: &ScenarioConfig, it: u64) -> Result<Iteration> {
    let iter_seed = seed::derive(config.seed, it);
    let mut pop = gen_population(config, iter_seed);
    let inj = inject_treatment(&mut pop, config.effect_range, config.effect_sd, iter_seed);
    let alpha1 = match config.target_delta_miss {
        Some(t) => calibrate_alpha1(t, &config.alphas, &CellProfile::of(&pop))?,
        None => config.alphas.treatment,
    };
    let alphas = Alphas {
        treatment: alpha1,
        ..config.alphas.clone()
    };
    let realized = apply_missingness(&mut pop, &alphas, iter_seed);
    let values = pop.metric_values();
    let covs = pop.covariates();
    let none = user_level_ate(&values, &covs)?.test;
    let opts = ImputeOptions {
        min_donors: config.min_donors,
    };
    let imputation = corrected_ate_imputation(&values, &covs, seed::derive(iter_seed, 3), opts)?.test;
    let matching = corrected_ate_matching(&values, &covs)?.test;
    Ok(Iteration {
        true_ate: inj.true_ate,
        alpha1,
        realized_delta_miss: realized,
        tests: [none, imputation, matching],
    })
}

/// Runs every iteration of one scenario: generate, inject, mask, then estimate
/// the effect without correction, with imputation and with matching.
///
/// Iteration `i` derives all of its randomness from `(config.seed, i)`, so
/// scenarios that differ only in effect size or missingness reuse the same
/// base populations.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult> {
    config.validate()?;
    let iterations: Vec<Iteration> = (0..config.n_iterations as u64)
        .into_par_iter()
        .map(|it| run_iteration(config, it))
        .collect::<Result<_>>()?;
    let n = iterations.len() as f64;
    let truth = Truth::of_range(config.effect_range);
    let methods = CorrectionMethod::ALL
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let tests: Vec<&TestResult> = iterations.iter().map(|it| &it.tests[k]).collect();
            MethodSummary::new(m, &tests, config.alpha, truth)
        })
        .collect();
    Ok(ScenarioResult {
        effect_range: config.effect_range,
        target_delta_miss: config.target_delta_miss,
        truth,
        true_ate: iterations.iter().map(|i| i.true_ate).sum::<f64>() / n,
        mean_alpha1: iterations.iter().map(|i| i.alpha1).sum::<f64>() / n,
        realized_delta_miss: iterations.iter().map(|i| i.realized_delta_miss).sum::<f64>() / n,
        iterations,
        methods,
    })
}

/// Runs the scenario at every (Δ_miss target, effect range) pair, targets
/// varying slowest.
pub fn run_sweep(sweep: &SweepConfig) -> Result<Vec<ScenarioResult>> {
    sweep.validate()?;
    let mut out = Vec::with_capacity(sweep.delta_miss_targets.len() * sweep.effect_ranges.len());
    for &target in &sweep.delta_miss_targets {
        for &range in &sweep.effect_ranges {
            let cfg = ScenarioConfig {
                effect_range: range,
                target_delta_miss: Some(target),
                ..sweep.scenario.clone()
            };
            out.push(run_scenario(&cfg)?);
        }
    }
    Ok(out)
}

pub const SWEEP_COLUMNS: [&str; 7] = [
    "delta_miss_target",
    "true_ate",
    "method",
    "mean_estimate",
    "fcr",
    "fpr",
    "fnr",
];

/// Writes one row per (scenario, method). Rates that do not apply to a
/// scenario's truth are left empty.
pub fn write_sweep_csv<W: Write>(results: &[ScenarioResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in results {
        for m in &r.methods {
            w.write_record([
                opt(r.target_delta_miss),
                r.true_ate.to_string(),
                m.method.as_str().to_string(),
                m.mean_estimate.to_string(),
                opt(m.fcr),
                opt(m.fpr),
                opt(m.fnr),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
