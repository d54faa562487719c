//! The full analysis pipeline: compute both metric levels, check for
//! self-selection SRM, and run both corrections when the check fires.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::correct::{
    corrected_ate_imputation, corrected_ate_matching, CorrectionMethod, FallbackCounts, ImputeOptions, SubgroupKey,
};
use crate::error::{Error, Result};
use crate::ingest::{
    derive_covariates, split_by_window, Assignment, CovariateSummary, PerfEvent, DEFAULT_DEVICE_USER_THRESHOLD,
    DEFAULT_PRE_WINDOW_MS,
};
use crate::metrics::{
    event_level_ate, few_event_diagnostic, missing_counts, per_device_ate, user_level_ate, user_level_values,
    BucketMissing, FewEventReport,
};
use crate::seed;
use crate::srm::{assignment_srm, self_selection_srm, SrmReport, DEFAULT_ALERT_THRESHOLD};
use crate::stats::TestResult;
use crate::types::{Bucket, UserId};

pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub metric_id: String,
    pub quantile: f64,
    pub alert_threshold: f64,
    pub alpha: f64,
    pub seed: u64,
    pub n_boot: usize,
    /// Run the corrections even without an SRM alert.
    pub force_correct: bool,
    pub device_user_threshold: usize,
    pub min_donors: usize,
    /// Events before this timestamp (within `pre_window_ms`) only count
    /// toward engagement. Without it every event is experiment data and all
    /// users are low engagement.
    pub experiment_start: Option<i64>,
    pub pre_window_ms: i64,
    /// Event count below which a user's quantile is flagged as unreliable;
    /// defaults from the quantile level.
    pub few_event_min: Option<u64>,
    /// Planned treatment share for the assignment SRM check.
    pub expected_treatment_share: f64,
}

impl AnalysisOptions {
    pub fn new(metric_id: impl Into<String>) -> Self {
        AnalysisOptions {
            metric_id: metric_id.into(),
            quantile: 0.5,
            alert_threshold: DEFAULT_ALERT_THRESHOLD,
            alpha: 0.05,
            seed: DEFAULT_SEED,
            n_boot: 1000,
            force_correct: false,
            device_user_threshold: DEFAULT_DEVICE_USER_THRESHOLD,
            min_donors: 5,
            experiment_start: None,
            pre_window_ms: DEFAULT_PRE_WINDOW_MS,
            few_event_min: None,
            expected_treatment_share: 0.5,
        }
    }
}

/// Bookkeeping that does not change the conclusions but explains them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub covariates: CovariateSummary,
    /// Experiment-window events from users without an assignment.
    pub unassigned_events: u64,
    pub missing: BucketMissing,
    pub few_events: FewEventReport,
    /// User-level effect per device class.
    pub per_device: BTreeMap<String, TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imputation_fallbacks: Option<FallbackCounts>,
    #[serde(default)]
    pub dropped_match_groups: Vec<SubgroupKey>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub metric_id: String,
    pub quantile: f64,
    pub alpha: f64,
    pub seed: u64,
    pub n_boot: usize,
    pub event_level: TestResult,
    pub user_level: TestResult,
    pub self_selection_srm: SrmReport,
    pub assignment_srm: TestResult,
    /// Present when the SRM check alerted or correction was forced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected: Option<BTreeMap<CorrectionMethod, TestResult>>,
    pub diagnostics: Diagnostics,
}

const NOTES: [&str; 3] = [
    "imputation estimates the effect on all exposed users; matching estimates it on users who have the metric",
    "the matching test uses weighted means with Kish effective sample size (sum w)^2 / sum w^2 per bucket",
    "imputation cells with fewer than min_donors observed users borrow donors from a wider cell in the same bucket; see imputation_fallbacks",
];

/// Runs the analysis for one metric.
pub fn analyze(
    events: &[PerfEvent],
    assignments: &[Assignment],
    device_map: &HashMap<UserId, String>,
    opts: &AnalysisOptions,
) -> Result<AnalysisReport> {
    if !(0.0..=1.0).contains(&opts.quantile) {
        return Err(Error::InvalidInput(format!(
            "quantile {} outside [0, 1]",
            opts.quantile
        )));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {} must lie in (0, 1)", opts.alpha)));
    }
    let (pre, during) = split_by_window(events, &opts.metric_id, opts.experiment_start, opts.pre_window_ms);
    if during.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no experiment-window events for metric `{}`",
            opts.metric_id
        )));
    }
    let (covs, cov_summary) = derive_covariates(&pre, assignments, device_map, opts.device_user_threshold)?;
    let assigned: std::collections::HashSet<&UserId> = covs.iter().map(|c| &c.user_id).collect();
    let unassigned_events = during.iter().filter(|e| !assigned.contains(&e.user_id)).count() as u64;

    let values = user_level_values(&during, &covs, opts.quantile)?;
    let event_level = event_level_ate(&during, &covs, opts.quantile, opts.n_boot, seed::derive(opts.seed, 1))?;
    let user_level = user_level_ate(&values, &covs)?.test;
    let srm = self_selection_srm(&values, &covs, opts.alert_threshold)?;
    let n_t = covs.iter().filter(|c| c.bucket == Bucket::Treatment).count() as u64;
    let assignment = assignment_srm(n_t, covs.len() as u64 - n_t, opts.expected_treatment_share)?;

    let mut diagnostics = Diagnostics {
        covariates: cov_summary,
        unassigned_events,
        missing: missing_counts(&values, &covs),
        few_events: few_event_diagnostic(&values, opts.quantile, opts.few_event_min),
        per_device: per_device_ate(&values, &covs)?,
        imputation_fallbacks: None,
        dropped_match_groups: Vec::new(),
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    };

    let corrected = if srm.alert || opts.force_correct {
        let imp = corrected_ate_imputation(
            &values,
            &covs,
            seed::derive(opts.seed, 2),
            ImputeOptions {
                min_donors: opts.min_donors,
            },
        )?;
        let mat = corrected_ate_matching(&values, &covs)?;
        diagnostics.imputation_fallbacks = Some(imp.fallbacks);
        diagnostics.dropped_match_groups = mat.dropped_groups.clone();
        Some(BTreeMap::from([
            (CorrectionMethod::None, user_level.clone()),
            (CorrectionMethod::Imputation, imp.test),
            (CorrectionMethod::Matching, mat.test),
        ]))
    } else {
        None
    };

    Ok(AnalysisReport {
        metric_id: opts.metric_id.clone(),
        quantile: opts.quantile,
        alpha: opts.alpha,
        seed: opts.seed,
        n_boot: opts.n_boot,
        event_level,
        user_level,
        self_selection_srm: srm,
        assignment_srm: assignment,
        corrected,
        diagnostics,
    })
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable summary with the user-level comparison laid out as
    /// rows {mean difference, p-value} by columns {without correction,
    /// imputation, matching}.
    pub fn to_table(&self) -> String {
        let q = self.quantile * 100.0;
        let mut s = String::new();
        let _ = writeln!(s, "metric {} (P{q:.0})", self.metric_id);
        let e = &self.event_level;
        let _ = writeln!(
            s,
            "event-level   difference {:>10.4}   p-value {}",
            e.estimate,
            fmt_p(e.p_value)
        );
        let srm = &self.self_selection_srm;
        let _ = writeln!(
            s,
            "self-selection SRM: with metric {:.2}% treatment vs {:.2}% control, delta_miss {:+.2} pp, p-value {}{}",
            100.0 * srm.p_treatment,
            100.0 * srm.p_control,
            100.0 * srm.delta_miss,
            fmt_p(srm.test.p_value),
            if srm.alert { "  ALERT" } else { "" }
        );
        let cols: Vec<(CorrectionMethod, &TestResult)> = match &self.corrected {
            Some(c) => CorrectionMethod::ALL
                .iter()
                .filter_map(|m| c.get(m).map(|t| (*m, t)))
                .collect(),
            None => vec![(CorrectionMethod::None, &self.user_level)],
        };
        let _ = writeln!(s, "user-level");
        let mut header = format!("{:<18}", "");
        let mut diff = format!("{:<18}", "mean difference");
        let mut pv = format!("{:<18}", "p-value");
        for (m, t) in cols {
            let _ = write!(header, "{:>20}", m.title());
            let _ = write!(diff, "{:>20.4}", t.estimate);
            let _ = write!(pv, "{:>20}", fmt_p(t.p_value));
        }
        let _ = writeln!(s, "{header}\n{diff}\n{pv}");
        let f = &self.diagnostics.few_events;
        if f.n_flagged > 0 {
            let _ = writeln!(
                s,
                "note: {:.1}% of users with the metric have fewer than {} events; their P{q:.0} is biased low",
                100.0 * f.flagged_fraction,
                f.min_events
            );
        }
        if let Some(fb) = &self.diagnostics.imputation_fallbacks {
            if fb.total() > 0 {
                let _ = writeln!(s, "note: {} imputation cells used fallback donors", fb.total());
            }
        }
        if !self.diagnostics.dropped_match_groups.is_empty() {
            let _ = writeln!(
                s,
                "note: {} matching cells had no control users and were dropped",
                self.diagnostics.dropped_match_groups.len()
            );
        }
        s
    }

    /// One CSV row per (level, method).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "metric_id",
            "level",
            "method",
            "estimate",
            "std_error",
            "p_value",
            "n_treatment",
            "n_control",
        ])?;
        let mut rows: Vec<(&str, CorrectionMethod, &TestResult)> = vec![
            ("event", CorrectionMethod::None, &self.event_level),
            ("user", CorrectionMethod::None, &self.user_level),
        ];
        if let Some(c) = &self.corrected {
            for m in [CorrectionMethod::Imputation, CorrectionMethod::Matching] {
                if let Some(t) = c.get(&m) {
                    rows.push(("user", m, t));
                }
            }
        }
        for (level, m, t) in rows {
            w.write_record([
                self.metric_id.clone(),
                level.to_string(),
                m.as_str().to_string(),
                t.estimate.to_string(),
                t.std_error.to_string(),
                t.p_value.to_string(),
                t.n_treatment.to_string(),
                t.n_control.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// 600 users; `gap` extra treatment users have no events.
    fn fixture(gap: f64) -> (Vec<PerfEvent>, Vec<Assignment>, HashMap<UserId, String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut events = Vec::new();
        let mut assignments = Vec::new();
        let mut devices = HashMap::new();
        for i in 0..600 {
            let id = UserId::new(format!("u{i}"));
            let bucket = if i % 2 == 0 { Bucket::Treatment } else { Bucket::Control };
            let fast = rng.random::<f64>() < 0.4;
            devices.insert(id.clone(), if fast { "fast" } else { "slow" }.to_string());
            assignments.push(Assignment {
                user_id: id.clone(),
                bucket,
            });
            for k in 0..rng.random_range(0..6) {
                events.push(PerfEvent {
                    user_id: id.clone(),
                    metric_id: "m".into(),
                    value: 100.0,
                    timestamp: 1_000 + k,
                });
            }
            let p_miss = 0.1 + if bucket.is_treatment() && !fast { gap } else { 0.0 };
            if rng.random::<f64>() < p_miss {
                continue;
            }
            let base = if fast { 150.0 } else { 400.0 };
            for k in 0..rng.random_range(1..8) {
                events.push(PerfEvent {
                    user_id: id.clone(),
                    metric_id: "m".into(),
                    value: base + rng.random_range(-50.0..50.0),
                    timestamp: 10_000 + k,
                });
            }
        }
        (events, assignments, devices)
    }

    fn opts() -> AnalysisOptions {
        AnalysisOptions {
            experiment_start: Some(5_000),
            device_user_threshold: 10,
            n_boot: 200,
            ..AnalysisOptions::new("m")
        }
    }

    #[test]
    fn no_alert_means_no_corrections() {
        let (e, a, d) = fixture(0.0);
        let r = analyze(&e, &a, &d, &opts()).unwrap();
        assert!(!r.self_selection_srm.alert);
        assert!(r.corrected.is_none());
        assert!(!r.to_json().unwrap().contains("\"corrected\""));
        assert_eq!(r.diagnostics.covariates.n_users, 600);
    }

    #[test]
    fn alert_brings_all_three_methods() {
        let (e, a, d) = fixture(0.5);
        let r = analyze(&e, &a, &d, &opts()).unwrap();
        assert!(r.self_selection_srm.alert);
        let c = r.corrected.as_ref().unwrap();
        assert_eq!(c.keys().copied().collect::<Vec<_>>(), CorrectionMethod::ALL.to_vec());
        // slow treated users went missing, so the naive difference is biased
        // toward fast; both corrections pull it back toward zero
        assert!(c[&CorrectionMethod::None].estimate < -30.0);
        assert!(c[&CorrectionMethod::Imputation].estimate.abs() < c[&CorrectionMethod::None].estimate.abs());
        assert!(c[&CorrectionMethod::Matching].estimate.abs() < c[&CorrectionMethod::None].estimate.abs());
        let table = r.to_table();
        for col in [
            "Without Correction",
            "Imputation",
            "Matching",
            "mean difference",
            "p-value",
        ] {
            assert!(table.contains(col), "{table}");
        }
    }

    #[test]
    fn force_correct_without_alert() {
        let (e, a, d) = fixture(0.0);
        let o = AnalysisOptions {
            force_correct: true,
            ..opts()
        };
        assert!(analyze(&e, &a, &d, &o).unwrap().corrected.is_some());
    }

    #[test]
    fn json_round_trips() {
        let (e, a, d) = fixture(0.5);
        let r = analyze(&e, &a, &d, &opts()).unwrap();
        let text = r.to_json().unwrap();
        assert_eq!(AnalysisReport::from_json(&text).unwrap(), r);
        for key in [
            "metric_id",
            "quantile",
            "event_level",
            "user_level",
            "self_selection_srm",
            "corrected",
            "diagnostics",
        ] {
            assert!(text.contains(&format!("\"{key}\"")));
        }
    }

    #[test]
    fn csv_rows() {
        let (e, a, d) = fixture(0.5);
        let r = analyze(&e, &a, &d, &opts()).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let methods: Vec<String> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
            .collect();
        assert_eq!(
            methods,
            ["m,event,none", "m,user,none", "m,user,imputation", "m,user,matching"]
        );
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (e, a, d) = fixture(0.5);
        let x = analyze(&e, &a, &d, &opts()).unwrap().to_json().unwrap();
        let y = analyze(&e, &a, &d, &opts()).unwrap().to_json().unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn unknown_metric_is_an_error() {
        let (e, a, d) = fixture(0.0);
        let o = AnalysisOptions::new("nope");
        assert!(analyze(&e, &a, &d, &o).is_err());
    }
}
