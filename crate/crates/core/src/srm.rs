//! Sample ratio mismatch checks.
//!
//! The assignment check compares bucket sizes against the planned split. The
//! self-selection check compares, between buckets, the share of assigned users
//! who produced the metric at all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::UserCovariates;
use crate::metrics::{check_aligned, missing_counts, UserMetricValue};
use crate::stats::{self, TestResult};

pub const DEFAULT_ALERT_THRESHOLD: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrmReport {
    /// Share of treatment users with a metric value.
    pub p_treatment: f64,
    /// Share of control users with a metric value.
    pub p_control: f64,
    /// Missing share in treatment minus missing share in control.
    pub delta_miss: f64,
    pub test: TestResult,
    pub alert: bool,
    pub alert_threshold: f64,
}

/// One-sample z-test of the observed treatment share against `expected_ratio`.
pub fn assignment_srm(n_treatment: u64, n_control: u64, expected_ratio: f64) -> Result<TestResult> {
    let n = n_treatment + n_control;
    if n == 0 {
        return Err(Error::InsufficientData("no assigned users".into()));
    }
    stats::one_proportion_test(n_treatment, n, expected_ratio)
}

fn check_threshold(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("alert threshold {t} must lie in (0, 1]")))
    }
}

/// Self-selection SRM from raw counts: `k` users with the metric out of `n`
/// assigned, per bucket.
pub fn self_selection_srm_counts(
    k_treatment: u64,
    n_treatment: u64,
    k_control: u64,
    n_control: u64,
    alert_threshold: f64,
) -> Result<SrmReport> {
    check_threshold(alert_threshold)?;
    for (name, n) in [("treatment", n_treatment), ("control", n_control)] {
        if n == 0 {
            return Err(Error::InsufficientData(format!("{name} bucket has no users")));
        }
    }
    let test = stats::two_proportion_test(k_treatment, n_treatment, k_control, n_control)?;
    let p_treatment = k_treatment as f64 / n_treatment as f64;
    let p_control = k_control as f64 / n_control as f64;
    Ok(SrmReport {
        p_treatment,
        p_control,
        delta_miss: p_control - p_treatment,
        alert: test.p_value < alert_threshold,
        test,
        alert_threshold,
    })
}

/// Self-selection SRM over aligned per-user values and covariates.
pub fn self_selection_srm(
    values: &[UserMetricValue],
    covariates: &[UserCovariates],
    alert_threshold: f64,
) -> Result<SrmReport> {
    check_aligned(values, covariates)?;
    let m = missing_counts(values, covariates);
    self_selection_srm_counts(
        m.treatment.observed(),
        m.treatment.assigned,
        m.control.observed(),
        m.control.assigned,
        alert_threshold,
    )
}
