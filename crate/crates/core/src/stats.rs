//! Statistical primitives shared by every analysis path.
//!
//! All two-sample routines report `treatment - control` and two-sided
//! p-values. There is exactly one quantile definition in the crate:
//! linear interpolation at `h = (n - 1) * q` on the sorted sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::seed;

/// Which test produced a [`TestResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    WelchT,
    WeightedT,
    TwoProportionZ,
    OneProportionZ,
    ClusterBootstrap,
}

impl TestMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TestMethod::WelchT => "welch_t",
            TestMethod::WeightedT => "weighted_t",
            TestMethod::TwoProportionZ => "two_proportion_z",
            TestMethod::OneProportionZ => "one_proportion_z",
            TestMethod::ClusterBootstrap => "cluster_bootstrap",
        }
    }
}

/// Outcome of a two-sample comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    /// Treatment minus control.
    pub estimate: f64,
    pub std_error: f64,
    pub statistic: f64,
    pub p_value: f64,
    /// Degrees of freedom for t-tests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    pub n_treatment: usize,
    pub n_control: usize,
    /// Set when the statistic is undefined (zero variance) and the p-value
    /// was pinned to 1.
    #[serde(default)]
    pub degenerate: bool,
}

impl TestResult {
    pub fn is_significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("{what}: non-finite value at index {i}"))),
        None => Ok(()),
    }
}

fn check_q(q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("quantile level {q} outside [0, 1]")))
    }
}

/// Linear-interpolation quantile of a sample.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("quantile of an empty sample".into()));
    }
    check_q(q)?;
    check_finite(values, "quantile")?;
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

/// Quantile of an already sorted, non-empty, finite sample. No validation.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let a = sorted[lo];
    match sorted.get(lo + 1) {
        Some(&b) if frac > 0.0 => (a + frac * (b - a)).min(b),
        _ => a,
    }
}

/// Quantile computed by selection; reorders `values`. Gives the same result as
/// [`quantile_sorted`] on the sorted copy. No validation.
pub(crate) fn quantile_select(values: &mut [f64], q: f64) -> f64 {
    let n = values.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, &mut a, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac > 0.0 && !rest.is_empty() {
        let b = rest.iter().copied().fold(f64::INFINITY, f64::min);
        (a + frac * (b - a)).min(b)
    } else {
        a
    }
}

/// `1 / (1 + e^-x)`, evaluated without overflow for large |x|.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-sided normal tail probability `P(|Z| >= |z|)`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

fn student_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64], m: f64) -> f64 {
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

/// Mean, variance of a single observation, and the sample size entering the
/// standard error. Shared by the plain and weighted t-tests so that unit
/// weights reproduce Welch exactly.
struct Moments {
    mean: f64,
    var: f64,
    n: f64,
}

fn welch_from_moments(t: Moments, c: Moments, n_t: usize, n_c: usize, method: TestMethod) -> Result<TestResult> {
    if t.var == 0.0 && c.var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let a = t.var / t.n;
    let b = c.var / c.n;
    let se = (a + b).sqrt();
    let df = (a + b) * (a + b) / (a * a / (t.n - 1.0) + b * b / (c.n - 1.0));
    let estimate = t.mean - c.mean;
    let statistic = estimate / se;
    Ok(TestResult {
        method,
        estimate,
        std_error: se,
        statistic,
        p_value: student_two_sided_p(statistic, df),
        df: Some(df),
        n_treatment: n_t,
        n_control: n_c,
        degenerate: false,
    })
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t_test(treatment: &[f64], control: &[f64]) -> Result<TestResult> {
    for (name, g) in [("treatment", treatment), ("control", control)] {
        if g.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{name} group has {} values, need at least 2",
                g.len()
            )));
        }
        check_finite(g, name)?;
    }
    let moments = |g: &[f64]| {
        let m = mean(g);
        Moments {
            mean: m,
            var: sample_variance(g, m),
            n: g.len() as f64,
        }
    };
    welch_from_moments(
        moments(treatment),
        moments(control),
        treatment.len(),
        control.len(),
        TestMethod::WelchT,
    )
}

fn weighted_moments(values: &[f64], weights: &[f64], name: &str) -> Result<Moments> {
    if values.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{name}: {} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if values.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{name} group has {} values, need at least 2",
            values.len()
        )));
    }
    check_finite(values, name)?;
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "{name}: weight {} at index {i} is not positive",
            weights[i]
        )));
    }
    let sw: f64 = weights.iter().sum();
    let sw2: f64 = weights.iter().map(|w| w * w).sum();
    let m = values.iter().zip(weights).map(|(v, w)| w * v).sum::<f64>() / sw;
    let ss: f64 = values.iter().zip(weights).map(|(v, w)| w * (v - m) * (v - m)).sum();
    // Kish effective size; the variance denominator sw - sw2/sw equals
    // sw * (n_eff - 1) / n_eff and collapses to n - 1 for unit weights.
    let n_eff = sw * sw / sw2;
    if n_eff <= 1.0 {
        return Err(Error::InsufficientData(format!(
            "{name}: effective sample size {n_eff} must exceed 1"
        )));
    }
    Ok(Moments {
        mean: m,
        var: ss / (sw - sw2 / sw),
        n: n_eff,
    })
}

/// Weighted two-sample t-test.
///
/// Each group's mean is the weighted mean and its variance is the weighted
/// variance with Kish effective sample size `(Σw)² / Σw²`. The two groups are
/// combined as in Welch's test with Satterthwaite degrees of freedom computed
/// on the effective sizes. With all weights equal to one this is exactly
/// [`welch_t_test`].
pub fn weighted_t_test(
    treatment: &[f64],
    treatment_weights: &[f64],
    control: &[f64],
    control_weights: &[f64],
) -> Result<TestResult> {
    let t = weighted_moments(treatment, treatment_weights, "treatment")?;
    let c = weighted_moments(control, control_weights, "control")?;
    welch_from_moments(t, c, treatment.len(), control.len(), TestMethod::WeightedT)
}

/// Pooled two-sample proportion z-test of `k1/n1` against `k2/n2`.
///
/// When the pooled proportion is 0 or 1 the statistic is undefined; the
/// result then carries `p_value = 1` and `degenerate = true`.
pub fn two_proportion_test(k1: u64, n1: u64, k2: u64, n2: u64) -> Result<TestResult> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::InsufficientData("proportion test with an empty sample".into()));
    }
    if k1 > n1 || k2 > n2 {
        return Err(Error::InvalidInput(format!(
            "successes exceed trials: {k1}/{n1}, {k2}/{n2}"
        )));
    }
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let estimate = k1 as f64 / n1f - k2 as f64 / n2f;
    let pooled = (k1 + k2) as f64 / (n1f + n2f);
    let var = pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f);
    let mut out = TestResult {
        method: TestMethod::TwoProportionZ,
        estimate,
        std_error: 0.0,
        statistic: 0.0,
        p_value: 1.0,
        df: None,
        n_treatment: n1 as usize,
        n_control: n2 as usize,
        degenerate: true,
    };
    if var > 0.0 {
        let se = var.sqrt();
        out.std_error = se;
        out.statistic = estimate / se;
        out.p_value = normal_two_sided_p(out.statistic);
        out.degenerate = false;
    }
    Ok(out)
}

/// One-sample proportion z-test of `k/n` against `expected`.
pub fn one_proportion_test(k: u64, n: u64, expected: f64) -> Result<TestResult> {
    if n == 0 {
        return Err(Error::InsufficientData("proportion test with zero trials".into()));
    }
    if !(expected > 0.0 && expected < 1.0) {
        return Err(Error::InvalidInput(format!(
            "expected proportion {expected} must lie strictly between 0 and 1"
        )));
    }
    if k > n {
        return Err(Error::InvalidInput(format!("successes exceed trials: {k}/{n}")));
    }
    let nf = n as f64;
    let estimate = k as f64 / nf - expected;
    let se = (expected * (1.0 - expected) / nf).sqrt();
    let statistic = estimate / se;
    Ok(TestResult {
        method: TestMethod::OneProportionZ,
        estimate,
        std_error: se,
        statistic,
        p_value: normal_two_sided_p(statistic),
        df: None,
        n_treatment: k as usize,
        n_control: (n - k) as usize,
        degenerate: false,
    })
}

/// Per-user event values flattened into one buffer.
struct Clusters {
    values: Vec<f64>,
    offsets: Vec<usize>,
}

impl Clusters {
    fn new(groups: &[Vec<f64>]) -> Self {
        let mut values = Vec::new();
        let mut offsets = vec![0];
        for g in groups.iter().filter(|g| !g.is_empty()) {
            values.extend_from_slice(g);
            offsets.push(values.len());
        }
        Clusters { values, offsets }
    }

    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    fn get(&self, i: usize) -> &[f64] {
        &self.values[self.offsets[i]..self.offsets[i + 1]]
    }

    fn resample_quantile(&self, rng: &mut impl rand::Rng, q: f64, buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        let n = self.len();
        for _ in 0..n {
            buf.extend_from_slice(self.get(rng.random_range(0..n)));
        }
        quantile_select(buf, q)
    }
}

/// Event-level quantile difference with a user-level (cluster) bootstrap.
///
/// `treatment` and `control` hold one event list per user. Users are resampled
/// with replacement within each bucket, their events pooled, and the quantile
/// difference recomputed. The p-value inverts the percentile interval:
/// `min(1, 2 * (min(#{d <= 0}, #{d >= 0}) + 1) / (B + 1))`. The standard error
/// is the standard deviation of the replicates. Replicate `r` draws from its
/// own substream of `seed`, so the result does not depend on thread count.
pub fn cluster_bootstrap_quantile_diff(
    treatment: &[Vec<f64>],
    control: &[Vec<f64>],
    q: f64,
    n_boot: usize,
    seed: u64,
) -> Result<TestResult> {
    check_q(q)?;
    if n_boot < 100 {
        return Err(Error::InvalidInput(format!(
            "n_boot = {n_boot}; at least 100 bootstrap replicates are required"
        )));
    }
    let t = Clusters::new(treatment);
    let c = Clusters::new(control);
    for (name, cl) in [("treatment", &t), ("control", &c)] {
        if cl.values.is_empty() {
            return Err(Error::InsufficientData(format!("{name} bucket has no events")));
        }
        check_finite(&cl.values, name)?;
    }
    let estimate = {
        let mut tv = t.values.clone();
        let mut cv = c.values.clone();
        quantile_select(&mut tv, q) - quantile_select(&mut cv, q)
    };
    let diffs: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map_init(Vec::new, |buf, r| {
            let mut rng = seed::rng(seed, r as u64);
            let qt = t.resample_quantile(&mut rng, q, buf);
            let qc = c.resample_quantile(&mut rng, q, buf);
            qt - qc
        })
        .collect();

    let below = diffs.iter().filter(|d| **d <= 0.0).count();
    let above = diffs.iter().filter(|d| **d >= 0.0).count();
    let p_value = (2.0 * (below.min(above) + 1) as f64 / (n_boot + 1) as f64).min(1.0);
    let m = mean(&diffs);
    let se = sample_variance(&diffs, m).sqrt();
    let statistic = if se > 0.0 { estimate / se } else { 0.0 };
    Ok(TestResult {
        method: TestMethod::ClusterBootstrap,
        estimate,
        std_error: se,
        statistic,
        p_value,
        df: None,
        n_treatment: t.len(),
        n_control: c.len(),
        degenerate: se == 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent oracles. They share nothing with the code under test except
    // the textbook definitions.

    fn oracle_quantile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = (v.len() as f64 - 1.0) * q;
        let i = h.floor() as usize;
        if i + 1 >= v.len() {
            return v[i];
        }
        v[i] + (h - i as f64) * (v[i + 1] - v[i])
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    /// `P(|Z| >= |z|)` by integrating the normal density.
    fn oracle_normal_p(z: f64) -> f64 {
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        (1.0 - 2.0 * simpson(phi, 0.0, z.abs(), 20_000)).max(0.0)
    }

    /// `P(|T| >= |t|)` by integrating the Student t density.
    fn oracle_t_p(t: f64, df: f64) -> f64 {
        use statrs::function::gamma::ln_gamma;
        let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
        let dens = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
        (1.0 - 2.0 * simpson(dens, 0.0, t.abs(), 20_000)).max(0.0)
    }

    fn oracle_welch(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
        let nx = x.len() as f64;
        let ny = y.len() as f64;
        let mx = x.iter().sum::<f64>() / nx;
        let my = y.iter().sum::<f64>() / ny;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (nx - 1.0);
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (ny - 1.0);
        let se = (vx / nx + vy / ny).sqrt();
        let t = (mx - my) / se;
        let df = (vx / nx + vy / ny).powi(2) / ((vx / nx).powi(2) / (nx - 1.0) + (vy / ny).powi(2) / (ny - 1.0));
        (mx - my, t, df, oracle_t_p(t, df))
    }

    fn oracle_pooled_z(k1: u64, n1: u64, k2: u64, n2: u64) -> (f64, f64) {
        let p1 = k1 as f64 / n1 as f64;
        let p2 = k2 as f64 / n2 as f64;
        let p = (k1 + k2) as f64 / (n1 + n2) as f64;
        let z = (p1 - p2) / (p * (1.0 - p) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
        (z, oracle_normal_p(z))
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5).unwrap(), 2.0);
        assert_eq!(quantile(&[10.0], 0.9).unwrap(), 10.0);
        assert_eq!(quantile(&[100.0, 300.0], 0.5).unwrap(), 200.0);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&[1.0, f64::NAN], 0.5).is_err());
        assert!(quantile(&[1.0], 1.5).is_err());
    }

    #[test]
    fn quantile_matches_sort_oracle_on_random_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=50);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let q: f64 = rng.random();
            let got = quantile(&v, q).unwrap();
            assert_eq!(got, oracle_quantile(&v, q));
            let mut scratch = v.clone();
            assert_eq!(quantile_select(&mut scratch, q), got);
        }
    }

    #[test]
    fn welch_identical_groups() {
        let r = welch_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn welch_antisymmetry() {
        let a = [3.1, 4.5, 2.2, 5.0, 3.3];
        let b = [1.0, 2.5, 2.0, 1.7];
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        assert_eq!(ab.estimate, -ba.estimate);
        assert!((ab.p_value - ba.p_value).abs() < 1e-15);
    }

    #[test]
    fn welch_matches_textbook_oracle() {
        let x = [12.1, 14.3, 11.8, 13.9, 15.2, 12.7, 14.8, 13.1, 12.4, 16.0];
        let y = [11.2, 12.9, 10.4, 11.8, 13.5, 10.9, 12.2, 11.1, 14.0, 11.6];
        let (est, t, df, p) = oracle_welch(&x, &y);
        let r = welch_t_test(&x, &y).unwrap();
        assert!((r.estimate - est).abs() < 1e-12);
        assert!((r.statistic - t).abs() < 1e-10);
        assert!((r.df.unwrap() - df).abs() < 1e-10);
        assert!((r.p_value - p).abs() < 1e-10, "{} vs {}", r.p_value, p);
    }

    #[test]
    fn welch_errors() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
        assert!(matches!(
            welch_t_test(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::ZeroVariance)
        ));
        // one constant group is fine
        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 3.0]).is_ok());
    }

    #[test]
    fn weighted_unit_weights_equal_welch() {
        let x = [5.0, 7.5, 6.1, 8.8, 4.9, 7.0];
        let y = [4.0, 5.5, 6.0, 3.9, 5.1];
        let w = welch_t_test(&x, &y).unwrap();
        let u = weighted_t_test(&x, &[1.0; 6], &y, &[1.0; 5]).unwrap();
        assert_eq!(u.estimate, w.estimate);
        assert_eq!(u.std_error, w.std_error);
        assert_eq!(u.df, w.df);
        assert_eq!(u.p_value, w.p_value);
    }

    #[test]
    fn weighted_mean_replication_equivalence() {
        let control = [2.0, 5.0, 9.0];
        let k = 3;
        let replicated: Vec<f64> = control.iter().flat_map(|v| std::iter::repeat_n(*v, k)).collect();
        let treat = [4.0, 6.0, 7.0];
        let a = weighted_t_test(&treat, &[1.0; 3], &replicated, &vec![1.0; replicated.len()]).unwrap();
        let b = weighted_t_test(&treat, &[1.0; 3], &control, &[k as f64; 3]).unwrap();
        assert!((a.estimate - b.estimate).abs() < 1e-12);
    }

    #[test]
    fn weighted_matches_hand_oracle() {
        // treatment: values {1, 3} with weights {1, 2}; control unit weights.
        // weighted mean = (1 + 6) / 3 = 7/3
        // Σw(y-m)² = (4/3)² + 2(2/3)² = 16/9 + 8/9 = 24/9
        // Σw = 3, Σw² = 5, n_eff = 9/5, denominator = 3 - 5/3 = 4/3
        // variance = (24/9) / (4/3) = 2
        let tv = [1.0, 3.0];
        let tw = [1.0, 2.0];
        let cv = [0.0, 2.0, 4.0];
        let cw = [1.0, 1.0, 1.0];
        let r = weighted_t_test(&tv, &tw, &cv, &cw).unwrap();
        let a: f64 = 2.0 / (9.0 / 5.0);
        let b: f64 = 4.0 / 3.0;
        assert!((r.estimate - (7.0 / 3.0 - 2.0)).abs() < 1e-12);
        assert!((r.std_error - (a + b).sqrt()).abs() < 1e-12);
        let df = (a + b).powi(2) / (a * a / (9.0 / 5.0 - 1.0) + b * b / 2.0);
        assert!((r.df.unwrap() - df).abs() < 1e-10);
        let p = oracle_t_p(r.estimate / (a + b).sqrt(), df);
        assert!((r.p_value - p).abs() < 1e-9);
    }

    #[test]
    fn weighted_rejects_bad_weights() {
        assert!(weighted_t_test(&[1.0, 2.0], &[1.0, 0.0], &[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(weighted_t_test(&[1.0, 2.0], &[1.0, -1.0], &[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(weighted_t_test(&[1.0, 2.0], &[1.0], &[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn two_proportion_examples() {
        let r = two_proportion_test(50, 100, 50, 100).unwrap();
        assert_eq!((r.estimate, r.statistic, r.p_value), (0.0, 0.0, 1.0));

        let a = two_proportion_test(30, 100, 45, 120).unwrap();
        let b = two_proportion_test(45, 120, 30, 100).unwrap();
        assert_eq!(a.estimate, -b.estimate);
        assert_eq!(a.statistic, -b.statistic);
        assert_eq!(a.p_value, b.p_value);

        let r = two_proportion_test(6779, 10000, 6824, 10000).unwrap();
        let (z, p) = oracle_pooled_z(6779, 10000, 6824, 10000);
        assert!((r.statistic - z).abs() < 1e-12);
        assert!((r.p_value - p).abs() < 1e-10);
        assert!(r.p_value > 0.05);
    }

    #[test]
    fn two_proportion_degenerate() {
        let r = two_proportion_test(100, 100, 80, 80).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        let r = two_proportion_test(0, 100, 0, 80).unwrap();
        assert!(r.degenerate);
        assert!(two_proportion_test(5, 4, 1, 2).is_err());
        assert!(two_proportion_test(0, 0, 1, 2).is_err());
    }

    #[test]
    fn two_proportion_null_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000u64;
        let mut rejections = 0;
        for _ in 0..1000 {
            let k1 = (0..n).filter(|_| rng.random::<f64>() < 0.7).count() as u64;
            let k2 = (0..n).filter(|_| rng.random::<f64>() < 0.7).count() as u64;
            if two_proportion_test(k1, n, k2, n).unwrap().p_value < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / 1000.0;
        assert!((0.03..=0.07).contains(&rate), "rate {rate}");
    }

    #[test]
    fn one_proportion_examples() {
        let r = one_proportion_test(5000, 10_000, 0.5).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        let r = one_proportion_test(5100, 10_000, 0.5).unwrap();
        let z = (0.51 - 0.5) / (0.25f64 / 10_000.0).sqrt();
        assert!((r.statistic - z).abs() < 1e-9);
        assert!((r.p_value - oracle_normal_p(z)).abs() < 1e-10);
        assert!(one_proportion_test(10_000, 10_000, 0.5).unwrap().p_value < 1e-300);
    }

    #[test]
    fn expit_examples() {
        assert_eq!(expit(0.0), 0.5);
        assert!((expit(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(expit(800.0) <= 1.0 && expit(-800.0) >= 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = rng.random_range(-40.0..40.0);
            assert!((expit(x) + expit(-x) - 1.0).abs() < 1e-15);
        }
    }

    fn users(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let k = rng.random_range(1..8);
                (0..k).map(|_| rng.random_range(50.0..500.0) + shift).collect()
            })
            .collect()
    }

    #[test]
    fn bootstrap_identical_buckets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = users(&mut rng, 200, 0.0);
        let r = cluster_bootstrap_quantile_diff(&g, &g, 0.5, 200, 9).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert!(r.p_value > 0.3);
    }

    #[test]
    fn bootstrap_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = users(&mut rng, 100, 0.0);
        let c = users(&mut rng, 100, 0.0);
        let a = cluster_bootstrap_quantile_diff(&t, &c, 0.9, 300, 42).unwrap();
        let b = cluster_bootstrap_quantile_diff(&t, &c, 0.9, 300, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_detects_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = users(&mut rng, 500, 0.0);
        let t: Vec<Vec<f64>> = c.iter().map(|u| u.iter().map(|v| v + 100.0).collect()).collect();
        let r = cluster_bootstrap_quantile_diff(&t, &c, 0.5, 1000, 1).unwrap();
        assert!((r.estimate - 100.0).abs() < 1e-9);
        assert!(r.p_value < 0.01);
    }

    #[test]
    fn bootstrap_errors() {
        let g = vec![vec![1.0, 2.0]];
        assert!(cluster_bootstrap_quantile_diff(&g, &[vec![]], 0.5, 100, 0).is_err());
        assert!(cluster_bootstrap_quantile_diff(&g, &g, 0.5, 99, 0).is_err());
    }

    proptest! {
        #[test]
        fn quantile_monotone_and_permutation_invariant(
            mut v in prop::collection::vec(-1e6f64..1e6, 1..40),
            q1 in 0.0f64..=1.0,
            q2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let a = quantile(&v, lo).unwrap();
            let b = quantile(&v, hi).unwrap();
            prop_assert!(a <= b);
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a >= min && b <= max);
            v.reverse();
            prop_assert_eq!(quantile(&v, lo).unwrap(), a);
        }

        #[test]
        fn t_tests_shift_invariance(
            t in prop::collection::vec(0.0f64..100.0, 3..30),
            c in prop::collection::vec(0.0f64..100.0, 3..30),
            shift in -50.0f64..50.0,
        ) {
            let base = welch_t_test(&t, &c).unwrap();
            let t2: Vec<f64> = t.iter().map(|v| v + shift).collect();
            let c2: Vec<f64> = c.iter().map(|v| v + shift).collect();
            let both = welch_t_test(&t2, &c2).unwrap();
            prop_assert!((both.estimate - base.estimate).abs() < 1e-9);
            prop_assert!((both.p_value - base.p_value).abs() < 1e-6);
            let only = welch_t_test(&t2, &c).unwrap();
            prop_assert!((only.estimate - base.estimate - shift).abs() < 1e-9);

            let tw: Vec<f64> = (0..t.len()).map(|i| 1.0 + (i % 3) as f64).collect();
            let cw: Vec<f64> = (0..c.len()).map(|i| 0.5 + (i % 2) as f64).collect();
            let wb = weighted_t_test(&t, &tw, &c, &cw).unwrap();
            let wboth = weighted_t_test(&t2, &tw, &c2, &cw).unwrap();
            prop_assert!((wboth.estimate - wb.estimate).abs() < 1e-9);
            prop_assert!((wboth.p_value - wb.p_value).abs() < 1e-6);
            let wonly = weighted_t_test(&t2, &tw, &c, &cw).unwrap();
            prop_assert!((wonly.estimate - wb.estimate - shift).abs() < 1e-9);
        }
    }
}
