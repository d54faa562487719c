//! Self-selection bias correction for user-level metrics.
//!
//! [`impute`] fills each missing user with a random draw from the observed
//! values of users sharing the same bucket, device class and engagement level.
//! [`match_weights`] reweights observed control users so that, within each
//! (device class, engagement level) cell, control carries the same total weight
//! as treatment. Imputation estimates the effect on every exposed user;
//! matching estimates it on the users that have the metric.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::UserCovariates;
use crate::metrics::{check_aligned, UserMetricValue};
use crate::seed;
use crate::stats::{self, TestResult};
use crate::types::{Bucket, DeviceClass, Engagement};

/// Cell of the covariate partition. `bucket` is set for imputation cells and
/// left empty for matching cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgroupKey {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<Bucket>,
    pub device_class: DeviceClass,
    pub engagement: Engagement,
}

impl SubgroupKey {
    fn of(c: &UserCovariates, with_bucket: bool) -> Self {
        SubgroupKey {
            bucket: with_bucket.then_some(c.bucket),
            device_class: c.device_class.clone(),
            engagement: c.engagement_level,
        }
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bucket {
            Some(b) => write!(f, "{b}/{}/{}", self.device_class, self.engagement),
            None => write!(f, "{}/{}", self.device_class, self.engagement),
        }
    }
}

/// Partitions user indices by covariate cell. With `restrict_to`, only users
/// whose value is present are included. Indices within a cell are increasing.
pub fn build_subgroups(
    covariates: &[UserCovariates],
    with_bucket: bool,
    restrict_to: Option<&[UserMetricValue]>,
) -> BTreeMap<SubgroupKey, Vec<usize>> {
    let mut cells: HashMap<SubgroupKey, Vec<usize>> = HashMap::new();
    for (i, c) in covariates.iter().enumerate() {
        if restrict_to.is_some_and(|v| v[i].is_missing()) {
            continue;
        }
        cells.entry(SubgroupKey::of(c, with_bucket)).or_default().push(i);
    }
    cells.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputeOptions {
    /// Cells with fewer observed users than this borrow donors from a wider
    /// pool.
    pub min_donors: usize,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        ImputeOptions { min_donors: 5 }
    }
}

/// Where a cell's donors came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorSource {
    /// The cell's own observed users.
    Subgroup,
    /// Same bucket and device class, both engagement levels.
    Device,
    /// Same bucket, device class "Other".
    OtherDevice,
    /// Every observed user in the bucket.
    Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupImputation {
    pub key: SubgroupKey,
    pub n_users: usize,
    pub n_missing: usize,
    pub n_donors: usize,
    pub donor_source: DonorSource,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackCounts {
    pub device: usize,
    pub other_device: usize,
    pub bucket: usize,
}

impl FallbackCounts {
    pub fn total(&self) -> usize {
        self.device + self.other_device + self.bucket
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedValues {
    /// One value per user, in input order.
    pub values: Vec<f64>,
    pub imputed: Vec<bool>,
    pub subgroups: Vec<SubgroupImputation>,
    pub fallbacks: FallbackCounts,
}

/// Observed values per bucket, per (bucket, device) and per bucket for the
/// "Other" class, in user order.
struct DonorPools {
    by_device: HashMap<(Bucket, DeviceClass), Vec<f64>>,
    by_bucket: HashMap<Bucket, Vec<f64>>,
}

impl DonorPools {
    fn new(values: &[UserMetricValue], covariates: &[UserCovariates]) -> Self {
        let mut by_device: HashMap<(Bucket, DeviceClass), Vec<f64>> = HashMap::new();
        let mut by_bucket: HashMap<Bucket, Vec<f64>> = HashMap::new();
        for (v, c) in values.iter().zip(covariates) {
            if let Some(x) = v.value {
                by_device.entry((c.bucket, c.device_class.clone())).or_default().push(x);
                by_bucket.entry(c.bucket).or_default().push(x);
            }
        }
        DonorPools { by_device, by_bucket }
    }

    fn device(&self, bucket: Bucket, device: &DeviceClass) -> &[f64] {
        self.by_device.get(&(bucket, device.clone())).map_or(&[], Vec::as_slice)
    }

    fn bucket(&self, bucket: Bucket) -> &[f64] {
        self.by_bucket.get(&bucket).map_or(&[], Vec::as_slice)
    }
}

/// Picks the donor pool for a cell: its own donors if there are at least
/// `min_donors`, else the first wider level that has enough, else the first
/// non-empty level.
fn choose_donors<'a>(
    key: &SubgroupKey,
    own: &'a [f64],
    pools: &'a DonorPools,
    min_donors: usize,
) -> Option<(&'a [f64], DonorSource)> {
    let bucket = key.bucket.expect("imputation cells carry a bucket");
    let other = DeviceClass::other();
    let ladder: [(&[f64], DonorSource); 4] = [
        (own, DonorSource::Subgroup),
        (pools.device(bucket, &key.device_class), DonorSource::Device),
        (pools.device(bucket, &other), DonorSource::OtherDevice),
        (pools.bucket(bucket), DonorSource::Bucket),
    ];
    ladder
        .iter()
        .find(|(d, _)| d.len() >= min_donors.max(1))
        .or_else(|| ladder.iter().find(|(d, _)| !d.is_empty()))
        .copied()
}

/// Fills every missing user with a draw, with replacement, from the observed
/// values of their (bucket, device class, engagement) cell.
///
/// Cell `g` (in key order) uses random stream `g` of `seed`, so the output is
/// a pure function of the inputs and the seed. Treatment and control never
/// share donors.
pub fn impute(
    values: &[UserMetricValue],
    covariates: &[UserCovariates],
    seed: u64,
    opts: ImputeOptions,
) -> Result<ImputedValues> {
    check_aligned(values, covariates)?;
    let cells: Vec<(SubgroupKey, Vec<usize>)> = build_subgroups(covariates, true, None).into_iter().collect();
    let pools = DonorPools::new(values, covariates);

    let filled: Vec<(SubgroupImputation, Vec<(usize, f64)>)> = cells
        .par_iter()
        .enumerate()
        .map(|(g, (key, members))| {
            let own: Vec<f64> = members.iter().filter_map(|&i| values[i].value).collect();
            let missing: Vec<usize> = members.iter().copied().filter(|&i| values[i].is_missing()).collect();
            let mut info = SubgroupImputation {
                key: key.clone(),
                n_users: members.len(),
                n_missing: missing.len(),
                n_donors: own.len(),
                donor_source: DonorSource::Subgroup,
            };
            if missing.is_empty() {
                return Ok((info, Vec::new()));
            }
            let (donors, source) =
                choose_donors(key, &own, &pools, opts.min_donors).ok_or_else(|| Error::NoDonors(key.clone()))?;
            info.n_donors = donors.len();
            info.donor_source = source;
            let mut rng = seed::rng(seed, g as u64);
            let draws = missing
                .into_iter()
                .map(|i| (i, donors[rng.random_range(0..donors.len())]))
                .collect();
            Ok((info, draws))
        })
        .collect::<Result<_>>()?;

    let mut out: Vec<f64> = values.iter().map(|v| v.value.unwrap_or(f64::NAN)).collect();
    let mut imputed = vec![false; values.len()];
    let mut subgroups = Vec::with_capacity(filled.len());
    let mut fallbacks = FallbackCounts::default();
    for (info, draws) in filled {
        for (i, x) in draws {
            out[i] = x;
            imputed[i] = true;
        }
        match info.donor_source {
            DonorSource::Subgroup => {}
            DonorSource::Device => fallbacks.device += 1,
            DonorSource::OtherDevice => fallbacks.other_device += 1,
            DonorSource::Bucket => fallbacks.bucket += 1,
        }
        subgroups.push(info);
    }
    Ok(ImputedValues {
        values: out,
        imputed,
        subgroups,
        fallbacks,
    })
}

/// What happened to a matching cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStatus {
    Matched,
    /// Treated users but no control users; the ratio is undefined.
    NoControl,
    /// Control users but no treated users; nothing to match them to.
    NoTreatment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchGroup {
    pub key: SubgroupKey,
    pub n_treatment: usize,
    pub n_control: usize,
    /// `n_treatment / n_control` for matched cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub status: MatchStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedWeights {
    /// Per user, in input order. `None` for missing users and for users in
    /// unmatched cells.
    pub weights: Vec<Option<f64>>,
    pub groups: Vec<MatchGroup>,
}

impl MatchedWeights {
    /// Cells with treated users that were dropped for lack of controls.
    pub fn dropped(&self) -> impl Iterator<Item = &MatchGroup> {
        self.groups.iter().filter(|g| g.status == MatchStatus::NoControl)
    }
}

/// Exact-matching weights over observed users: 1 for treated users and
/// `N^T_g / N^C_g` for control users of cell `g` (device class × engagement).
pub fn match_weights(values: &[UserMetricValue], covariates: &[UserCovariates]) -> Result<MatchedWeights> {
    check_aligned(values, covariates)?;
    let mut weights = vec![None; values.len()];
    let mut groups = Vec::new();
    for (key, members) in build_subgroups(covariates, false, Some(values)) {
        let n_t = members.iter().filter(|&&i| covariates[i].bucket.is_treatment()).count();
        let n_c = members.len() - n_t;
        let (status, ratio) = match (n_t, n_c) {
            (_, 0) => (MatchStatus::NoControl, None),
            (0, _) => (MatchStatus::NoTreatment, None),
            _ => (MatchStatus::Matched, Some(n_t as f64 / n_c as f64)),
        };
        if let Some(r) = ratio {
            for &i in &members {
                weights[i] = Some(if covariates[i].bucket.is_treatment() { 1.0 } else { r });
            }
        }
        groups.push(MatchGroup {
            key,
            n_treatment: n_t,
            n_control: n_c,
            ratio,
            status,
        });
    }
    Ok(MatchedWeights { weights, groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    None,
    Imputation,
    Matching,
}

impl CorrectionMethod {
    pub const ALL: [CorrectionMethod; 3] = [
        CorrectionMethod::None,
        CorrectionMethod::Imputation,
        CorrectionMethod::Matching,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionMethod::None => "none",
            CorrectionMethod::Imputation => "imputation",
            CorrectionMethod::Matching => "matching",
        }
    }

    /// Column heading used in the comparison table.
    pub fn title(self) -> &'static str {
        match self {
            CorrectionMethod::None => "Without Correction",
            CorrectionMethod::Imputation => "Imputation",
            CorrectionMethod::Matching => "Matching",
        }
    }
}

impl fmt::Display for CorrectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A corrected user-level effect estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedAte {
    pub method: CorrectionMethod,
    pub test: TestResult,
    /// Seed used by the imputation draws.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub fallbacks: FallbackCounts,
    #[serde(default)]
    pub dropped_groups: Vec<SubgroupKey>,
}

/// Imputes, then runs Welch's t-test over all assigned users.
pub fn corrected_ate_imputation(
    values: &[UserMetricValue],
    covariates: &[UserCovariates],
    seed: u64,
    opts: ImputeOptions,
) -> Result<CorrectedAte> {
    let imp = impute(values, covariates, seed, opts)?;
    let mut t = Vec::new();
    let mut c = Vec::new();
    for (x, cov) in imp.values.iter().zip(covariates) {
        match cov.bucket {
            Bucket::Treatment => t.push(*x),
            Bucket::Control => c.push(*x),
        }
    }
    Ok(CorrectedAte {
        method: CorrectionMethod::Imputation,
        test: stats::welch_t_test(&t, &c)?,
        seed: Some(seed),
        fallbacks: imp.fallbacks,
        dropped_groups: Vec::new(),
    })
}

/// Matches, then runs the weighted t-test over observed users in matched
/// cells.
pub fn corrected_ate_matching(values: &[UserMetricValue], covariates: &[UserCovariates]) -> Result<CorrectedAte> {
    let mw = match_weights(values, covariates)?;
    let (mut t, mut tw, mut c, mut cw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ((v, w), cov) in values.iter().zip(&mw.weights).zip(covariates) {
        if let (Some(x), Some(w)) = (v.value, *w) {
            match cov.bucket {
                Bucket::Treatment => {
                    t.push(x);
                    tw.push(w);
                }
                Bucket::Control => {
                    c.push(x);
                    cw.push(w);
                }
            }
        }
    }
    Ok(CorrectedAte {
        method: CorrectionMethod::Matching,
        test: stats::weighted_t_test(&t, &tw, &c, &cw)?,
        seed: None,
        fallbacks: FallbackCounts::default(),
        dropped_groups: mw.dropped().map(|g| g.key.clone()).collect(),
    })
}
