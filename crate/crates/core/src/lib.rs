//! Performance metrics for mobile-app A/B experiments.
//!
//! The crate covers the full analysis path for latency-style metrics:
//!
//! * [`ingest`] loads event logs, assignments and device maps and derives the
//!   per-user covariates (bucket, device class, pre-period engagement).
//! * [`metrics`] builds event-level (pooled quantile) and user-level
//!   (per-user quantile, then averaged) metrics and their treatment effects.
//! * [`srm`] runs the assignment SRM check and the self-selection SRM check,
//!   which compares the share of users that produced the metric at all.
//! * [`correct`] reduces self-selection bias with subgroup random imputation
//!   and exact-matching weights.
//! * [`sim`] is a Monte Carlo harness with known ground truth for evaluating
//!   the estimators.
//! * [`report`] ties everything together into the analyze → SRM check →
//!   correct pipeline used by the command-line tool.

pub mod correct;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod report;
pub mod seed;
pub mod sim;
pub mod srm;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
pub use types::{Bucket, DeviceClass, Engagement, UserId};

pub use correct::{CorrectedAte, CorrectionMethod, ImputedValues, MatchedWeights, SubgroupKey};
pub use ingest::{Assignment, PerfEvent, UserCovariates};
pub use metrics::UserMetricValue;
pub use report::{AnalysisOptions, AnalysisReport};
pub use srm::SrmReport;
pub use stats::{TestMethod, TestResult};
