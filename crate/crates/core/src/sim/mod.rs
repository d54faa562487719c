//! Monte Carlo harness with known ground truth.
//!
//! A scenario draws a synthetic population, injects a treatment effect per
//! device class, masks users according to a logistic missingness model in
//! bucket, device and engagement, and then compares the naive user-level
//! estimate with the imputation and matching corrections.

mod config;
mod divergence;
mod population;
mod scenario;

pub use config::{Alphas, DeviceProfile, DivergenceConfig, ScenarioConfig, SimConfigFile, SweepConfig};
pub use divergence::{divergence_population, divergence_scenario, DivergenceRepeat, DivergenceReport};
pub use population::{
    apply_missingness, calibrate_alpha1, gen_population, inject_treatment, CellProfile, Injection, Population,
    ProfileCell, SyntheticUser,
};
pub use scenario::{
    run_scenario, run_sweep, write_sweep_csv, Iteration, MethodSummary, ScenarioResult, Truth, SWEEP_COLUMNS,
};
