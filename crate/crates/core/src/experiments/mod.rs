//! Simulation designs with known ground truth and the replication harness.
//!
//! Synthetic designs cover a binary treatment, a continuous treatment, and six
//! gasoline-demand style designs whose covariates and treatment moments can
//! come from a user-supplied source instead of the built-in uniform draws.

mod dgp;
mod ihdp;
mod replicate;

pub use dgp::{
    bhp_synthetic_mu, bhp_synthetic_sigma2, calibrated_noise_sd, expit, gen_bhp_design, gen_binary_synthetic,
    gen_continuous_synthetic, BhpDesign, BhpSource, Dgp, DgpSpec, Generated, Truth, BHP_COVARIATES, BHP_CUBIC_TERMS,
    BINARY_COVARIATES, CONTINUOUS_COVARIATES, TRUTH_DRAWS, TRUTH_SEED,
};
pub use ihdp::{list_replications, load_ihdp_replication, IhdpReplication};
pub use replicate::{
    run_replications, write_metrics_csv, ExperimentConfig, ExperimentLearner, ExperimentReport, MetricsRow, OracleTag,
    RepEstimate, Replication,
};
