//! Debiased estimation of average linear moment functionals of regression
//! functions, with Riesz representers learned by direct loss minimization.

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod folds;
pub mod forest;
pub mod learners;
pub mod linalg;
pub mod moments;
pub mod neural;
pub mod riesznet;
pub mod rng;

pub use dataset::{Dataset, Schema, TreatmentKind};
pub use error::{Error, Result};
pub use folds::{FoldAssignment, FoldScheme};
pub use moments::{FunctionOracle, MomentFunctional, MomentKind};
pub use rng::RngSeed;
