//! Dense feed-forward networks with reverse-mode gradients, forward tangents
//! along an input direction, and the Adam optimizer.

mod adam;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Activation, Dense, DenseGrad, ForwardCache, InputGrads, Mlp, MlpFile, MlpGrads};
