//! Correlative information maximization (CorInfoMax) for self-supervised
//! representation learning.
//!
//! The crate is layered bottom-up:
//!
//! - [`linalg`]: dense matrices, Cholesky, log-determinants, Jacobi eigenvalues
//! - [`info`]: log-determinant entropy and mutual information
//! - [`covtrack`]: recursive mean / covariance tracking with a forgetting factor
//! - [`loss`]: the regularized objective and its gradient w.r.t. projector outputs
//! - [`net`]: weight-shared MLP encoder + projector with manual backprop
//! - [`data`]: synthetic blobs, augmentations, flat-file datasets
//! - [`train`]: the pretraining loop and per-epoch metrics
//! - [`eval`]: linear probe and spectrum diagnostics
//! - [`cli`]: config parsing and the command implementations

pub mod cli;
pub mod covtrack;
pub mod data;
pub mod error;
pub mod eval;
pub mod info;
pub mod linalg;
pub mod loss;
pub mod net;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
