//! Tiny recursive control: a compact weight-shared refinement network for
//! trajectory optimization, together with the differentiable simulation,
//! classical solvers, and training machinery it needs.
//!
//! The crate is organized around the pipeline:
//!
//! - [`autodiff`]: reverse-mode automatic differentiation over dense tensors.
//! - [`dynamics`]: differentiable system models (Van der Pol, powered
//!   descent), RK4 rollouts, and trajectory costs.
//! - [`oracle`]: direct-shooting trajectory optimization used to generate
//!   supervised datasets, plus a Riccati LQR verification oracle.
//! - [`model`]: the two-level recursive refinement network.
//! - [`train`]: process-supervised training loop and evaluation.
//! - [`io`]: dataset / checkpoint / report file formats and analysis exports.

pub mod autodiff;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod model;
pub mod oracle;
pub mod train;

pub use error::{Result, TrcError};
