//! Deep Gaussian networks at finite width, their infinite-width Gaussian
//! process limit, and the diagnostics that connect the two.
//!
//! * [`kernel`]: the layerwise covariance recursion `Σ(1), …, Σ(L)`.
//! * [`netsim`]: finite-width network sampling and Lipschitz witnesses.
//! * [`gplimit`]: sampling the limiting process and Hölder exponents.
//! * [`diagnostics`]: two-sample, moment and rate statistics.
//! * [`config`]: experiment config files.
//! * [`harness`]: orchestration, reports and artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod gplimit;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod netsim;
pub mod quadrature;
pub mod rng;

pub use activation::{Activation, ActivationKind, ActivationTable, Envelope};
pub use error::{NngpError, Result};
pub use exec::Exec;
pub use kernel::{CovMatrix, InputSet, NetworkParams};
pub use quadrature::QuadratureSpec;
