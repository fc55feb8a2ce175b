//! Stochastic semismooth Newton methods for composite problems
//! `min_x f(x) + mu * ||x||_1` where `f` is an average of smooth losses.
//!
//! The crate is organized bottom-up:
//!
//! - [`datakit`]: sparse binary-classification datasets (LIBSVM IO, scaling, synthetic data)
//! - [`model`]: logistic and sigmoid losses, the composite objective
//! - [`prox`]: soft-thresholding, the natural residual, generalized Jacobian masks
//! - [`oracles`]: sub-sampled and variance-reduced gradient/Hessian oracles, sample-size schedules
//! - [`newton`]: the reduced semismooth Newton system and Krylov solvers
//! - [`driver`]: the globalized stochastic Newton loop and its deterministic variant
//! - [`baselines`]: Adagrad and prox-SVRG
//! - [`diagnostics`]: executable checks of the supporting inequalities
//! - [`experiment`]: configuration, reference solutions, CSV output and summaries

// `!(a <= b)` is used on purpose so that NaN fails the test.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod datakit;
pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod newton;
pub mod oracles;
pub mod prox;
pub mod seq;
pub mod trace;

pub use error::{Error, Result};
