//! Neural estimation of entropic Gromov-Wasserstein (EGW) alignment costs.
//!
//! For centered clouds the quadratic EGW cost splits into a constant that
//! depends only on the marginals plus a minimization over a correlation
//! matrix `A` of an entropic OT problem with cost
//! `c_A(x, y) = -4|x|^2|y|^2 - 32 x^T A y`. The inner problem is solved by
//! maximizing the semi-dual over a shallow ReLU potential, and the outer
//! problem by an accelerated projected gradient loop over `A`
//! ([`egw::estimate`]). The inner-product variant (IEGW) uses
//! `c_A(x, y) = -8 x^T A y` and needs no centering.
//!
//! Sinkhorn, a 1-D grid search and a Gaussian closed form live in
//! [`eot::sinkhorn`] and [`oracles`] for validation.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod egw;
pub mod eot;
pub mod error;
pub mod experiment;
pub mod net;
pub mod oracles;
pub mod rng;
pub mod samples;

pub use egw::{estimate, EgwResult, EstimateOptions};
pub use eot::{CostKind, CostSpec, Coupling};
pub use error::{Error, Result};
pub use net::{AdamState, MlpGrad, MlpParams, TrainPlan};
pub use samples::{MomentSummary, SampleSet};
