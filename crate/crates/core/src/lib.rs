//! Patch-wise diffeomorphic image registration.
//!
//! A moving image is aligned to a fixed image by estimating, for each
//! patch, a stationary velocity field that minimizes a local-NCC
//! similarity plus the smoothness penalty `||L v||^2` with
//! `L = -alpha * Laplacian + Id`. Descent uses the gradient preconditioned
//! by `K = (L^T L)^-1`. Patch velocities are fused into one field,
//! integrated into a diffeomorphism, and several stages with decreasing
//! `alpha` are composed coarse to fine.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar type for the common cases.

// Negated comparisons are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cascade;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod ncc;
pub mod optimizer;
pub mod patchwork;
pub mod real;
pub mod spectral;
pub mod synth;
pub mod volume;

pub use cascade::{register, register_with_cancel, CascadeConfig, RegistrationResult, StageOverride};
pub use error::{Error, Result};
pub use flow::{compose, integrate, jacobian_determinant, Diffeomorphism, FlowConfig};
pub use metrics::{dice, jacobian_report, warp_labels, DiceReport, EvalReport, JacobianReport, LabelVolume};
pub use ncc::{global_ncc, ncc_gateaux, ncc_value, NccConfig, Region};
pub use optimizer::{OptimConfig, PatchResult, PatchSolver};
pub use patchwork::{classify_background, extract_pair, fuse, plan_grid, PatchGrid};
pub use real::Real;
pub use spectral::{apply_k, apply_l, build_symbols, reg_energy, OperatorSpec, OperatorSymbols, SpectralOperator};
pub use volume::{central_gradient, field_axpy, field_linf, trilinear_sample, warp_volume, Dims, VectorField, Volume};

pub type Volume64 = Volume<f64>;
pub type Volume32 = Volume<f32>;
pub type Field64 = VectorField<f64>;
pub type Field32 = VectorField<f32>;
pub type Diffeo64 = Diffeomorphism<f64>;
pub type Diffeo32 = Diffeomorphism<f32>;
pub type Cascade64 = CascadeConfig<f64>;
pub type Registration64 = RegistrationResult<f64>;
