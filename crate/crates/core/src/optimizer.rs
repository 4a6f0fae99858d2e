//! Per-patch estimation of a stationary velocity field.
//!
//! The patch is treated as the unit cube: a patch with `V = s^3` voxels has
//! voxel volume `1/V`, and the smoothness weight `alpha` refers to that unit
//! domain. In voxel units the operator therefore uses `alpha * s^2`, and the
//! L2 gradient of the mean NCC is its per-voxel partial derivative scaled by
//! `V`. With that convention the descent direction
//!
//! ```text
//! grad(v) = -V/(2 sigma^2) K( dsim/dJ * grad J ) + v,   J = M ∘ phi^-1
//! ```
//!
//! is the K-preconditioned gradient of
//!
//! ```text
//! loss(v) = -ncc(J, F) + lambda * ||L v||^2,   lambda = sigma^2 / V
//! ```
//!
//! where `||L v||^2` is the voxel sum. The similarity force is evaluated at
//! the end of the flow.

use crate::error::{Error, Result};
use crate::flow::{integrate_displacement, FlowConfig};
use crate::ncc::{ncc_value_and_gateaux_in, NccConfig, Region};
use crate::real::Real;
use crate::spectral::{OperatorSpec, SpectralOperator};
use crate::volume::{central_gradient, field_axpy, field_linf, warp_volume, Dims, VectorField, Volume};

use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig<T> {
    /// Noise scale of the similarity term.
    pub sigma: T,
    /// Weight of `||L v||^2` in the reported loss. `None` uses `sigma^2 / V`,
    /// the weight under which the descent direction is the preconditioned
    /// gradient of the loss.
    pub lambda: Option<T>,
    /// Step `eps` in `v <- v - eps * grad`. `None` derives it from `sigma`,
    /// `alpha` and the NCC window, see [`PatchSolver::step_size`].
    pub step_size: Option<T>,
    pub max_iters: usize,
    pub rel_tol: T,
    /// Largest allowed velocity magnitude, in voxels.
    pub velocity_cap: T,
}

impl<T: Real> Default for OptimConfig<T> {
    fn default() -> Self {
        Self {
            sigma: T::lit(1e-3),
            lambda: None,
            step_size: None,
            max_iters: 100,
            rel_tol: T::lit(1e-4),
            velocity_cap: T::lit(3.0),
        }
    }
}

/// Multiplier on `2 sigma^2 * Lhat_w` in the default step, where `Lhat_w` is
/// the operator symbol at the NCC window's wavelength along one axis.
pub const STEP_SCALE: f64 = 0.75;

/// Search stops once backtracking has shrunk the step below this fraction of
/// its initial value.
pub const MIN_STEP_FRACTION: f64 = 1.0 / 1024.0;

impl<T: Real> OptimConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        pos("sigma", self.sigma)?;
        pos("velocity_cap", self.velocity_cap)?;
        if let Some(step) = self.step_size {
            pos("step_size", step)?;
        }
        if let Some(lambda) = self.lambda {
            if !(lambda >= T::zero()) || !lambda.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "lambda must be non-negative, got {lambda}"
                )));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol >= T::zero() && self.rel_tol < T::one()) {
            return Err(Error::InvalidConfig(format!(
                "rel_tol must lie in [0, 1), got {}",
                self.rel_tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub loss: T,
    pub sim: T,
    pub reg: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchResult<T> {
    pub velocity: VectorField<T>,
    pub final_loss: T,
    pub final_sim: T,
    pub final_reg: T,
    pub iters_used: usize,
    pub converged: bool,
}

impl<T: Real> PatchResult<T> {
    /// Result for a patch that is not optimized (zero velocity).
    pub fn skipped(dims: Dims) -> Self {
        Self {
            velocity: VectorField::zeros(dims),
            final_loss: T::zero(),
            final_sim: T::zero(),
            final_reg: T::zero(),
            iters_used: 0,
            converged: true,
        }
    }
}

/// Everything needed to evaluate and minimize the patch objective for one
/// patch size and smoothness `alpha`.
#[derive(Clone, Debug)]
pub struct PatchSolver<T: Real> {
    op: Arc<SpectralOperator<T>>,
    alpha: T,
    lambda: T,
    step: T,
    force_weight: T,
    pub optim: OptimConfig<T>,
    pub flow: FlowConfig,
    pub ncc: NccConfig<T>,
}

struct Evaluation<T> {
    terms: LossTerms<T>,
    gradient: Option<VectorField<T>>,
}

/// Edge length of a cube with the same voxel count as `dims`.
fn patch_side<T: Real>(dims: Dims) -> T {
    T::from_usize_lossy(dims.len()).cbrt()
}

/// `alpha` on the unit patch expressed in voxel units.
pub fn alpha_in_voxels<T: Real>(alpha: T, patch_dims: Dims) -> T {
    let s: T = patch_side(patch_dims);
    alpha * s * s
}

impl<T: Real> PatchSolver<T> {
    pub fn new(
        patch_dims: Dims,
        alpha: T,
        optim: OptimConfig<T>,
        flow: FlowConfig,
        ncc: NccConfig<T>,
    ) -> Result<Self> {
        optim.validate()?;
        flow.validate()?;
        ncc.validate()?;
        let alpha_vox = alpha_in_voxels(alpha, patch_dims);
        let op = SpectralOperator::cached(OperatorSpec::new(alpha_vox, patch_dims)?)?;
        let two_sigma2 = T::lit(2.0) * optim.sigma * optim.sigma;
        let volume = T::from_usize_lossy(patch_dims.len());
        let lambda = optim.lambda.unwrap_or(optim.sigma * optim.sigma / volume);
        let step = optim.step_size.unwrap_or_else(|| {
            let w = T::from_usize_lossy(ncc.window);
            let lhat_w = T::one() + alpha_vox * (T::lit(2.0) - T::lit(2.0) * (T::TAU() / w).cos());
            T::lit(STEP_SCALE) * two_sigma2 * lhat_w
        });
        Ok(Self {
            op,
            alpha,
            lambda,
            step,
            force_weight: -(volume / two_sigma2),
            optim,
            flow,
            ncc,
        })
    }

    pub fn patch_dims(&self) -> Dims {
        self.op.spec().dims
    }

    /// Smoothness weight on the unit patch, as passed to `new`.
    pub fn alpha(&self) -> T {
        self.alpha
    }

    /// The operator in voxel units (`alpha * s^2`).
    pub fn operator(&self) -> &SpectralOperator<T> {
        &self.op
    }

    /// Effective weight of `||L v||^2` in the loss.
    pub fn lambda(&self) -> T {
        self.lambda
    }

    /// Effective gradient step. By default
    /// `STEP_SCALE * 2 sigma^2 * (1 + alpha_vox (2 - 2 cos(2 pi / window)))`:
    /// smoother operators damp the stiff high-frequency modes more and
    /// tolerate a longer step.
    pub fn step_size(&self) -> T {
        self.step
    }

    fn check(&self, m: &Volume<T>, f: &Volume<T>, v: &VectorField<T>) -> Result<()> {
        let d = self.patch_dims();
        d.ensure_same(&m.dims())?;
        d.ensure_same(&f.dims())?;
        d.ensure_same(&v.dims())
    }

    /// The moving patch pulled back through `phi^-1`.
    pub fn warped(&self, m: &Volume<T>, v: &VectorField<T>) -> Result<Volume<T>> {
        let inv = integrate_displacement(v, -T::one(), &self.flow)?;
        warp_volume(m, &inv)
    }

    fn evaluate(
        &self,
        m: &Volume<T>,
        f: &Volume<T>,
        v: &VectorField<T>,
        region: &Region,
        with_gradient: bool,
    ) -> Result<Evaluation<T>> {
        self.check(m, f, v)?;
        let j = self.warped(m, v)?;
        let (ncc, dsim) = ncc_value_and_gateaux_in(&j, f, &self.ncc, region)?;
        let sim = -ncc;
        let reg = self.op.reg_energy(v, T::one())?;
        let terms = LossTerms {
            loss: sim + self.lambda * reg,
            sim,
            reg,
        };
        let gradient = if with_gradient {
            let force = similarity_force(&j, &dsim)?;
            let smoothed = self.op.apply_k(&force)?;
            Some(field_axpy(self.force_weight, &smoothed, v)?)
        } else {
            None
        };
        Ok(Evaluation { terms, gradient })
    }

    /// `(loss, sim, reg)` with `reg = ||L v||^2` (unweighted voxel sum).
    pub fn patch_loss(&self, m: &Volume<T>, f: &Volume<T>, v: &VectorField<T>) -> Result<LossTerms<T>> {
        Ok(self.evaluate(m, f, v, &Region::full(self.patch_dims()), false)?.terms)
    }

    pub fn patch_gradient(&self, m: &Volume<T>, f: &Volume<T>, v: &VectorField<T>) -> Result<VectorField<T>> {
        Ok(self
            .evaluate(m, f, v, &Region::full(self.patch_dims()), true)?
            .gradient
            .expect("gradient requested"))
    }

    /// Monotone gradient descent from `v = 0`.
    ///
    /// A trial step that raises the loss is rejected and the step halved. A
    /// trial that lowers it by less than `rel_tol` (relative) ends the search
    /// without being taken, so `M == F` returns exactly zero velocity. Every
    /// trial counts towards `max_iters`.
    pub fn optimize_patch(&self, m: &Volume<T>, f: &Volume<T>) -> Result<PatchResult<T>> {
        self.optimize_patch_in(m, f, &Region::full(self.patch_dims()))
    }

    /// `optimize_patch` with the similarity averaged over window centres in
    /// `region` only, e.g. the part of a padded patch inside the volume.
    pub fn optimize_patch_in(&self, m: &Volume<T>, f: &Volume<T>, region: &Region) -> Result<PatchResult<T>> {
        self.patch_dims().ensure_same(&region.dims)?;
        let o = &self.optim;
        let min_step = self.step * T::lit(MIN_STEP_FRACTION);
        let mut step = self.step;
        let mut v = VectorField::zeros(self.patch_dims());
        let at_start = |e: Error| if e.is_numerical() { Error::NonFiniteLoss { iteration: 0 } } else { e };
        let mut eval = self.evaluate(m, f, &v, region, true).map_err(at_start)?;
        if !eval.terms.loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0 });
        }
        let mut converged = false;
        let mut iters = 0;
        while iters < o.max_iters && step >= min_step {
            iters += 1;
            let g = eval.gradient.as_ref().expect("gradient requested");
            let mut trial =
                field_axpy(-step, g, &v).map_err(|_| Error::NonFiniteLoss { iteration: iters })?;
            let norm = field_linf(&trial);
            if norm > o.velocity_cap {
                trial = trial.scale(o.velocity_cap / norm);
            }
            let next = self.evaluate(m, f, &trial, region, true)?;
            let (prev, loss) = (eval.terms.loss, next.terms.loss);
            if !(loss <= prev) {
                // Also catches a non-finite trial loss.
                step = step * T::lit(0.5);
                continue;
            }
            if prev - loss <= o.rel_tol * prev.abs() {
                converged = true;
                break;
            }
            v = trial;
            eval = next;
        }
        let terms = eval.terms;
        Ok(PatchResult {
            velocity: v,
            final_loss: terms.loss,
            final_sim: terms.sim,
            final_reg: terms.reg,
            iters_used: iters,
            converged,
        })
    }
}

/// Pointwise `dsim/dJ * grad J`.
pub fn similarity_force<T: Real>(j: &Volume<T>, dsim: &Volume<T>) -> Result<VectorField<T>> {
    let gj = central_gradient(j)?;
    let d = dsim.data();
    let comps = gj.into_components().map(|c| {
        let data = c.data().iter().zip(d).map(|(&g, &s)| g * s).collect();
        Volume::from_vec_unchecked(c.dims(), data)
    });
    VectorField::from_components(comps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solver(n: usize, alpha: f64) -> PatchSolver<f64> {
        PatchSolver::new(
            Dims::cube(n).unwrap(),
            alpha,
            OptimConfig::default(),
            FlowConfig::default(),
            NccConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn derived_defaults() {
        let s = solver(16, 0.01);
        assert!((s.lambda() - 1e-6 / 4096.0).abs() < 1e-20);
        assert!((s.operator().spec().alpha - 2.56).abs() < 1e-12);
        let lw = 1.0 + 2.56 * (2.0 - 2.0 * (std::f64::consts::TAU / 7.0).cos());
        assert!((s.step_size() - STEP_SCALE * 2e-6 * lw).abs() < 1e-18);

        let o = OptimConfig { lambda: Some(0.5), step_size: Some(0.1), ..OptimConfig::default() };
        let s = PatchSolver::new(Dims::cube(8).unwrap(), 0.01, o, FlowConfig::default(), NccConfig::default()).unwrap();
        assert_eq!((s.lambda(), s.step_size()), (0.5, 0.1));
    }

    #[test]
    fn config_validation() {
        let ok = OptimConfig::<f64>::default();
        assert!(ok.validate().is_ok());
        for bad in [
            OptimConfig { sigma: 0.0, ..ok },
            OptimConfig { lambda: Some(-1.0), ..ok },
            OptimConfig { step_size: Some(0.0), ..ok },
            OptimConfig { max_iters: 0, ..ok },
            OptimConfig { rel_tol: 1.0, ..ok },
            OptimConfig { velocity_cap: f64::NAN, ..ok },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn rejects_mismatched_patch() {
        let s = solver(8, 0.01);
        let a = Volume::filled(Dims::cube(8).unwrap(), 0.5);
        let b = Volume::filled(Dims::cube(9).unwrap(), 0.5);
        assert!(s.optimize_patch(&a, &b).is_err());
        assert!(s.patch_loss(&a, &a, &VectorField::zeros(Dims::cube(9).unwrap())).is_err());
    }

    #[test]
    fn skipped_result_is_zero() {
        let r = PatchResult::<f64>::skipped(Dims::cube(4).unwrap());
        assert_eq!(field_linf(&r.velocity), 0.0);
        assert!(r.converged);
    }
}
