//! Coarse-to-fine registration over a decreasing smoothness schedule.
//!
//! Stage `k` warps the moving image by the accumulated inverse map,
//! estimates per-patch velocities at `alpha_k`, fuses them, integrates the
//! fused field into `phi_k` and accumulates `total <- phi_k ∘ total`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{compose, integrate, Diffeomorphism, FlowConfig};
use crate::ncc::{global_ncc, NccConfig};
use crate::optimizer::{OptimConfig, PatchResult, PatchSolver};
use crate::patchwork::{classify_background, extract_pair, fuse, plan_grid};
use crate::real::Real;
use crate::spectral::{OperatorSpec, SpectralOperator};
use crate::volume::{warp_volume, VectorField, Volume};

/// Replacement settings for one stage (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct StageOverride<T> {
    pub stage: usize,
    pub optim: Option<OptimConfig<T>>,
    pub flow: Option<FlowConfig>,
    pub ncc: Option<NccConfig<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig<T> {
    /// Strictly decreasing smoothness weights, one per stage.
    pub alphas: Vec<T>,
    pub optim: OptimConfig<T>,
    pub flow: FlowConfig,
    pub ncc: NccConfig<T>,
    pub overrides: Vec<StageOverride<T>>,
    pub patch_size: usize,
    pub core_size: usize,
    /// Patches whose moving and fixed standard deviations are both below
    /// this value keep zero velocity.
    pub background_threshold: T,
}

impl<T: Real> Default for CascadeConfig<T> {
    fn default() -> Self {
        Self {
            alphas: [0.01, 0.005, 0.001].map(T::lit).to_vec(),
            optim: OptimConfig::default(),
            flow: FlowConfig::default(),
            ncc: NccConfig::default(),
            overrides: Vec::new(),
            patch_size: 64,
            core_size: 32,
            background_threshold: T::lit(1e-4),
        }
    }
}

impl<T: Real> CascadeConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::InvalidConfig("at least one alpha is required".into()));
        }
        if self.alphas.iter().any(|a| !(*a > T::zero()) || !a.is_finite()) {
            return Err(Error::InvalidConfig("alphas must be positive".into()));
        }
        if self.alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("alphas must be strictly decreasing".into()));
        }
        if let Some(o) = self.overrides.iter().find(|o| o.stage >= self.alphas.len()) {
            return Err(Error::InvalidConfig(format!(
                "override for stage {} but only {} stages",
                o.stage,
                self.alphas.len()
            )));
        }
        for k in 0..self.alphas.len() {
            let (o, f, n) = self.stage_settings(k);
            o.validate()?;
            f.validate()?;
            n.validate()?;
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.alphas.len()
    }

    /// Effective settings for stage `k`.
    pub fn stage_settings(&self, k: usize) -> (OptimConfig<T>, FlowConfig, NccConfig<T>) {
        let mut out = (self.optim, self.flow, self.ncc);
        for o in self.overrides.iter().filter(|o| o.stage == k) {
            if let Some(v) = o.optim {
                out.0 = v;
            }
            if let Some(v) = o.flow {
                out.1 = v;
            }
            if let Some(v) = o.ncc {
                out.2 = v;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageMetrics {
    pub alpha: f64,
    /// Global NCC of the warped moving image against the fixed image.
    pub ncc_before: f64,
    pub ncc_after: f64,
    /// `||L v||^2` of the fused velocity, with the operator the patches used.
    pub reg: f64,
    pub patches_optimized: usize,
    pub patches_skipped: usize,
    pub total_iters: usize,
    pub runtime_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageResult<T> {
    pub velocity: VectorField<T>,
    pub diffeo: Diffeomorphism<T>,
    pub metrics: StageMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult<T> {
    pub total: Diffeomorphism<T>,
    pub stages: Vec<StageResult<T>>,
}

impl<T: Real> RegistrationResult<T> {
    /// The moving image resampled into the fixed image's space.
    pub fn warp(&self, moving: &Volume<T>) -> Result<Volume<T>> {
        warp_volume(moving, self.total.inverse())
    }
}

fn check_normalized<T: Real>(v: &Volume<T>) -> Result<()> {
    let (lo, hi) = v.min_max();
    if lo < T::lit(-0.01) || hi > T::lit(1.01) {
        return Err(Error::NotNormalized {
            min: lo.to_f64_lossy(),
            max: hi.to_f64_lossy(),
        });
    }
    Ok(())
}

pub fn register<T: Real>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    cfg: &CascadeConfig<T>,
) -> Result<RegistrationResult<T>> {
    register_with_cancel(moving, fixed, cfg, &AtomicBool::new(false))
}

/// `register` that polls `cancel` between patches and returns
/// `Error::Cancelled` without a partial result once it is set.
pub fn register_with_cancel<T: Real>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    cfg: &CascadeConfig<T>,
    cancel: &AtomicBool,
) -> Result<RegistrationResult<T>> {
    cfg.validate()?;
    let dims = moving.dims();
    dims.ensure_same(&fixed.dims())?;
    check_normalized(moving)?;
    check_normalized(fixed)?;
    let grid = plan_grid(dims, cfg.patch_size, cfg.core_size)?;

    let mut total = Diffeomorphism::identity(dims);
    let mut stages = Vec::with_capacity(cfg.stages());
    for (k, &alpha) in cfg.alphas.iter().enumerate() {
        let started = Instant::now();
        let (optim, flow, ncc) = cfg.stage_settings(k);
        let solver = PatchSolver::new(grid.patch_dims(), alpha, optim, flow, ncc)?;
        let warped = warp_volume(moving, total.inverse())?;
        let ncc_before = global_ncc(&warped, fixed)?.to_f64_lossy();

        let results: Vec<(PatchResult<T>, bool)> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                if cancel.load(Ordering::Relaxed) {
                    return Err(Error::Cancelled);
                }
                let (m, f) = extract_pair(&warped, fixed, &grid, i)?;
                if classify_background(&m, &f, cfg.background_threshold) {
                    return Ok((PatchResult::skipped(grid.patch_dims()), false));
                }
                solver
                    .optimize_patch_in(&m, &f, &grid.in_volume_region(i)?)
                    .map(|r| (r, true))
                    .map_err(|e| Error::Patch {
                        stage: k,
                        alpha: alpha.to_f64_lossy(),
                        patch: i,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;
        if cancel.load(Ordering::Relaxed) {
            return Err(Error::Cancelled);
        }

        let optimized = results.iter().filter(|r| r.1).count();
        let total_iters = results.iter().map(|r| r.0.iters_used).sum();
        let patches: Vec<PatchResult<T>> = results.into_iter().map(|r| r.0).collect();
        let velocity = fuse(&patches, &grid)?;
        let diffeo = integrate(&velocity, &flow)?;
        total = compose(&diffeo, &total)?;

        let after = warp_volume(moving, total.inverse())?;
        let reg = SpectralOperator::cached(OperatorSpec::new(solver.operator().spec().alpha, dims)?)?
            .reg_energy(&velocity, T::one())?
            .to_f64_lossy();
        stages.push(StageResult {
            velocity,
            diffeo,
            metrics: StageMetrics {
                alpha: alpha.to_f64_lossy(),
                ncc_before,
                ncc_after: global_ncc(&after, fixed)?.to_f64_lossy(),
                reg,
                patches_optimized: optimized,
                patches_skipped: grid.len() - optimized,
                total_iters,
                runtime_secs: started.elapsed().as_secs_f64(),
            },
        });
    }
    Ok(RegistrationResult { total, stages })
}

/// Min-max rescales intensities to [0, 1]; constant images map to 0.
pub fn normalize_intensity<T: Real>(v: &Volume<T>) -> Volume<T> {
    let (lo, hi) = v.min_max();
    let span = hi - lo;
    let data = v
        .data()
        .iter()
        .map(|&x| if span > T::zero() { (x - lo) / span } else { T::zero() })
        .collect();
    Volume::from_vec_unchecked(v.dims(), data).with_spacing(v.spacing())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn config_validation() {
        let mut c = CascadeConfig::<f64>::default();
        assert!(c.validate().is_ok());
        c.alphas = vec![0.01, 0.01];
        assert!(c.validate().is_err());
        c.alphas = vec![];
        assert!(c.validate().is_err());
        c.alphas = vec![0.01];
        c.overrides.push(StageOverride { stage: 1, optim: None, flow: None, ncc: None });
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_apply_per_stage() {
        let mut c = CascadeConfig::<f64>::default();
        let mut o = c.optim;
        o.max_iters = 7;
        c.overrides.push(StageOverride { stage: 2, optim: Some(o), flow: None, ncc: None });
        assert_eq!(c.stage_settings(0).0.max_iters, 100);
        assert_eq!(c.stage_settings(2).0.max_iters, 7);
    }

    #[test]
    fn rejects_unnormalized_and_mismatched() {
        let d = Dims::cube(32).unwrap();
        let m = Volume::filled(d, 2.0);
        let f = Volume::filled(d, 0.5);
        assert!(matches!(
            register(&m, &f, &CascadeConfig::default()),
            Err(Error::NotNormalized { .. })
        ));
        let g = Volume::filled(Dims::cube(16).unwrap(), 0.5);
        assert!(register(&f, &g, &CascadeConfig::default()).is_err());
    }

    #[test]
    fn background_only_volume_is_identity() {
        let d = Dims::cube(32).unwrap();
        let f = Volume::filled(d, 0.0);
        let r = register(&f, &f, &CascadeConfig::default()).unwrap();
        assert_eq!(r.total, Diffeomorphism::identity(d));
        assert!(r.stages.iter().all(|s| s.metrics.patches_skipped == 1));
    }

    #[test]
    fn cancellation_returns_no_result() {
        let d = Dims::cube(32).unwrap();
        let f = Volume::filled(d, 0.0);
        let cancel = AtomicBool::new(true);
        assert!(matches!(
            register_with_cancel(&f, &f, &CascadeConfig::default(), &cancel),
            Err(Error::Cancelled)
        ));
    }

    #[test]
    fn normalize_maps_to_unit_interval() {
        let d = Dims::cube(3).unwrap();
        let v = Volume::from_fn(d, |x, y, _| (x * 3 + y) as f64 * 10.0 - 5.0).unwrap();
        let n = normalize_intensity(&v);
        assert_eq!(n.min_max(), (0.0, 1.0));
        assert_eq!(normalize_intensity(&Volume::filled(d, 3.0)).min_max(), (0.0, 0.0));
    }
}
