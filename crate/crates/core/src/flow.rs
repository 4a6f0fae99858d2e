//! Integration of stationary velocity fields into diffeomorphisms.
//!
//! The flow `d phi / dt = v(phi)`, `phi(0) = id`, is integrated along the
//! characteristics through every voxel centre. Each of the `N` steps of
//! width `dt = 1/N` solves for the midpoint `m = y + (dt/2) v(m)` by
//! fixed-point iteration, then advances `y <- y + dt v(m)`. Velocities are
//! sampled trilinearly with clamping. The inverse map is the flow of `-v`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{central_gradient, par_fill_indexed, Dims, Lattice, VectorField, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowConfig {
    /// Number of integration steps over unit time.
    pub steps: usize,
    /// Fixed-point refinements of each midpoint.
    pub departure_iters: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            departure_iters: 2,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("flow steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Forward and inverse maps stored as displacements:
/// `phi(x) = x + forward(x)`, `phi^-1(x) = x + inverse(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Diffeomorphism<T> {
    forward: VectorField<T>,
    inverse: VectorField<T>,
}

impl<T: Real> Diffeomorphism<T> {
    pub fn identity(dims: Dims) -> Self {
        Self {
            forward: VectorField::zeros(dims),
            inverse: VectorField::zeros(dims),
        }
    }

    pub fn from_displacements(forward: VectorField<T>, inverse: VectorField<T>) -> Result<Self> {
        forward.dims().ensure_same(&inverse.dims())?;
        Ok(Self { forward, inverse })
    }

    pub fn dims(&self) -> Dims {
        self.forward.dims()
    }

    pub fn forward(&self) -> &VectorField<T> {
        &self.forward
    }

    pub fn inverse(&self) -> &VectorField<T> {
        &self.inverse
    }

    pub fn into_parts(self) -> (VectorField<T>, VectorField<T>) {
        (self.forward, self.inverse)
    }

    /// Evaluates `phi(p)` at an arbitrary point.
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let u = self.forward.sample(p);
        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
    }

    pub fn apply_inverse(&self, p: [T; 3]) -> [T; 3] {
        let u = self.inverse.sample(p);
        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
    }

    /// Largest `|phi(phi^-1(x)) - x|` over voxels at least `margin` voxels
    /// from the border.
    pub fn inverse_residual(&self, margin: usize) -> T {
        let dims = self.dims();
        (0..dims.len())
            .filter(|&i| dims.is_interior(dims.coords(i), margin))
            .map(|i| {
                let x = dims.coords(i).map(T::from_usize_lossy);
                let y = self.apply(self.apply_inverse(x));
                let d = [y[0] - x[0], y[1] - x[1], y[2] - x[2]];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(T::zero(), |m, r| m.max(r))
    }

    /// Fails unless `inverse_residual(margin) <= tol`.
    pub fn check_inverse(&self, margin: usize, tol: T) -> Result<T> {
        let r = self.inverse_residual(margin);
        if r <= tol {
            Ok(r)
        } else {
            Err(Error::InvalidConfig(format!(
                "forward/inverse residual {r} exceeds tolerance {tol}"
            )))
        }
    }
}

fn ensure_finite<T: Real>(v: &VectorField<T>) -> Result<()> {
    for (c, comp) in v.components().iter().enumerate() {
        if let Some(i) = comp.data().iter().position(|x| !x.is_finite()) {
            let [x, y, z] = v.dims().coords(i);
            return Err(Error::NonFinite(format!(
                "velocity component {c} at ({x}, {y}, {z})"
            )));
        }
    }
    Ok(())
}

const LANES: usize = 8;

/// Flow of `sign * v` over unit time, returned as a displacement field.
pub fn integrate_displacement<T: Real>(
    v: &VectorField<T>,
    sign: T,
    cfg: &FlowConfig,
) -> Result<VectorField<T>> {
    cfg.validate()?;
    ensure_finite(v)?;
    let dims = v.dims();
    let packed = v.to_interleaved();
    let dt = sign / T::from_usize_lossy(cfg.steps);
    let half = dt * T::lit(0.5);
    let grid = Lattice::new(dims);
    let mut out = vec![[T::zero(); 3]; dims.len()];
    // Each characteristic is a long chain of dependent samples, so several
    // voxels of a row are traced in lockstep to give the CPU independent
    // work. Per-voxel arithmetic is unchanged.
    out.par_chunks_mut(dims.nx).enumerate().for_each(|(row, dst)| {
        let (y, z) = (row % dims.ny, row / dims.ny);
        let (yf, zf) = (T::from_usize_lossy(y), T::from_usize_lossy(z));
        for (chunk, x0) in dst.chunks_mut(LANES).zip((0..dims.nx).step_by(LANES)) {
            let lanes = chunk.len();
            let mut p = [[T::zero(); 3]; LANES];
            for (l, pl) in p.iter_mut().enumerate().take(lanes) {
                *pl = [T::from_usize_lossy(x0 + l), yf, zf];
            }
            let start = p;
            let mut m = p;
            for _ in 0..cfg.steps {
                for l in 0..lanes {
                    let v0 = grid.stencil(p[l]).apply3(&packed);
                    m[l] = [0, 1, 2].map(|a| p[l][a] + half * v0[a]);
                }
                for _ in 0..cfg.departure_iters {
                    for l in 0..lanes {
                        let vm = grid.stencil(m[l]).apply3(&packed);
                        m[l] = [0, 1, 2].map(|a| p[l][a] + half * vm[a]);
                    }
                }
                for l in 0..lanes {
                    let vm = grid.stencil(m[l]).apply3(&packed);
                    p[l] = [0, 1, 2].map(|a| p[l][a] + dt * vm[a]);
                }
            }
            for (l, d) in chunk.iter_mut().enumerate() {
                *d = [0, 1, 2].map(|a| p[l][a] - start[l][a]);
            }
        }
    });
    VectorField::from_interleaved(dims, &out)
}

/// Integrates the stationary field `v` into a forward/inverse pair.
pub fn integrate<T: Real>(v: &VectorField<T>, cfg: &FlowConfig) -> Result<Diffeomorphism<T>> {
    let forward = integrate_displacement(v, T::one(), cfg)?;
    let inverse = integrate_displacement(v, -T::one(), cfg)?;
    Ok(Diffeomorphism { forward, inverse })
}

/// Displacement of `outer(inner(x))`: `u_in(x) + u_out(x + u_in(x))`.
fn compose_displacements<T: Real>(
    outer: &VectorField<T>,
    inner: &VectorField<T>,
) -> Result<VectorField<T>> {
    let dims = inner.dims();
    let packed_outer = outer.to_interleaved();
    let grid = Lattice::new(dims);
    let out: Vec<[T; 3]> = par_fill_indexed(dims, |i, x, y, z| {
        let ui = inner.at(i);
        let q = [
            T::from_usize_lossy(x) + ui[0],
            T::from_usize_lossy(y) + ui[1],
            T::from_usize_lossy(z) + ui[2],
        ];
        let uo = grid.stencil(q).apply3(&packed_outer);
        [ui[0] + uo[0], ui[1] + uo[1], ui[2] + uo[2]]
    });
    VectorField::from_interleaved(dims, &out)
}

/// `outer ∘ inner`: `inner` is applied first. The inverse is
/// `inner^-1 ∘ outer^-1`.
pub fn compose<T: Real>(
    outer: &Diffeomorphism<T>,
    inner: &Diffeomorphism<T>,
) -> Result<Diffeomorphism<T>> {
    outer.dims().ensure_same(&inner.dims())?;
    Ok(Diffeomorphism {
        forward: compose_displacements(&outer.forward, &inner.forward)?,
        inverse: compose_displacements(&inner.inverse, &outer.inverse)?,
    })
}

/// `det(I + grad u)` per voxel, central differences inside and one-sided
/// differences on the faces.
pub fn jacobian_determinant<T: Real>(disp: &VectorField<T>) -> Result<Volume<T>> {
    let g: Vec<VectorField<T>> = disp
        .components()
        .par_iter()
        .map(central_gradient)
        .collect::<Result<_>>()?;
    let dims = disp.dims();
    let one = T::one();
    let data = par_fill_indexed(dims, |i, _, _, _| {
        // m[r][c] = d u_r / d x_c
        let m: [[T; 3]; 3] = [0, 1, 2].map(|r| g[r].at(i));
        let a = [
            [one + m[0][0], m[0][1], m[0][2]],
            [m[1][0], one + m[1][1], m[1][2]],
            [m[2][0], m[2][1], one + m[2][2]],
        ];
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    });
    Volume::from_vec(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::field_linf;

    fn d(n: usize) -> Dims {
        Dims::cube(n).unwrap()
    }

    #[test]
    fn zero_velocity_gives_identity() {
        let phi = integrate(&VectorField::<f64>::zeros(d(6)), &FlowConfig::default()).unwrap();
        assert_eq!(phi, Diffeomorphism::identity(d(6)));
    }

    #[test]
    fn constant_velocity_is_exact() {
        let c = [0.7f64, -1.3, 0.25];
        let phi = integrate(&VectorField::constant(d(10), c), &FlowConfig::default()).unwrap();
        for i in 0..d(10).len() {
            let (f, b) = (phi.forward().at(i), phi.inverse().at(i));
            for a in 0..3 {
                assert!((f[a] - c[a]).abs() < 1e-9);
                assert!((b[a] + c[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_non_finite_velocity() {
        let mut v = VectorField::<f64>::zeros(d(4));
        v.components_mut()[2].data_mut()[7] = f64::INFINITY;
        assert!(matches!(
            integrate(&v, &FlowConfig::default()),
            Err(Error::NonFinite(_))
        ));
        let bad = FlowConfig { steps: 0, departure_iters: 2 };
        assert!(integrate(&VectorField::<f64>::zeros(d(4)), &bad).is_err());
    }

    #[test]
    fn compose_identity_and_translations() {
        let dims = d(12);
        let a = integrate(&VectorField::constant(dims, [1.0, 0.0, 0.0]), &FlowConfig::default()).unwrap();
        let b = integrate(&VectorField::constant(dims, [2.0, 0.0, 0.0]), &FlowConfig::default()).unwrap();
        let id = Diffeomorphism::identity(dims);
        assert_eq!(compose(&id, &a).unwrap(), a);
        assert_eq!(compose(&a, &id).unwrap(), a);
        let ab = compose(&b, &a).unwrap();
        for z in 3..9 {
            for y in 3..9 {
                for x in 3..6 {
                    let f: [f64; 3] = ab.forward().get(x, y, z);
                    assert!((f[0] - 3.0).abs() < 1e-9 && f[1].abs() < 1e-12);
                }
            }
        }
        let bad = Diffeomorphism::identity(d(5));
        assert!(compose(&bad, &a).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let dims = d(8);
        let j0 = jacobian_determinant(&VectorField::<f64>::zeros(dims)).unwrap();
        assert!(j0.data().iter().all(|&v| v == 1.0));

        let scale = VectorField::from_fn(dims, |x, y, z| [x as f64, y as f64, z as f64]).unwrap();
        let j = jacobian_determinant(&scale).unwrap();
        assert!(j.data().iter().all(|&v| (v - 8.0).abs() < 1e-12));

        let shear = VectorField::from_fn(dims, |_, y, _| [0.3 * y as f64, 0.0, 0.0]).unwrap();
        let j = jacobian_determinant(&shear).unwrap();
        assert!(j.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        assert!(jacobian_determinant(&VectorField::<f64>::zeros(Dims::new(1, 4, 4).unwrap())).is_err());
    }

    #[test]
    fn inverse_residual_of_shift() {
        let phi = integrate(&VectorField::constant(d(16), [1.0, 0.5, 0.0]), &FlowConfig::default()).unwrap();
        assert!(phi.check_inverse(3, 1e-9).is_ok());
        assert!(field_linf(phi.forward()) > 1.0);
    }
}
