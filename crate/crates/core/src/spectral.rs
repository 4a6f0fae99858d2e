//! The smoothness operator `L = -alpha * Laplacian + Id` and its smoothing
//! inverse `K = (L^T L)^-1`, both diagonal in the discrete Fourier basis.
//!
//! The Laplacian is the periodic 7-point stencil with unit grid spacing, so
//! the symbol of `L` at frequency `k` is
//!
//! ```text
//! Lhat(k) = 1 + alpha * sum_d (2 - 2 cos(2 pi k_d / n_d))
//! ```
//!
//! and `Khat = Lhat^-2`. Both symbols are real and even, which lets two real
//! components share one complex transform.

use std::any::{Any, TypeId};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_traits::Zero;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{ordered_sum, Dims, VectorField, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorSpec<T> {
    pub alpha: T,
    pub dims: Dims,
}

impl<T: Real> OperatorSpec<T> {
    pub fn new(alpha: T, dims: Dims) -> Result<Self> {
        if !(alpha >= T::zero()) || !alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be a finite non-negative number, got {alpha}"
            )));
        }
        Ok(Self { alpha, dims })
    }
}

/// Per-frequency multipliers of `L` and `K`, in FFT index order.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSymbols<T> {
    pub dims: Dims,
    pub l_hat: Vec<T>,
    pub k_hat: Vec<T>,
}

impl<T: Real> OperatorSymbols<T> {
    #[inline]
    pub fn l_at(&self, k: [usize; 3]) -> T {
        self.l_hat[self.dims.index(k[0], k[1], k[2])]
    }

    #[inline]
    pub fn k_at(&self, k: [usize; 3]) -> T {
        self.k_hat[self.dims.index(k[0], k[1], k[2])]
    }
}

fn axis_eigenvalues<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            T::lit(2.0 - 2.0 * theta.cos())
        })
        .collect()
}

pub fn build_symbols<T: Real>(spec: &OperatorSpec<T>) -> OperatorSymbols<T> {
    let dims = spec.dims;
    let [ex, ey, ez] = [dims.nx, dims.ny, dims.nz].map(axis_eigenvalues::<T>);
    let mut l_hat = Vec::with_capacity(dims.len());
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                l_hat.push(T::one() + spec.alpha * (ex[x] + ey[y] + ez[z]));
            }
        }
    }
    let k_hat = l_hat.iter().map(|&l| (l * l).recip()).collect();
    OperatorSymbols { dims, l_hat, k_hat }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Symbol {
    L,
    K,
}

/// FFT plans and symbol tables for one `(dims, alpha)` pair.
///
/// Shareable between threads; each application allocates its own scratch.
pub struct SpectralOperator<T: Real> {
    spec: OperatorSpec<T>,
    symbols: OperatorSymbols<T>,
    fwd: [Arc<dyn Fft<T>>; 3],
    inv: [Arc<dyn Fft<T>>; 3],
}

impl<T: Real> std::fmt::Debug for SpectralOperator<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralOperator")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

type CacheKey = (TypeId, Dims, u64);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<dyn Any + Send + Sync>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<dyn Any + Send + Sync>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

const CACHE_CAPACITY: usize = 32;

impl<T: Real> SpectralOperator<T> {
    pub fn new(spec: OperatorSpec<T>) -> Result<Self> {
        let spec = OperatorSpec::new(spec.alpha, spec.dims)?;
        let mut planner = FftPlanner::<T>::new();
        let n = spec.dims.as_array();
        Ok(Self {
            symbols: build_symbols(&spec),
            fwd: n.map(|len| planner.plan_fft_forward(len)),
            inv: n.map(|len| planner.plan_fft_inverse(len)),
            spec,
        })
    }

    /// Returns a process-wide shared operator for `spec`, building it on
    /// first use.
    pub fn cached(spec: OperatorSpec<T>) -> Result<Arc<Self>> {
        let key = (
            TypeId::of::<T>(),
            spec.dims,
            spec.alpha.to_f64_lossy().to_bits(),
        );
        if let Some(hit) = cache().lock().expect("operator cache").get(&key) {
            if let Ok(op) = Arc::clone(hit).downcast::<Self>() {
                return Ok(op);
            }
        }
        let op = Arc::new(Self::new(spec)?);
        let mut map = cache().lock().expect("operator cache");
        if map.len() >= CACHE_CAPACITY {
            map.clear();
        }
        map.insert(key, op.clone());
        Ok(op)
    }

    pub fn spec(&self) -> &OperatorSpec<T> {
        &self.spec
    }

    pub fn symbols(&self) -> &OperatorSymbols<T> {
        &self.symbols
    }

    pub fn apply_l(&self, v: &VectorField<T>) -> Result<VectorField<T>> {
        self.apply(v, Symbol::L)
    }

    pub fn apply_k(&self, v: &VectorField<T>) -> Result<VectorField<T>> {
        self.apply(v, Symbol::K)
    }

    /// `lambda * ||L v||^2`, the squared norm being the voxel sum of squared
    /// vector magnitudes.
    ///
    /// For a stationary field the time sum over `N` steps of width `1/N`
    /// equals a single evaluation.
    ///
    /// Evaluated with the periodic stencil in the spatial domain, which has
    /// exactly the symbol above and needs no transform.
    pub fn reg_energy(&self, v: &VectorField<T>, lambda: T) -> Result<T> {
        let dims = self.spec.dims;
        dims.ensure_same(&v.dims())?;
        let alpha = self.spec.alpha;
        let [nx, ny, nz] = dims.as_array();
        let (sy, sz) = (nx, dims.slice_len());
        let six = T::lit(6.0);
        let comps = v.components().each_ref().map(|c| c.data());
        let total = ordered_sum(dims, |i| {
            let [x, y, z] = dims.coords(i);
            let base = i - x - y * sy - z * sz;
            let at = |x: usize, y: usize, z: usize| base + x + y * sy + z * sz;
            let nb = [
                at((x + 1) % nx, y, z),
                at((x + nx - 1) % nx, y, z),
                at(x, (y + 1) % ny, z),
                at(x, (y + ny - 1) % ny, z),
                at(x, y, (z + 1) % nz),
                at(x, y, (z + nz - 1) % nz),
            ];
            comps.iter().fold(T::zero(), |acc, d| {
                let lap = nb.iter().fold(T::zero(), |s, &j| s + d[j]) - six * d[i];
                let l = d[i] - alpha * lap;
                acc + l * l
            })
        });
        Ok(lambda * total)
    }

    fn apply(&self, v: &VectorField<T>, which: Symbol) -> Result<VectorField<T>> {
        self.spec.dims.ensure_same(&v.dims())?;
        let table = match which {
            Symbol::L => &self.symbols.l_hat,
            Symbol::K => &self.symbols.k_hat,
        };
        let [a, b, c] = v.components();
        let (oa, ob) = self.filter_pair(a.data(), Some(b.data()), table);
        let (oc, _) = self.filter_pair(c.data(), None, table);
        let dims = self.spec.dims;
        let wrap = |d: Vec<T>, src: &Volume<T>| {
            Volume::from_vec_unchecked(dims, d).with_spacing(src.spacing())
        };
        VectorField::from_components([wrap(oa, a), wrap(ob, b), wrap(oc, c)])
    }

    /// Filters `re` (and optionally `im`) by a real even symbol using one
    /// complex transform of `re + i * im`.
    fn filter_pair(&self, re: &[T], im: Option<&[T]>, table: &[T]) -> (Vec<T>, Vec<T>) {
        let mut buf: Vec<Complex<T>> = match im {
            Some(im) => re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)).collect(),
            None => re.iter().map(|&r| Complex::new(r, T::zero())).collect(),
        };
        self.transform(&mut buf, &self.fwd);
        buf.par_iter_mut()
            .zip(table.par_iter())
            .for_each(|(c, &s)| *c = *c * s);
        self.transform(&mut buf, &self.inv);
        let scale = T::from_usize_lossy(buf.len()).recip();
        let out_re = buf.iter().map(|c| c.re * scale).collect();
        let out_im = if im.is_some() {
            buf.iter().map(|c| c.im * scale).collect()
        } else {
            Vec::new()
        };
        (out_re, out_im)
    }

    /// Unnormalized 3D transform, one axis at a time.
    fn transform(&self, buf: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>; 3]) {
        let dims = self.spec.dims;
        let [nx, ny, nz] = dims.as_array();
        let slice = dims.slice_len();
        let scratch_len = plans
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        let mut scratch = vec![Complex::zero(); scratch_len];

        // x lines are contiguous
        if nx > 1 {
            plans[0].process_with_scratch(buf, &mut scratch);
        }
        // y lines: transpose each z-slice so y is contiguous
        if ny > 1 {
            let mut tmp = vec![Complex::zero(); slice];
            for z in 0..nz {
                let s = &mut buf[z * slice..(z + 1) * slice];
                for y in 0..ny {
                    for x in 0..nx {
                        tmp[x * ny + y] = s[y * nx + x];
                    }
                }
                plans[1].process_with_scratch(&mut tmp, &mut scratch);
                for y in 0..ny {
                    for x in 0..nx {
                        s[y * nx + x] = tmp[x * ny + y];
                    }
                }
            }
        }
        // z lines: gather with z contiguous
        if nz > 1 {
            let mut tmp = vec![Complex::zero(); buf.len()];
            for z in 0..nz {
                for i in 0..slice {
                    tmp[i * nz + z] = buf[z * slice + i];
                }
            }
            plans[2].process_with_scratch(&mut tmp, &mut scratch);
            for z in 0..nz {
                for i in 0..slice {
                    buf[z * slice + i] = tmp[i * nz + z];
                }
            }
        }
    }
}

/// Voxel sum of squared vector magnitudes (the discrete L2 norm squared).
pub fn squared_norm<T: Real>(v: &VectorField<T>) -> T {
    let [a, b, c] = v.components();
    let (a, b, c) = (a.data(), b.data(), c.data());
    ordered_sum(v.dims(), |i| a[i] * a[i] + b[i] * b[i] + c[i] * c[i])
}

/// Voxel-sum inner product of two vector fields.
pub fn inner<T: Real>(u: &VectorField<T>, w: &VectorField<T>) -> Result<T> {
    u.dims().ensure_same(&w.dims())?;
    let (ua, wa) = (u.components(), w.components());
    Ok((0..3)
        .map(|c| {
            let (x, y) = (ua[c].data(), wa[c].data());
            ordered_sum(u.dims(), |i| x[i] * y[i])
        })
        .fold(T::zero(), |s, t| s + t))
}

pub fn apply_l<T: Real>(v: &VectorField<T>, spec: &OperatorSpec<T>) -> Result<VectorField<T>> {
    SpectralOperator::cached(*spec)?.apply_l(v)
}

pub fn apply_k<T: Real>(v: &VectorField<T>, spec: &OperatorSpec<T>) -> Result<VectorField<T>> {
    SpectralOperator::cached(*spec)?.apply_k(v)
}

pub fn reg_energy<T: Real>(v: &VectorField<T>, spec: &OperatorSpec<T>, lambda: T) -> Result<T> {
    SpectralOperator::cached(*spec)?.reg_energy(v, lambda)
}
