//! 3D grids, trilinear resampling and finite differences.
//!
//! Storage is row-major with x fastest: `index = x + nx * (y + ny * z)`.
//! Coordinates and displacements are expressed in voxel units; `spacing`
//! is carried as metadata only.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Voxel counts along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidDims(format!(
                "{nx}x{ny}x{nz} has an empty axis"
            )));
        }
        nx.checked_mul(ny)
            .and_then(|p| p.checked_mul(nz))
            .ok_or_else(|| Error::InvalidDims(format!("{nx}x{ny}x{nz} overflows")))?;
        Ok(Self { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Always false: a valid `Dims` has at least one voxel.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.nx;
        let r = i / self.nx;
        [x, r % self.ny, r / self.ny]
    }

    #[inline]
    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    /// True when `[x, y, z]` is at least `margin` voxels away from every face.
    #[inline]
    pub fn is_interior(&self, c: [usize; 3], margin: usize) -> bool {
        self.as_array()
            .iter()
            .zip(c)
            .all(|(&n, ci)| ci >= margin && ci + margin < n)
    }

    pub(crate) fn ensure_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimensionMismatch {
                expected: *self,
                found: *other,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// A scalar image on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    spacing: [T; 3],
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    /// Wraps `data`, rejecting length mismatches and non-finite values.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let [x, y, z] = dims.coords(i);
            return Err(Error::NonFinite(format!("volume voxel ({x}, {y}, {z})")));
        }
        Ok(Self::from_vec_unchecked(dims, data))
    }

    pub(crate) fn from_vec_unchecked(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self {
            dims,
            spacing: [T::one(); 3],
            data,
        }
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self::from_vec_unchecked(dims, vec![value; dims.len()])
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> T + Sync) -> Result<Self> {
        let data = par_fill(dims, f);
        Self::from_vec(dims, data)
    }

    pub fn with_spacing(mut self, spacing: [T; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn spacing(&self) -> [T; 3] {
        self.spacing
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Trilinear interpolation at voxel coordinate `p`, clamped to the grid.
    #[inline]
    pub fn sample(&self, p: [T; 3]) -> T {
        Stencil::new(self.dims, p).apply(&self.data)
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Converts the scalar type, e.g. `f32` file data to `f64` working data.
    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing.map(|s| U::lit(s.to_f64_lossy())),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Trilinear weights for one sample point.
///
/// Computing the stencil once and applying it to several channels is how
/// vector fields are sampled.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<T> {
    base: usize,
    step: [usize; 3],
    frac: [T; 3],
}

/// Per-grid constants for building stencils in tight loops.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lattice<T> {
    hi: [T; 3],
    last_cell: [usize; 3],
    step: [usize; 3],
}

impl<T: Real> Lattice<T> {
    pub(crate) fn new(dims: Dims) -> Self {
        let n = dims.as_array();
        let stride = [1, dims.nx, dims.nx * dims.ny];
        // Axes of length 1 get a zero step so both taps read the same voxel.
        let active = n.map(|len| len >= 2);
        Self {
            hi: [0, 1, 2].map(|a| T::from_usize_lossy(n[a] - 1)),
            last_cell: [0, 1, 2].map(|a| if active[a] { n[a] - 2 } else { 0 }),
            step: [0, 1, 2].map(|a| if active[a] { stride[a] } else { 0 }),
        }
    }

    #[inline]
    pub(crate) fn stencil(&self, p: [T; 3]) -> Stencil<T> {
        let mut base = 0;
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let c = p[a].max(T::zero()).min(self.hi[a]);
            // c >= 0, so truncation is floor; the upper cell is used on the
            // last face so that i0 + 1 stays in range.
            let i0 = (c.to_f64_lossy() as usize).min(self.last_cell[a]);
            frac[a] = c - T::from_usize_lossy(i0);
            base += i0 * self.step[a];
        }
        Stencil {
            base,
            step: self.step,
            frac,
        }
    }
}

impl<T: Real> Stencil<T> {
    #[inline]
    pub(crate) fn new(dims: Dims, p: [T; 3]) -> Self {
        Lattice::new(dims).stencil(p)
    }

    #[inline]
    pub(crate) fn apply(&self, data: &[T]) -> T {
        let [sx, sy, sz] = self.step;
        let [fx, fy, fz] = self.frac;
        let b = self.base;
        let lerp = |a: T, c: T, t: T| a + (c - a) * t;
        let c00 = lerp(data[b], data[b + sx], fx);
        let c10 = lerp(data[b + sy], data[b + sy + sx], fx);
        let c01 = lerp(data[b + sz], data[b + sz + sx], fx);
        let c11 = lerp(data[b + sz + sy], data[b + sz + sy + sx], fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    #[inline]
    pub(crate) fn apply3(&self, data: &[[T; 3]]) -> [T; 3] {
        let [sx, sy, sz] = self.step;
        let [fx, fy, fz] = self.frac;
        let one = T::one();
        let (gx, gy, gz) = (one - fx, one - fy, one - fz);
        let corners = &data[self.base..=self.base + sx + sy + sz];
        let taps = [
            (0, gx * gy * gz),
            (sx, fx * gy * gz),
            (sy, gx * fy * gz),
            (sx + sy, fx * fy * gz),
            (sz, gx * gy * fz),
            (sx + sz, fx * gy * fz),
            (sy + sz, gx * fy * fz),
            (sx + sy + sz, fx * fy * fz),
        ];
        let mut out = [T::zero(); 3];
        for (off, w) in taps {
            let c = corners[off];
            out[0] = out[0] + w * c[0];
            out[1] = out[1] + w * c[1];
            out[2] = out[2] + w * c[2];
        }
        out
    }
}

/// Trilinear interpolation of `vol` at voxel coordinate `p`.
///
/// Coordinates outside `[0, n - 1]` are clamped to the boundary first, so
/// the function is total on finite input.
pub fn trilinear_sample<T: Real>(vol: &Volume<T>, p: [T; 3]) -> T {
    vol.sample(p)
}

/// Resamples `vol` at `x + disp(x)` for every voxel `x`.
pub fn warp_volume<T: Real>(vol: &Volume<T>, disp: &VectorField<T>) -> Result<Volume<T>> {
    vol.dims.ensure_same(&disp.dims())?;
    let dims = vol.dims;
    let [dx, dy, dz] = disp.components();
    let data = par_fill_indexed(dims, |i, x, y, z| {
        let p = [
            T::from_usize_lossy(x) + dx.data[i],
            T::from_usize_lossy(y) + dy.data[i],
            T::from_usize_lossy(z) + dz.data[i],
        ];
        vol.sample(p)
    });
    Ok(Volume::from_vec_unchecked(dims, data).with_spacing(vol.spacing))
}

/// Central differences in the interior, one-sided differences on the faces.
pub fn central_gradient<T: Real>(vol: &Volume<T>) -> Result<VectorField<T>> {
    let dims = vol.dims;
    for (axis, &len) in dims.as_array().iter().enumerate() {
        if len < 2 {
            return Err(Error::AxisTooShort { axis, len });
        }
    }
    let n = dims.as_array();
    let stride = [1, dims.nx, dims.slice_len()];
    let half = T::lit(0.5);
    let d = &vol.data;
    let comps: Vec<Volume<T>> = (0..3)
        .map(|a| {
            let data = par_fill_indexed(dims, |i, x, y, z| {
                let c = [x, y, z][a];
                let s = stride[a];
                if c == 0 {
                    d[i + s] - d[i]
                } else if c == n[a] - 1 {
                    d[i] - d[i - s]
                } else {
                    (d[i + s] - d[i - s]) * half
                }
            });
            Volume::from_vec_unchecked(dims, data)
        })
        .collect();
    let [gx, gy, gz]: [Volume<T>; 3] = comps.try_into().expect("three components");
    Ok(VectorField::from_components_unchecked([gx, gy, gz]))
}

/// A 3-vector per voxel, stored as three scalar component volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    comps: [Volume<T>; 3],
}

impl<T: Real> VectorField<T> {
    pub fn from_components(comps: [Volume<T>; 3]) -> Result<Self> {
        let d = comps[0].dims;
        comps[1].dims.ensure_same(&d).and(comps[2].dims.ensure_same(&d))?;
        for (c, v) in comps.iter().enumerate() {
            if v.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("vector field component {c}")));
            }
        }
        Ok(Self { comps })
    }

    pub(crate) fn from_components_unchecked(comps: [Volume<T>; 3]) -> Self {
        Self { comps }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::constant(dims, [T::zero(); 3])
    }

    pub fn constant(dims: Dims, c: [T; 3]) -> Self {
        Self {
            comps: c.map(|v| Volume::filled(dims, v)),
        }
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> [T; 3] + Sync) -> Result<Self> {
        let packed = par_fill(dims, f);
        Self::from_interleaved(dims, &packed)
    }

    pub(crate) fn from_interleaved(dims: Dims, packed: &[[T; 3]]) -> Result<Self> {
        let comps = [0, 1, 2].map(|c| packed.iter().map(|v| v[c]).collect::<Vec<_>>());
        let [a, b, c] = comps;
        Self::from_components([
            Volume::from_vec(dims, a)?,
            Volume::from_vec(dims, b)?,
            Volume::from_vec(dims, c)?,
        ])
    }

    pub(crate) fn to_interleaved(&self) -> Vec<[T; 3]> {
        let [a, b, c] = &self.comps;
        a.data
            .iter()
            .zip(&b.data)
            .zip(&c.data)
            .map(|((&x, &y), &z)| [x, y, z])
            .collect()
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.comps[0].dims
    }

    #[inline]
    pub fn components(&self) -> &[Volume<T>; 3] {
        &self.comps
    }

    pub fn into_components(self) -> [Volume<T>; 3] {
        self.comps
    }

    #[inline]
    pub fn component(&self, c: usize) -> &Volume<T> {
        &self.comps[c]
    }

    #[cfg(test)]
    pub(crate) fn components_mut(&mut self) -> &mut [Volume<T>; 3] {
        &mut self.comps
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [T; 3] {
        let i = self.dims().index(x, y, z);
        [self.comps[0].data[i], self.comps[1].data[i], self.comps[2].data[i]]
    }

    #[inline]
    pub fn at(&self, i: usize) -> [T; 3] {
        [self.comps[0].data[i], self.comps[1].data[i], self.comps[2].data[i]]
    }

    /// Trilinear sample of all three components at `p` (clamped).
    pub fn sample(&self, p: [T; 3]) -> [T; 3] {
        let s = Stencil::new(self.dims(), p);
        [0, 1, 2].map(|c| s.apply(&self.comps[c].data))
    }

    pub fn scale(&self, a: T) -> Self {
        Self {
            comps: [0, 1, 2].map(|c| {
                let v = &self.comps[c];
                Volume::from_vec_unchecked(v.dims, v.data.iter().map(|&x| x * a).collect())
            }),
        }
    }

    pub fn cast<U: Real>(&self) -> VectorField<U> {
        VectorField {
            comps: [0, 1, 2].map(|c| self.comps[c].cast()),
        }
    }
}

/// Returns `a * x + y` componentwise.
pub fn field_axpy<T: Real>(a: T, x: &VectorField<T>, y: &VectorField<T>) -> Result<VectorField<T>> {
    y.dims().ensure_same(&x.dims())?;
    let comps = [0, 1, 2].map(|c| {
        let (xs, ys) = (&x.comps[c].data, &y.comps[c].data);
        let data: Vec<T> = xs
            .par_iter()
            .zip(ys.par_iter())
            .map(|(&xv, &yv)| a * xv + yv)
            .collect();
        Volume::from_vec_unchecked(y.dims(), data)
    });
    VectorField::from_components(comps)
}

/// Maximum over voxels of the Euclidean vector norm.
pub fn field_linf<T: Real>(x: &VectorField<T>) -> T {
    let [a, b, c] = &x.comps;
    a.data
        .iter()
        .zip(&b.data)
        .zip(&c.data)
        .map(|((&u, &v), &w)| (u * u + v * v + w * w).sqrt())
        .fold(T::zero(), |m, n| m.max(n))
}

/// Fills a grid in parallel over z-slices; output order is fixed so the
/// result does not depend on the thread count.
pub(crate) fn par_fill<U: Send + Copy + Default>(
    dims: Dims,
    f: impl Fn(usize, usize, usize) -> U + Sync,
) -> Vec<U> {
    par_fill_indexed(dims, |_, x, y, z| f(x, y, z))
}

pub(crate) fn par_fill_indexed<U: Send + Copy + Default>(
    dims: Dims,
    f: impl Fn(usize, usize, usize, usize) -> U + Sync,
) -> Vec<U> {
    let mut out = vec![U::default(); dims.len()];
    let slice = dims.slice_len();
    out.par_chunks_mut(slice).enumerate().for_each(|(z, chunk)| {
        let mut i = z * slice;
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                chunk[y * dims.nx + x] = f(i, x, y, z);
                i += 1;
            }
        }
    });
    out
}

/// Sum with a fixed reduction order: per-slice partial sums in parallel,
/// then a sequential pass over the partials.
pub(crate) fn ordered_sum<T: Real>(dims: Dims, f: impl Fn(usize) -> T + Sync) -> T {
    let slice = dims.slice_len();
    let partials: Vec<T> = (0..dims.nz)
        .into_par_iter()
        .map(|z| {
            let start = z * slice;
            (start..start + slice).fold(T::zero(), |acc, i| acc + f(i))
        })
        .collect();
    partials.into_iter().fold(T::zero(), |a, b| a + b)
}
