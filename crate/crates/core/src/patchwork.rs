//! Tiling a volume into overlapping patches and fusing their core crops.
//!
//! Cores of side `core_size` partition the volume rounded up to a multiple
//! of `core_size`. Each core sits at the centre of a patch of side
//! `patch_size`, i.e. a margin of `pad = (patch_size - core_size) / 2`
//! on every side. Reads outside the volume replicate the nearest edge
//! voxel. Fusion keeps only the cores; there is no blending.

use crate::error::{Error, Result};
use crate::ncc::Region;
use crate::optimizer::PatchResult;
use crate::real::Real;
use crate::volume::{par_fill, Dims, VectorField, Volume};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub dims: Dims,
    pub patch_size: usize,
    pub core_size: usize,
    pub pad: usize,
    /// Number of cores along each axis.
    pub counts: [usize; 3],
    /// Extra voxels appended after each axis to reach a multiple of `core_size`.
    pub pad_after: [usize; 3],
    /// Core origins in volume coordinates, x fastest.
    pub origins: Vec<[usize; 3]>,
}

pub fn plan_grid(dims: Dims, patch_size: usize, core_size: usize) -> Result<PatchGrid> {
    if core_size == 0 || patch_size <= core_size || !patch_size.is_multiple_of(2) || !core_size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "need patch_size > core_size > 0, both even; got patch {patch_size}, core {core_size}"
        )));
    }
    let n = dims.as_array();
    let counts = n.map(|len| len.div_ceil(core_size));
    let pad_after = [0, 1, 2].map(|a| counts[a] * core_size - n[a]);
    let mut origins = Vec::with_capacity(counts.iter().product());
    for z in 0..counts[2] {
        for y in 0..counts[1] {
            for x in 0..counts[0] {
                origins.push([x * core_size, y * core_size, z * core_size]);
            }
        }
    }
    Ok(PatchGrid {
        dims,
        patch_size,
        core_size,
        pad: (patch_size - core_size) / 2,
        counts,
        pad_after,
        origins,
    })
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn patch_dims(&self) -> Dims {
        Dims::cube(self.patch_size).expect("patch_size > 0")
    }

    fn origin(&self, index: usize) -> Result<[usize; 3]> {
        self.origins.get(index).copied().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "patch index {index} out of range ({} cores)",
                self.len()
            ))
        })
    }

    /// Patch-local box of voxels that lie inside the volume, i.e. that are
    /// not edge replicas.
    pub fn in_volume_region(&self, index: usize) -> Result<Region> {
        let origin = self.origin(index)?;
        let n = self.dims.as_array();
        let p = self.patch_size;
        let lo = origin.map(|o| self.pad.saturating_sub(o));
        let hi = [0, 1, 2].map(|a| (n[a] + self.pad - origin[a]).min(p));
        Region::new(self.patch_dims(), lo, hi)
    }

    /// Volume coordinate read for patch-local coordinate `l` of core `origin`.
    #[inline]
    fn source(&self, origin: [usize; 3], l: [usize; 3]) -> [usize; 3] {
        let n = self.dims.as_array();
        [0, 1, 2].map(|a| {
            let c = origin[a] as isize - self.pad as isize + l[a] as isize;
            c.clamp(0, n[a] as isize - 1) as usize
        })
    }
}

fn extract<T: Real>(vol: &Volume<T>, grid: &PatchGrid, origin: [usize; 3]) -> Volume<T> {
    let d = grid.patch_dims();
    let data = par_fill(d, |x, y, z| {
        let [sx, sy, sz] = grid.source(origin, [x, y, z]);
        vol.get(sx, sy, sz)
    });
    Volume::from_vec_unchecked(d, data).with_spacing(vol.spacing())
}

/// Cuts moving and fixed patches for core `index` from identical coordinates.
pub fn extract_pair<T: Real>(
    m: &Volume<T>,
    f: &Volume<T>,
    grid: &PatchGrid,
    index: usize,
) -> Result<(Volume<T>, Volume<T>)> {
    grid.dims.ensure_same(&m.dims())?;
    grid.dims.ensure_same(&f.dims())?;
    let origin = grid.origin(index)?;
    Ok((extract(m, grid, origin), extract(f, grid, origin)))
}

pub fn extract_field<T: Real>(v: &VectorField<T>, grid: &PatchGrid, index: usize) -> Result<VectorField<T>> {
    grid.dims.ensure_same(&v.dims())?;
    let origin = grid.origin(index)?;
    let [a, b, c] = v.components();
    VectorField::from_components([
        extract(a, grid, origin),
        extract(b, grid, origin),
        extract(c, grid, origin),
    ])
}

/// Writes each patch's central core into the full-volume field.
pub fn fuse_fields<T: Real>(patches: &[VectorField<T>], grid: &PatchGrid) -> Result<VectorField<T>> {
    if patches.len() != grid.len() {
        return Err(Error::InvalidConfig(format!(
            "expected {} patch results, got {}",
            grid.len(),
            patches.len()
        )));
    }
    let pd = grid.patch_dims();
    for p in patches {
        pd.ensure_same(&p.dims())?;
    }
    let cs = grid.core_size;
    let counts = grid.counts;
    let out = par_fill(grid.dims, |x, y, z| {
        let (cx, cy, cz) = (x / cs, y / cs, z / cs);
        let idx = cx + counts[0] * (cy + counts[1] * cz);
        let l = [x % cs + grid.pad, y % cs + grid.pad, z % cs + grid.pad];
        patches[idx].get(l[0], l[1], l[2])
    });
    VectorField::from_interleaved(grid.dims, &out)
}

pub fn fuse<T: Real>(results: &[PatchResult<T>], grid: &PatchGrid) -> Result<VectorField<T>> {
    let fields: Vec<VectorField<T>> = results.iter().map(|r| r.velocity.clone()).collect();
    fuse_fields(&fields, grid)
}

/// True iff both patches have intensity standard deviation below `threshold`.
pub fn classify_background<T: Real>(m: &Volume<T>, f: &Volume<T>, threshold: T) -> bool {
    std_dev(m) < threshold && std_dev(f) < threshold
}

fn std_dev<T: Real>(v: &Volume<T>) -> T {
    let n = T::from_usize_lossy(v.data().len());
    let mean = v.data().iter().fold(T::zero(), |a, &b| a + b) / n;
    let var = v
        .data()
        .iter()
        .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
        / n;
    var.sqrt()
}
