//! Local normalized cross-correlation and its derivative with respect to the
//! warped image.
//!
//! For each voxel `v` the window `W(v)` is the cube of side `window` centred
//! on `v`, truncated to the grid. With `n = |W(v)|`:
//!
//! ```text
//! cross = sum JF - sum J sum F / n
//! varJ  = sum J^2 - (sum J)^2 / n
//! varF  = sum F^2 - (sum F)^2 / n
//! cc(v) = cross^2 / (varJ * varF + eps)
//! ```
//!
//! `ncc_value` is the mean of `cc` over all voxels; the similarity loss is
//! its negative.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{ordered_sum, Dims, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NccConfig<T> {
    pub window: usize,
    pub epsilon: T,
}

impl<T: Real> Default for NccConfig<T> {
    fn default() -> Self {
        Self {
            window: 7,
            epsilon: T::lit(1e-5),
        }
    }
}

impl<T: Real> NccConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "NCC window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.epsilon > T::zero()) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "NCC epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    #[inline]
    fn radius(&self) -> usize {
        self.window / 2
    }
}

/// Truncated box sum along one axis using per-line prefix sums.
fn box_sum_axis<T: Real>(src: &[T], dims: Dims, axis: usize, r: usize) -> Vec<T> {
    let len = dims.as_array()[axis];
    // Row width: lines along `axis` are processed `width` at a time so that
    // the inner loops run over contiguous memory.
    let width = [1, dims.nx, dims.slice_len()][axis];
    let block = width * len;
    let mut out = vec![T::zero(); src.len()];
    let mut prefix = vec![T::zero(); (len + 1) * width];
    for (s, o) in src.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..len {
            let (done, next) = prefix.split_at_mut((i + 1) * width);
            let prev = &done[i * width..];
            for ((p, &q), &x) in next[..width].iter_mut().zip(prev).zip(&s[i * width..(i + 1) * width]) {
                *p = q + x;
            }
        }
        for i in 0..len {
            let lo = &prefix[i.saturating_sub(r) * width..][..width];
            let hi = &prefix[((i + r).min(len - 1) + 1) * width..][..width];
            for ((d, &h), &l) in o[i * width..(i + 1) * width].iter_mut().zip(hi).zip(lo) {
                *d = h - l;
            }
        }
    }
    out
}

/// Sum of `src` over the truncated window around each voxel.
pub(crate) fn box_sum<T: Real>(src: &[T], dims: Dims, r: usize) -> Vec<T> {
    let a = box_sum_axis(src, dims, 0, r);
    let b = box_sum_axis(&a, dims, 1, r);
    box_sum_axis(&b, dims, 2, r)
}

fn window_counts<T: Real>(dims: Dims, r: usize) -> Vec<T> {
    let per_axis = |n: usize| -> Vec<usize> {
        (0..n).map(|i| (i + r).min(n - 1) + 1 - i.saturating_sub(r)).collect()
    };
    let (cx, cy, cz) = (per_axis(dims.nx), per_axis(dims.ny), per_axis(dims.nz));
    let mut out = Vec::with_capacity(dims.len());
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                out.push(T::from_usize_lossy(cx[x] * cy[y] * cz[z]));
            }
        }
    }
    out
}

/// Window statistics shared by the score and its derivative.
struct LocalStats<T> {
    cross: Vec<T>,
    var_j: Vec<T>,
    var_f: Vec<T>,
    mean_j: Vec<T>,
    mean_f: Vec<T>,
}

fn local_stats<T: Real>(j: &Volume<T>, f: &Volume<T>, r: usize) -> LocalStats<T> {
    let dims = j.dims();
    let (jd, fd) = (j.data(), f.data());
    let count = window_counts::<T>(dims, r);
    let sj = box_sum(jd, dims, r);
    let sf = box_sum(fd, dims, r);
    let sjj = box_sum(&jd.iter().map(|&v| v * v).collect::<Vec<_>>(), dims, r);
    let sff = box_sum(&fd.iter().map(|&v| v * v).collect::<Vec<_>>(), dims, r);
    let sjf = box_sum(
        &jd.iter().zip(fd).map(|(&a, &b)| a * b).collect::<Vec<_>>(),
        dims,
        r,
    );
    let len = dims.len();
    let mut s = LocalStats {
        cross: Vec::with_capacity(len),
        var_j: Vec::with_capacity(len),
        var_f: Vec::with_capacity(len),
        mean_j: Vec::with_capacity(len),
        mean_f: Vec::with_capacity(len),
    };
    for i in 0..len {
        let n = count[i];
        let mj = sj[i] / n;
        let mf = sf[i] / n;
        s.cross.push(sjf[i] - sj[i] * mf);
        s.var_j.push((sjj[i] - sj[i] * mj).max(T::zero()));
        s.var_f.push((sff[i] - sf[i] * mf).max(T::zero()));
        s.mean_j.push(mj);
        s.mean_f.push(mf);
    }
    s
}

fn check_pair<T: Real>(j: &Volume<T>, f: &Volume<T>, cfg: &NccConfig<T>) -> Result<()> {
    cfg.validate()?;
    j.dims().ensure_same(&f.dims())
}

/// Mean local squared correlation of `j` and `f`.
pub fn ncc_value<T: Real>(j: &Volume<T>, f: &Volume<T>, cfg: &NccConfig<T>) -> Result<T> {
    check_pair(j, f, cfg)?;
    let s = local_stats(j, f, cfg.radius());
    Ok(mean_score(&s, &Region::full(j.dims()), cfg.epsilon))
}

/// Axis-aligned box `[lo, hi)` of window centres that enter the score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub dims: Dims,
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Region {
    pub fn full(dims: Dims) -> Self {
        Self { dims, lo: [0; 3], hi: dims.as_array() }
    }

    pub fn new(dims: Dims, lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        let n = dims.as_array();
        if (0..3).any(|a| lo[a] >= hi[a] || hi[a] > n[a]) {
            return Err(Error::InvalidConfig(format!(
                "score region {lo:?}..{hi:?} is empty or outside {n:?}"
            )));
        }
        Ok(Self { dims, lo, hi })
    }

    pub fn len(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn contains_index(&self, i: usize) -> bool {
        let c = self.dims.coords(i);
        (0..3).all(|a| c[a] >= self.lo[a] && c[a] < self.hi[a])
    }
}

fn mean_score<T: Real>(s: &LocalStats<T>, region: &Region, eps: T) -> T {
    let total = ordered_sum(region.dims, |i| {
        if !region.contains_index(i) {
            return T::zero();
        }
        let c = s.cross[i];
        c * c / (s.var_j[i] * s.var_f[i] + eps)
    });
    total / T::from_usize_lossy(region.len())
}

/// Pointwise derivative of the similarity loss `-ncc_value(j, f)` with
/// respect to `j`.
pub fn ncc_gateaux<T: Real>(j: &Volume<T>, f: &Volume<T>, cfg: &NccConfig<T>) -> Result<Volume<T>> {
    Ok(ncc_value_and_gateaux(j, f, cfg)?.1)
}

/// `ncc_value` and `ncc_gateaux` sharing one set of window sums.
pub fn ncc_value_and_gateaux<T: Real>(
    j: &Volume<T>,
    f: &Volume<T>,
    cfg: &NccConfig<T>,
) -> Result<(T, Volume<T>)> {
    ncc_value_and_gateaux_in(j, f, cfg, &Region::full(j.dims()))
}

/// `ncc_value_and_gateaux` with the mean taken only over window centres in
/// `region`. Voxels outside it still move the score through the windows of
/// centres inside.
pub fn ncc_value_and_gateaux_in<T: Real>(
    j: &Volume<T>,
    f: &Volume<T>,
    cfg: &NccConfig<T>,
    region: &Region,
) -> Result<(T, Volume<T>)> {
    check_pair(j, f, cfg)?;
    let dims = j.dims();
    dims.ensure_same(&region.dims)?;
    let r = cfg.radius();
    let eps = cfg.epsilon;
    let s = local_stats(j, f, r);
    let value = mean_score(&s, region, eps);

    // d cc(v) / d J(x) = a_v (F(x) - Fbar_v) - b_v (J(x) - Jbar_v) for x in W(v),
    // with a_v = 2 cross / D and b_v = 2 cross^2 varF / D^2.
    let two = T::lit(2.0);
    let len = dims.len();
    let mut a = Vec::with_capacity(len);
    let mut b = Vec::with_capacity(len);
    let mut a_mf = Vec::with_capacity(len);
    let mut b_mj = Vec::with_capacity(len);
    for i in 0..len {
        if !region.contains_index(i) {
            a.push(T::zero());
            b.push(T::zero());
            a_mf.push(T::zero());
            b_mj.push(T::zero());
            continue;
        }
        let d = s.var_j[i] * s.var_f[i] + eps;
        let av = two * s.cross[i] / d;
        let bv = two * s.cross[i] * s.cross[i] * s.var_f[i] / (d * d);
        a.push(av);
        b.push(bv);
        a_mf.push(av * s.mean_f[i]);
        b_mj.push(bv * s.mean_j[i]);
    }
    // Window membership is symmetric, so summing over windows that contain x
    // is a box sum centred on x.
    let sa = box_sum(&a, dims, r);
    let sb = box_sum(&b, dims, r);
    let samf = box_sum(&a_mf, dims, r);
    let sbmj = box_sum(&b_mj, dims, r);
    let scale = -T::from_usize_lossy(region.len()).recip();
    let (jd, fd) = (j.data(), f.data());
    let grad: Vec<T> = (0..len)
        .map(|i| scale * (fd[i] * sa[i] - samf[i] - jd[i] * sb[i] + sbmj[i]))
        .collect();
    Ok((value, Volume::from_vec_unchecked(dims, grad)))
}

/// Pearson correlation of two whole volumes; 0 when either is constant.
pub fn global_ncc<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<T> {
    a.dims().ensure_same(&b.dims())?;
    let dims = a.dims();
    let n = T::from_usize_lossy(dims.len());
    let (ad, bd) = (a.data(), b.data());
    let ma = ordered_sum(dims, |i| ad[i]) / n;
    let mb = ordered_sum(dims, |i| bd[i]) / n;
    let cov = ordered_sum(dims, |i| (ad[i] - ma) * (bd[i] - mb));
    let va = ordered_sum(dims, |i| (ad[i] - ma) * (ad[i] - ma));
    let vb = ordered_sum(dims, |i| (bd[i] - mb) * (bd[i] - mb));
    let den = (va * vb).sqrt();
    if den > T::zero() {
        Ok(cov / den)
    } else {
        Ok(T::zero())
    }
}
