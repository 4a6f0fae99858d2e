//! Deterministic synthetic volumes with matching label maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics::LabelVolume;
use crate::real::Real;
use crate::volume::{Dims, Volume};

/// Edge half-width of the smooth shape boundary, in voxels.
pub const EDGE_WIDTH: f64 = 1.0;

fn centre(dims: Dims) -> [f64; 3] {
    dims.as_array().map(|n| (n as f64 - 1.0) / 2.0)
}

/// Ellipsoid centred in the grid with semi-axes `radii` (voxels).
///
/// The image is `0.5 * (1 - tanh(d / EDGE_WIDTH))` where `d` is the radial
/// distance to the surface, so it is 1 inside and 0 outside. The label is 1
/// where `sum (x_i / r_i)^2 <= 1`.
pub fn ellipsoid<T: Real>(dims: Dims, radii: [f64; 3]) -> Result<(Volume<T>, LabelVolume)> {
    let c = centre(dims);
    let rho = move |x: usize, y: usize, z: usize| {
        let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
        let q: f64 = (0..3).map(|a| (p[a] / radii[a]).powi(2)).sum();
        let r: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        (q.sqrt(), r)
    };
    let image = Volume::from_fn(dims, |x, y, z| {
        let (s, r) = rho(x, y, z);
        // distance along the ray from the centre to the surface point
        let d = if s > 0.0 { r * (1.0 - 1.0 / s) } else { -radii[0] };
        T::lit(0.5 * (1.0 - (d / EDGE_WIDTH).tanh()))
    })?;
    let labels = LabelVolume::from_fn(dims, |x, y, z| (rho(x, y, z).0 <= 1.0) as u16);
    Ok((image, labels))
}

pub fn sphere<T: Real>(dims: Dims, radius: f64) -> Result<(Volume<T>, LabelVolume)> {
    ellipsoid(dims, [radius; 3])
}

/// Radius used for `sphere` by the CLI: 10 voxels, reduced to a quarter of
/// the smallest axis on grids too small to hold that.
pub fn default_radius(dims: Dims) -> f64 {
    let n = dims.as_array().into_iter().min().unwrap_or(1) as f64;
    (n / 4.0).min(10.0)
}

pub fn default_radii(dims: Dims) -> [f64; 3] {
    let s = default_radius(dims) / 10.0;
    [8.0 * s, 10.0 * s, 12.0 * s]
}

/// Sum of random isotropic Gaussian blobs of either sign, min-max
/// normalized to [0, 1].
///
/// About one blob per hundred voxels keeps every local window textured, so
/// no region is flat enough for the NCC variance floor to dominate.
///
/// Labels: 2 where the image exceeds 0.6, 1 in (0.4, 0.6], 0 elsewhere.
pub fn blobs<T: Real>(dims: Dims, seed: u64) -> Result<(Volume<T>, LabelVolume)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (dims.len() / 100).max(8);
    let n = dims.as_array().map(|v| v as f64);
    let params: Vec<([f64; 3], f64, f64)> = (0..count)
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.gen_range(-4.0..n[a] + 4.0));
            let sigma = rng.gen_range(2.0..4.0);
            let amp = rng.gen_range(-1.0..1.0);
            (c, sigma, amp)
        })
        .collect();
    let raw = Volume::<f64>::from_fn(dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        params
            .iter()
            .map(|(c, s, a)| {
                let r2: f64 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum();
                a * (-r2 / (2.0 * s * s)).exp()
            })
            .sum()
    })?;
    let (lo, hi) = raw.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let norm: Vec<f64> = raw.data().iter().map(|v| (v - lo) / span).collect();
    let labels = LabelVolume::from_vec(
        dims,
        norm.iter()
            .map(|&v| {
                if v > 0.6 {
                    2
                } else if v > 0.4 {
                    1
                } else {
                    0
                }
            })
            .collect(),
    )?;
    let image = Volume::from_vec(dims, norm.into_iter().map(T::lit).collect())?;
    Ok((image, labels))
}
