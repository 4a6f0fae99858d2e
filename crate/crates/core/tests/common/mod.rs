#![allow(dead_code)]

pub mod oracles;

use opreg::{Dims, VectorField, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noise(d: Dims, seed: u64) -> Volume<f64> {
    let mut r = rng(seed);
    Volume::from_vec(d, (0..d.len()).map(|_| r.gen::<f64>()).collect()).unwrap()
}

pub fn noise_field(d: Dims, seed: u64) -> VectorField<f64> {
    let mut r = rng(seed);
    let mut comp = || Volume::from_vec(d, (0..d.len()).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    VectorField::from_components([comp(), comp(), comp()]).unwrap()
}

/// Sum of a few low-frequency sinusoids per component, rescaled so the
/// largest component magnitude equals `linf`.
pub fn smooth_field(d: Dims, seed: u64, linf: f64) -> VectorField<f64> {
    let mut r = rng(seed);
    let n = d.as_array().map(|v| v as f64);
    let modes: Vec<[f64; 8]> = (0..12)
        .map(|_| {
            [
                r.gen_range(0..3) as f64,
                r.gen_range(0..3) as f64,
                r.gen_range(0..3) as f64,
                r.gen_range(0.0..TAU),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                0.0,
            ]
        })
        .collect();
    let f = VectorField::from_fn(d, |x, y, z| {
        let mut v = [0.0; 3];
        for m in &modes {
            let ph = TAU * (m[0] * x as f64 / n[0] + m[1] * y as f64 / n[1] + m[2] * z as f64 / n[2]) + m[3];
            let s = ph.sin();
            v[0] += m[4] * s;
            v[1] += m[5] * s;
            v[2] += m[6] * s;
        }
        v
    })
    .unwrap();
    let peak = opreg::field_linf(&f);
    f.scale(linf / peak)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
