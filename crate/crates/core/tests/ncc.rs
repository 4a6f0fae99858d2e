mod common;

use common::noise;
use common::oracles::{directional, dot};
use opreg::ncc::{ncc_value_and_gateaux, ncc_value_and_gateaux_in};
use opreg::{ncc_gateaux, ncc_value, Dims, NccConfig, Region, Volume};
use proptest::prelude::*;

fn cfg(window: usize, epsilon: f64) -> NccConfig<f64> {
    NccConfig { window, epsilon }
}

fn affine(v: &Volume<f64>, a: f64, b: f64) -> Volume<f64> {
    Volume::from_vec(v.dims(), v.data().iter().map(|x| a * x + b).collect()).unwrap()
}

/// Per-voxel triple loop over clamped windows.
fn brute(j: &Volume<f64>, f: &Volume<f64>, w: usize, eps: f64) -> f64 {
    let d = j.dims();
    let r = (w / 2) as isize;
    let n = d.as_array().map(|v| v as isize);
    let mut total = 0.0;
    for i in 0..d.len() {
        let c = d.coords(i).map(|v| v as isize);
        let mut pts = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let p = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if (0..3).all(|a| p[a] >= 0 && p[a] < n[a]) {
                        pts.push((j.get(p[0] as usize, p[1] as usize, p[2] as usize), f.get(p[0] as usize, p[1] as usize, p[2] as usize)));
                    }
                }
            }
        }
        let m = pts.len() as f64;
        let mj = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let mf = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let cross: f64 = pts.iter().map(|p| (p.0 - mj) * (p.1 - mf)).sum();
        let vj: f64 = pts.iter().map(|p| (p.0 - mj).powi(2)).sum();
        let vf: f64 = pts.iter().map(|p| (p.1 - mf).powi(2)).sum();
        total += cross * cross / (vj * vf + eps);
    }
    total / d.len() as f64
}

#[test]
fn identical_images_score_one() {
    let f = noise(Dims::cube(12).unwrap(), 1);
    let v = ncc_value(&f, &f, &NccConfig::default()).unwrap();
    assert!((v - 1.0).abs() <= 1e-3 && v <= 1.0, "{v}");
    let g = affine(&f, -2.5, 0.75);
    let w = ncc_value(&g, &f, &NccConfig::default()).unwrap();
    assert!((w - 1.0).abs() <= 1e-3, "{w}");
}

#[test]
fn value_matches_brute_force() {
    let d = Dims::cube(16).unwrap();
    let j = noise(d, 2);
    let f = noise(d, 3);
    for w in [3, 7] {
        let c = cfg(w, 1e-5);
        let fast = ncc_value(&j, &f, &c).unwrap();
        assert!((fast - brute(&j, &f, w, 1e-5)).abs() <= 1e-12);
    }
}

#[test]
fn gateaux_matches_central_differences() {
    let d = Dims::cube(12).unwrap();
    let c = cfg(7, 1e-5);
    for seed in 0..4 {
        let j = noise(d, 10 + seed);
        let f = noise(d, 20 + seed);
        let h = noise(d, 30 + seed);
        let g = ncc_gateaux(&j, &f, &c).unwrap();
        let analytic = dot(&g, &h);
        let fd = directional(&j, &f, &h, 1e-4, &c);
        let rel = (analytic - fd).abs() / analytic.abs();
        assert!(rel <= 1e-5, "seed {seed}: analytic {analytic}, fd {fd}, rel {rel}");
    }
}

#[test]
fn gateaux_vanishes_at_perfect_alignment() {
    let d = Dims::cube(14).unwrap();
    let f = noise(d, 4);
    let g = ncc_gateaux(&f, &f, &cfg(7, 1e-15)).unwrap();
    for i in 0..d.len() {
        if d.is_interior(d.coords(i), 3) {
            assert!(g.data()[i].abs() <= 1e-6);
        }
    }
}

#[test]
fn constant_fixed_image_gives_zero_derivative() {
    let d = Dims::cube(10).unwrap();
    let j = noise(d, 5);
    let f = Volume::filled(d, 0.3);
    let (v, g) = ncc_value_and_gateaux(&j, &f, &NccConfig::default()).unwrap();
    assert!(v.abs() < 1e-20);
    assert!(g.data().iter().all(|x| x.abs() < 1e-20));
}

#[test]
fn constant_window_contributes_nothing() {
    // F is flat on a slab wide enough to hold whole windows; voxels whose
    // every window lies inside the slab get no derivative.
    let d = Dims::new(24, 10, 10).unwrap();
    let textured = noise(d, 6);
    let f = Volume::from_fn(d, |x, y, z| if x < 14 { 0.5 } else { textured.get(x, y, z) }).unwrap();
    let j = noise(d, 7);
    let g = ncc_gateaux(&j, &f, &NccConfig::default()).unwrap();
    for i in 0..d.len() {
        if d.coords(i)[0] < 14 - 6 {
            assert!(g.data()[i].abs() < 1e-18);
        }
    }
    assert!(g.data().iter().any(|x| x.abs() > 1e-6));
}

#[test]
fn full_region_matches_unrestricted() {
    let d = Dims::cube(9).unwrap();
    let (j, f) = (noise(d, 8), noise(d, 9));
    let c = NccConfig::default();
    let a = ncc_value_and_gateaux(&j, &f, &c).unwrap();
    let b = ncc_value_and_gateaux_in(&j, &f, &c, &Region::full(d)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn restricted_gateaux_matches_central_differences() {
    let d = Dims::cube(12).unwrap();
    let region = Region::new(d, [2, 0, 3], [9, 12, 12]).unwrap();
    let c = NccConfig::default();
    let (j, f, h) = (noise(d, 40), noise(d, 41), noise(d, 42));
    let value = |j: &Volume<f64>| ncc_value_and_gateaux_in(j, &f, &c, &region).unwrap().0;
    let (_, g) = ncc_value_and_gateaux_in(&j, &f, &c, &region).unwrap();
    let tau = 1e-4;
    let shift = |s: f64| Volume::from_vec(d, j.data().iter().zip(h.data()).map(|(a, b)| a + s * b).collect()).unwrap();
    let fd = (-value(&shift(tau)) + value(&shift(-tau))) / (2.0 * tau);
    let analytic = dot(&g, &h);
    assert!((analytic - fd).abs() <= 1e-5 * analytic.abs());
    assert!(Region::new(d, [3, 0, 0], [3, 5, 5]).is_err());
    assert!(Region::new(d, [0, 0, 0], [13, 5, 5]).is_err());
}

#[test]
fn config_validation() {
    assert!(NccConfig::<f64>::default().validate().is_ok());
    assert_eq!(NccConfig::<f64>::default(), cfg(7, 1e-5));
    for bad in [cfg(4, 1e-5), cfg(1, 1e-5), cfg(7, 0.0), cfg(7, f64::INFINITY)] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let a = noise(Dims::cube(4).unwrap(), 1);
    let b = noise(Dims::cube(5).unwrap(), 1);
    assert!(ncc_value(&a, &b, &NccConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn value_is_symmetric(s1 in any::<u64>(), s2 in any::<u64>(), w in prop::sample::select(vec![3usize, 5, 7])) {
        let d = Dims::new(7, 8, 6).unwrap();
        let (j, f) = (noise(d, s1), noise(d, s2));
        let c = cfg(w, 1e-5);
        prop_assert!((ncc_value(&j, &f, &c).unwrap() - ncc_value(&f, &j, &c).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn value_is_affine_invariant(s1 in any::<u64>(), s2 in any::<u64>(), a in 0.5f64..4.0, neg in any::<bool>(), b in -2.0f64..2.0) {
        let d = Dims::cube(8).unwrap();
        let (j, f) = (noise(d, s1), noise(d, s2));
        let c = NccConfig::default();
        let base = ncc_value(&j, &f, &c).unwrap();
        let scaled = ncc_value(&affine(&j, if neg { -a } else { a }, b), &f, &c).unwrap();
        prop_assert!((scaled - base).abs() <= 1e-6 * base);
    }

    #[test]
    fn value_lies_in_unit_interval(s1 in any::<u64>(), s2 in any::<u64>()) {
        let d = Dims::cube(6).unwrap();
        let v = ncc_value(&noise(d, s1), &noise(d, s2), &NccConfig::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
