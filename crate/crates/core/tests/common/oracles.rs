//! Independent reference computations shared by the test targets.

use super::{max_abs_diff, noise, noise_field, smooth_field};
use opreg::spectral::{inner, squared_norm};
use opreg::{
    apply_k, central_gradient, integrate, ncc_gateaux, ncc_value, synth, Dims, FlowConfig, NccConfig, OperatorSpec,
    OptimConfig, PatchSolver, VectorField, Volume,
};

/// `L v` by the periodic 7-point stencil in the spatial domain.
pub fn stencil_l(v: &VectorField<f64>, alpha: f64) -> VectorField<f64> {
    let d = v.dims();
    let [nx, ny, nz] = d.as_array();
    let comps = v.components().clone().map(|c| {
        Volume::from_fn(d, |x, y, z| {
            let g = |x: usize, y: usize, z: usize| c.get(x % nx, y % ny, z % nz);
            let lap = g(x + 1, y, z) + g(x + nx - 1, y, z) + g(x, y + 1, z) + g(x, y + ny - 1, z) + g(x, y, z + 1)
                + g(x, y, z + nz - 1)
                - 6.0 * g(x, y, z);
            g(x, y, z) - alpha * lap
        })
        .unwrap()
    });
    VectorField::from_components(comps).unwrap()
}

/// Solves the dense symmetric positive definite system by Cholesky.
pub fn cholesky_solve(mut a: Vec<f64>, n: usize, mut b: Vec<f64>) -> Vec<f64> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    b
}

/// Relative L-infinity error of `apply_k` on a centred impulse against a
/// dense solve of `(L^T L) u = e`, with `L` assembled from the stencil.
/// The impulse sits in components 0 and 2; component 1 must stay zero.
pub fn impulse_k_error(alpha: f64, n: usize) -> f64 {
    let d = Dims::cube(n).unwrap();
    let len = d.len();
    let mut l = vec![0.0; len * len];
    for j in 0..len {
        let e = Volume::from_fn(d, |x, y, z| if d.index(x, y, z) == j { 1.0 } else { 0.0 }).unwrap();
        let f = VectorField::from_components([e.clone(), e.clone(), e]).unwrap();
        let col = stencil_l(&f, alpha);
        for (i, &val) in col.component(0).data().iter().enumerate() {
            l[i * len + j] = val;
        }
    }
    let mut a = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            a[i * len + j] = (0..len).map(|k| l[k * len + i] * l[k * len + j]).sum();
        }
    }
    let centre = d.index(n / 2, n / 2, n / 2);
    let mut rhs = vec![0.0; len];
    rhs[centre] = 1.0;
    let want = cholesky_solve(a, len, rhs);

    let e = Volume::from_fn(d, |x, y, z| if d.index(x, y, z) == centre { 1.0 } else { 0.0 }).unwrap();
    let field = VectorField::from_components([e.clone(), Volume::zeros(d), e]).unwrap();
    let got = apply_k(&field, &OperatorSpec::new(alpha, d).unwrap()).unwrap();
    let peak = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let stray = got.component(1).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    [0, 2]
        .iter()
        .map(|&c| max_abs_diff(got.component(c).data(), &want))
        .fold(stray, f64::max)
        / peak
}

pub fn add(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

/// Classical RK4 on `dx/dt = v(x)` from `x0` over unit time.
pub fn rk4(v: &VectorField<f64>, x0: [f64; 3], steps: usize) -> [f64; 3] {
    let h = 1.0 / steps as f64;
    let mut x = x0;
    for _ in 0..steps {
        let k1 = v.sample(x);
        let k2 = v.sample(add(x, k1, h / 2.0));
        let k3 = v.sample(add(x, k2, h / 2.0));
        let k4 = v.sample(add(x, k3, h));
        for a in 0..3 {
            x[a] += h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        }
    }
    x
}

/// Largest interior deviation of the forward map from the RK4 oracle.
pub fn rk4_error(v: &VectorField<f64>, steps: usize, margin: usize) -> f64 {
    let cfg = FlowConfig { steps, departure_iters: 2 };
    let phi = integrate(v, &cfg).unwrap();
    let d = v.dims();
    let mut worst: f64 = 0.0;
    for i in 0..d.len() {
        let c = d.coords(i);
        if !d.is_interior(c, margin) {
            continue;
        }
        let x = c.map(|t| t as f64);
        let want = rk4(v, x, 64);
        let got = add(x, phi.forward().at(i), 1.0);
        for a in 0..3 {
            worst = worst.max((want[a] - got[a]).abs());
        }
    }
    worst
}

pub fn dot(a: &Volume<f64>, b: &Volume<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central difference of `L_sim = -ncc` along `h` at `j`.
pub fn directional(j: &Volume<f64>, f: &Volume<f64>, h: &Volume<f64>, tau: f64, c: &NccConfig<f64>) -> f64 {
    let plus = Volume::from_vec(j.dims(), j.data().iter().zip(h.data()).map(|(a, b)| a + tau * b).collect()).unwrap();
    let minus = Volume::from_vec(j.dims(), j.data().iter().zip(h.data()).map(|(a, b)| a - tau * b).collect()).unwrap();
    (-ncc_value(&plus, f, c).unwrap() + ncc_value(&minus, f, c).unwrap()) / (2.0 * tau)
}

/// Relative gap between the NCC Gateaux derivative and a central difference
/// on a random 12³ pair and direction.
pub fn ncc_fd_error(seed: u64) -> f64 {
    let d = Dims::cube(12).unwrap();
    let c = NccConfig { window: 7, epsilon: 1e-5 };
    let j = noise(d, 10 + seed);
    let f = noise(d, 20 + seed);
    let h = noise(d, 30 + seed);
    let analytic = dot(&ncc_gateaux(&j, &f, &c).unwrap(), &h);
    let fd = directional(&j, &f, &h, 1e-4, &c);
    (analytic - fd).abs() / analytic.abs()
}

pub fn solver(d: Dims, alpha: f64, optim: OptimConfig<f64>) -> PatchSolver<f64> {
    PatchSolver::new(d, alpha, optim, FlowConfig::default(), NccConfig::default()).unwrap()
}

/// Blobs image as the fixed patch and its smoothly deformed copy as the
/// moving patch.
pub fn smooth_pair(n: usize) -> (Volume<f64>, Volume<f64>) {
    let d = Dims::cube(n).unwrap();
    let (f, _) = synth::blobs::<f64>(d, 3).unwrap();
    let disp = smooth_field(d, 4, 1.0);
    let m = opreg::warp_volume(&f, &disp).unwrap();
    (m, f)
}

/// The preconditioned gradient, multiplied by `L^T L`, is the gradient of
/// the frozen-warp surrogate
/// `E(w) = V/(2 sigma^2) * L_sim(J - grad J . (w - v)) + ||L w||^2 / 2`
/// at `w = v`. Returns the worst relative error over four directions.
pub fn surrogate_check(sigma: f64, seed: u64) -> f64 {
    let (m, f) = smooth_pair(16);
    let d = f.dims();
    let ncc = NccConfig::default();
    let optim = OptimConfig { sigma, ..OptimConfig::default() };
    let s = solver(d, 0.01, optim);
    let v = smooth_field(d, seed, 0.6);

    let g = s.patch_gradient(&m, &f, &v).unwrap();
    let op = s.operator();
    let unpre = op.apply_l(&op.apply_l(&g).unwrap()).unwrap();

    let j = s.warped(&m, &v).unwrap();
    let grad_j = central_gradient(&j).unwrap();
    let weight = d.len() as f64 / (2.0 * sigma * sigma);
    let energy = |w: &VectorField<f64>| {
        let delta = opreg::field_axpy(-1.0, &v, w).unwrap();
        let moved: Vec<f64> = (0..d.len())
            .map(|i| {
                let (gj, dl) = (grad_j.at(i), delta.at(i));
                j.data()[i] - (gj[0] * dl[0] + gj[1] * dl[1] + gj[2] * dl[2])
            })
            .collect();
        let moved = Volume::from_vec(d, moved).unwrap();
        let sim = -ncc_value(&moved, &f, &ncc).unwrap();
        weight * sim + 0.5 * squared_norm(&op.apply_l(w).unwrap())
    };

    let mut worst: f64 = 0.0;
    for k in 0..4 {
        let h = if k % 2 == 0 { smooth_field(d, 100 + k, 1.0) } else { noise_field(d, 100 + k) };
        let tau = 1e-4;
        let fd = (energy(&opreg::field_axpy(tau, &h, &v).unwrap()) - energy(&opreg::field_axpy(-tau, &h, &v).unwrap()))
            / (2.0 * tau);
        let analytic = inner(&unpre, &h).unwrap();
        worst = worst.max((fd - analytic).abs() / analytic.abs());
    }
    worst
}
