//! Test-only oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use intercept::engagement::{step_discrete, EngagementState, PolarTargetAccel, StepConfig};
use intercept::guidance::PredictionMatrices;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random strictly convex QP with a known interior point.
pub struct RandomQp {
    pub w: DMatrix<f64>,
    pub c: DVector<f64>,
    pub e: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn random_qp(seed: u64) -> RandomQp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6usize);
    let m = rng.random_range(0..=12usize);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let w = a.transpose() * &a + DMatrix::identity(n, n);
    let c = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let e = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let b = &e * &z0 + DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
    RandomQp { w, c, e, b }
}

pub fn objective(w: &DMatrix<f64>, c: &DVector<f64>, z: &DVector<f64>) -> f64 {
    z.dot(&(w * z)) + c.dot(z)
}

/// Exhaustive active-set enumeration: solve the equality-constrained KKT
/// system `[2W E_A'; E_A 0]` for every subset `A` with `|A| <= n` and keep
/// the feasible candidate with the smallest objective.
pub fn enumerate_qp(w: &DMatrix<f64>, c: &DVector<f64>, e: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = c.len();
    let m = b.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() > n {
            continue;
        }
        let k = n + active.len();
        let mut kkt = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = 2.0 * w[(i, j)];
            }
            rhs[i] = -c[i];
        }
        for (a, &row) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + a, j)] = e[(row, j)];
                kkt[(j, n + a)] = e[(row, j)];
            }
            rhs[n + a] = b[row];
        }
        let lu = kkt.lu();
        if lu.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(x) = lu.solve(&rhs) else { continue };
        let z = x.rows(0, n).into_owned();
        let feasible = (0..m).all(|i| e.row(i).transpose().dot(&z) <= b[i] + 1e-9);
        if !feasible {
            continue;
        }
        let f = objective(w, c, &z);
        if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
            best = Some((f, z));
        }
    }
    best.expect("problem has an interior point").1
}

/// Optimality certificate for a convex QP at `z`: feasibility, then
/// multipliers for the near-active rows fitted by least squares from
/// stationarity. Returns `(stationarity residual, most negative multiplier)`
/// or `None` if `z` is infeasible.
pub fn kkt_certificate(
    w: &DMatrix<f64>,
    c: &DVector<f64>,
    e: &DMatrix<f64>,
    b: &DVector<f64>,
    z: &DVector<f64>,
    active_tol: f64,
) -> Option<(f64, f64)> {
    let slack = b - e * z;
    if slack.iter().any(|s| *s < -active_tol) {
        return None;
    }
    let grad = w * z * 2.0 + c;
    let active: Vec<usize> = (0..b.len()).filter(|&i| slack[i] <= active_tol).collect();
    if active.is_empty() {
        return Some((grad.amax(), 0.0));
    }
    let ea = DMatrix::from_fn(z.len(), active.len(), |j, a| e[(active[a], j)]);
    let mu = ea.clone().svd(true, true).solve(&(-&grad), 1e-12).ok()?;
    let resid = (&grad + &ea * &mu).amax();
    Some((resid, mu.min().min(0.0)))
}

pub struct Expanded {
    pub f: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_prev: DVector<f64>,
    pub d: DVector<f64>,
}

/// Direct expansion of the polar model around the nominal inputs with the
/// missile heading held fixed.
pub fn expand(x0: [f64; 4], theta_m: f64, u_prev: f64, du_prev: &[f64], w: &[(f64, f64)], dt: f64, n_p: usize) -> Expanded {
    let n_c = du_prev.len();
    let mut f = DVector::zeros(4 * n_p);
    let mut g_mat = DMatrix::zeros(4 * n_p, n_c);
    let mut g_prev = DVector::zeros(4 * n_p);
    let mut d = DVector::zeros(4 * n_p);
    let [mut r, mut vr, mut lam, mut vl] = x0;
    let mut u = u_prev;
    for j in 0..n_p {
        let s = (theta_m - lam).sin();
        let c = (theta_m - lam).cos();
        let fj = [r + dt * vr, vr + dt * vl * vl / r, lam + dt * vl / r, vl - dt * vr * vl / r];
        let gj = [0.0, dt * s, 0.0, -dt * c];
        let dj = [0.0, dt * w[j].0, 0.0, dt * w[j].1];
        for i in 0..4 {
            f[4 * j + i] = fj[i];
            g_prev[4 * j + i] = gj[i] * u_prev;
            d[4 * j + i] = dj[i];
            for col in 0..=j.min(n_c - 1) {
                g_mat[(4 * j + i, col)] = gj[i];
            }
        }
        // nominal input: previous increments shifted by one
        if j + 1 < n_c {
            u += du_prev[j + 1];
        }
        r = fj[0] + gj[0] * u + dj[0];
        vr = fj[1] + gj[1] * u + dj[1];
        lam = fj[2] + gj[2] * u + dj[2];
        vl = fj[3] + gj[3] * u + dj[3];
    }
    Expanded { f, g_mat, g_prev, d }
}

pub fn hand_tap(ex: &Expanded, q: [f64; 4], r_w: f64, u_prev: f64, u_max: f64, du_max: f64) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let nd = ex.f.len();
    let n = ex.g_mat.ncols();
    let qd = DMatrix::from_diagonal(&DVector::from_fn(nd, |i, _| q[i % 4]));
    let w = ex.g_mat.transpose() * &qd * &ex.g_mat + DMatrix::identity(n, n) * r_w;
    let c = ex.g_mat.transpose() * &qd * (&ex.f + &ex.g_prev + &ex.d) * 2.0;
    let lt = DMatrix::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 });
    let id = DMatrix::<f64>::identity(n, n);
    let mut e = DMatrix::zeros(4 * n, n);
    e.view_mut((0, 0), (n, n)).copy_from(&(-&lt));
    e.view_mut((n, 0), (n, n)).copy_from(&lt);
    e.view_mut((2 * n, 0), (n, n)).copy_from(&(-&id));
    e.view_mut((3 * n, 0), (n, n)).copy_from(&id);
    let mut b = DVector::zeros(4 * n);
    for i in 0..n {
        b[i] = u_max + u_prev;
        b[n + i] = u_max - u_prev;
        b[2 * n + i] = du_max;
        b[3 * n + i] = du_max;
    }
    (w, c, e, b)
}

pub fn resimulate(pm: &PredictionMatrices, x0: &EngagementState, u_seq: &[f64], w: &[PolarTargetAccel], dt: f64) -> Vec<EngagementState> {
    let mut x = *x0;
    let mut out = Vec::new();
    for (j, (&u, wj)) in u_seq.iter().zip(w).enumerate() {
        x = step_discrete(&x, u, wj, &StepConfig { dt, theta_m: pm.theta_m[j] }).unwrap();
        out.push(x);
    }
    out
}
