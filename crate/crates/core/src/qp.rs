//! Dense convex quadratic programs
//!
//! ```text
//!     minimize    z' W z + c' z
//!     subject to  E z <= b
//! ```
//!
//! Note the objective carries no 1/2 factor, so stationarity reads
//! `2 W z + c + E' mu = 0`.
//!
//! The solver is a Mehrotra predictor-corrector primal-dual interior point
//! method followed by an active-set polish. The Newton system is reduced with
//! a Schur complement whenever the trailing block of the reduced KKT matrix is
//! diagonal, which is the case for box-bounded variables that do not couple
//! through `W` (the disturbance block of the unknown-acceleration guidance
//! problem).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    w: DMatrix<f64>,
    c: DVector<f64>,
    e: DMatrix<f64>,
    b: DVector<f64>,
}

impl QpProblem {
    /// Builds a problem, symmetrizing `w`.
    pub fn new(w: DMatrix<f64>, c: DVector<f64>, e: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let n = c.len();
        if w.nrows() != n || w.ncols() != n {
            return Err(Error::Dimension(format!("W is {}x{}, c has {n}", w.nrows(), w.ncols())));
        }
        if e.nrows() != b.len() || (e.nrows() > 0 && e.ncols() != n) {
            return Err(Error::Dimension(format!(
                "E is {}x{}, b has {}, n = {n}",
                e.nrows(),
                e.ncols(),
                b.len()
            )));
        }
        if b.iter().chain(c.iter()).chain(w.iter()).chain(e.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Dimension("problem data has non-finite entries".into()));
        }
        let e = if e.nrows() == 0 { DMatrix::zeros(0, n) } else { e };
        let w = (&w + w.transpose()) * 0.5;
        Ok(Self { w, c, e, b })
    }

    /// Problem without inequality constraints.
    pub fn unconstrained(w: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let n = c.len();
        Self::new(w, c, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.w * z)) + self.c.dot(z)
    }

    fn with_ridge(&self, eps: f64) -> Self {
        let mut p = self.clone();
        for i in 0..p.n() {
            p.w[(i, i)] += eps;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `||2 W z + c + E' mu||_inf`
    pub stationarity: f64,
    /// `max(0, max_i (E z - b)_i)`
    pub primal_infeasibility: f64,
    /// `max_i |mu_i (E z - b)_i|`
    pub complementarity: f64,
}

impl KktResiduals {
    /// Largest residual; NaN if any residual is NaN.
    pub fn max(&self) -> f64 {
        let v = [self.stationarity, self.primal_infeasibility, self.complementarity];
        if v.iter().any(|x| x.is_nan()) {
            return f64::NAN;
        }
        v.into_iter().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub duals: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Residuals of the problem actually solved (including any ridge).
    pub residuals: KktResiduals,
    /// Diagonal regularization added to `W`, zero when none was needed.
    pub ridge: f64,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Optional primal starting point.
    pub warm_start: Option<DVector<f64>>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 4000, warm_start: None }
    }
}

impl SolverSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

/// Threshold on the smallest eigenvalue estimate of `W` below which a ridge is added.
const RIDGE_TRIGGER: f64 = 1e-9;

/// KKT residual norms of `(z, duals)` for `p`.
pub fn kkt_residuals(p: &QpProblem, z: &DVector<f64>, duals: &DVector<f64>) -> KktResiduals {
    let mut grad = (&p.w * z) * 2.0 + &p.c;
    if p.m() > 0 {
        grad += p.e.tr_mul(duals);
    }
    let slack = &p.e * z - &p.b;
    let primal = slack.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let comp = slack.iter().zip(duals.iter()).fold(0.0f64, |acc, (s, m)| acc.max((s * m).abs()));
    KktResiduals {
        stationarity: grad.amax(),
        primal_infeasibility: primal,
        complementarity: comp,
    }
}

/// Ridge `eps` added to the diagonal of `W`, or zero when `W` is safely definite.
pub fn ridge_for(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    if n == 0 {
        return 0.0;
    }
    let trace = w.trace();
    let eps = if trace > 0.0 { 1e-8 * trace / n as f64 } else { 1e-8 };
    // the smallest diagonal entry bounds the smallest eigenvalue from above
    if (0..n).any(|i| w[(i, i)] < RIDGE_TRIGGER) {
        return eps;
    }
    // so does the smallest Cholesky pivot
    match cholesky_min_pivot(w) {
        Some(p) if p >= RIDGE_TRIGGER => 0.0,
        _ => eps,
    }
}

fn cholesky_min_pivot(a: &DMatrix<f64>) -> Option<f64> {
    let n = a.nrows();
    let mut l = a.clone();
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut d = l[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        min_pivot = min_pivot.min(d);
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = l[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(min_pivot)
}

/// Constraint rows kept as (column, value) lists.
struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn from_dense(e: &DMatrix<f64>) -> Self {
        let rows = (0..e.nrows())
            .map(|i| {
                (0..e.ncols()).filter_map(|j| (e[(i, j)] != 0.0).then(|| (j, e[(i, j)]))).collect()
            })
            .collect();
        Self { rows }
    }

    fn mul(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * z[j]).sum::<f64>()),
        )
    }

    fn tr_mul(&self, y: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (r, &yi) in self.rows.iter().zip(y.iter()) {
            if yi != 0.0 {
                for &(j, v) in r {
                    out[j] += v * yi;
                }
            }
        }
        out
    }
}

/// First index `s` such that the reduced KKT matrix restricted to `[s, n)`
/// is diagonal for any positive barrier weights.
fn diagonal_tail_start(h: &DMatrix<f64>, rows: &SparseRows) -> usize {
    let n = h.nrows();
    // lo[j]: largest index m < j coupled to j
    let mut lo: Vec<Option<usize>> = vec![None; n];
    for j in 0..n {
        for m in (0..j).rev() {
            if h[(j, m)] != 0.0 {
                lo[j] = Some(m);
                break;
            }
        }
    }
    for r in &rows.rows {
        for (a, &(ja, _)) in r.iter().enumerate() {
            for &(jb, _) in &r[..a] {
                let (hi, low) = if ja > jb { (ja, jb) } else { (jb, ja) };
                lo[hi] = Some(lo[hi].map_or(low, |x| x.max(low)));
            }
        }
    }
    let mut s = n;
    // walk down while every column in [s-1, n) couples only below s-1
    let mut suffix_max: Option<usize> = None;
    while s > 0 {
        let cand = s - 1;
        let new_max = match (suffix_max, lo[cand]) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        if new_max.is_some_and(|m| m >= cand) {
            break;
        }
        suffix_max = new_max;
        s = cand;
    }
    s
}

/// Solves `K x = rhs` for SPD `K` whose `[split, n)` block is diagonal.
fn solve_structured(k: DMatrix<f64>, rhs: &DVector<f64>, split: usize) -> Option<DVector<f64>> {
    let n = k.nrows();
    if split >= n {
        return chol_solve(k, rhs);
    }
    let tail: Vec<f64> = (split..n).map(|i| k[(i, i)]).collect();
    if tail.iter().any(|&d| d <= 0.0 || !d.is_finite()) {
        return chol_solve(k, rhs);
    }
    let s = split;
    let mut x = DVector::zeros(n);
    if s > 0 {
        let mut a = k.view((0, 0), (s, s)).into_owned();
        let bmat = k.view((0, s), (s, n - s));
        let mut r1 = rhs.rows(0, s).into_owned();
        for (t, &d) in tail.iter().enumerate() {
            let col = bmat.column(t);
            let inv = 1.0 / d;
            let rt = rhs[s + t] * inv;
            for i in 0..s {
                let bi = col[i];
                if bi == 0.0 {
                    continue;
                }
                r1[i] -= bi * rt;
                let f = bi * inv;
                for j in 0..=i {
                    a[(i, j)] -= f * col[j];
                }
            }
        }
        for i in 0..s {
            for j in 0..i {
                a[(j, i)] = a[(i, j)];
            }
        }
        let x1 = chol_solve(a, &r1)?;
        let btx = bmat.tr_mul(&x1);
        for t in 0..n - s {
            x[s + t] = (rhs[s + t] - btx[t]) / tail[t];
        }
        x.rows_mut(0, s).copy_from(&x1);
    } else {
        for t in 0..n {
            x[t] = rhs[t] / tail[t];
        }
    }
    Some(x)
}

fn chol_solve(mut k: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = k.nrows();
    if n == 0 {
        return Some(DVector::zeros(0));
    }
    if let Some(ch) = k.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let scale = (0..n).map(|i| k[(i, i)].abs()).fold(0.0f64, f64::max).max(1.0);
    for i in 0..n {
        k[(i, i)] += 1e-12 * scale;
    }
    k.cholesky().map(|ch| ch.solve(rhs))
}

/// Solves the QP. The returned residuals and status refer to the ridged
/// problem when a ridge was needed (see [`QpSolution::ridge`]).
pub fn solve(p: &QpProblem, settings: &SolverSettings) -> QpSolution {
    let ridge = ridge_for(&p.w);
    let rp = if ridge > 0.0 { p.with_ridge(ridge) } else { p.clone() };
    let mut sol = interior_point(&rp, settings);
    sol.ridge = ridge;
    if sol.status == QpStatus::MaxIter && !phase_one_feasible(p) {
        sol.status = QpStatus::Infeasible;
    }
    if sol.status != QpStatus::Infeasible {
        if let Some(polished) = polish(&rp, &sol) {
            if polished.residuals.max() < sol.residuals.max() {
                sol.z = polished.z;
                sol.duals = polished.duals;
                sol.residuals = polished.residuals;
                if sol.residuals.max() <= settings.tol {
                    sol.status = QpStatus::Optimal;
                }
            }
        }
    }
    if sol.status == QpStatus::Optimal && (sol.z.iter().any(|v| !v.is_finite()) || !sol.residuals.max().is_finite()) {
        sol.status = QpStatus::MaxIter;
    }
    sol
}

fn interior_point(p: &QpProblem, settings: &SolverSettings) -> QpSolution {
    let n = p.n();
    let m = p.m();
    let tol = settings.tol;
    let h = &p.w * 2.0;
    let mut z = match &settings.warm_start {
        Some(z0) if z0.len() == n => z0.clone(),
        _ => DVector::zeros(n),
    };

    if m == 0 {
        let z = chol_solve(h.clone(), &(-&p.c)).unwrap_or_else(|| DVector::zeros(n));
        let duals = DVector::zeros(0);
        let residuals = kkt_residuals(p, &z, &duals);
        let status = if residuals.max() <= tol { QpStatus::Optimal } else { QpStatus::MaxIter };
        return QpSolution { z, duals, status, iterations: 1, residuals, ridge: 0.0 };
    }

    let rows = SparseRows::from_dense(&p.e);
    let split = diagonal_tail_start(&h, &rows);
    let mut s = (&p.b - rows.mul(&z)).map(|v| v.max(1.0));
    let mut mu = DVector::from_element(m, 1.0);
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let mut iterations = 0;

    for it in 0..settings.max_iter {
        iterations = it + 1;
        let ez = rows.mul(&z);
        let r_d = &h * &z + &p.c + rows.tr_mul(&mu, n);
        let r_p = &ez + &s - &p.b;
        let gap = s.dot(&mu) / m as f64;

        let res = kkt_residuals_sparse(&r_d, &ez, &p.b, &mu);
        if best.as_ref().is_none_or(|(v, _, _)| res.max() < *v) {
            best = Some((res.max(), z.clone(), mu.clone()));
        }
        if res.max() <= tol && r_p.amax() <= tol && gap <= tol {
            return QpSolution {
                z,
                duals: mu,
                status: QpStatus::Optimal,
                iterations,
                residuals: res,
                ridge: 0.0,
            };
        }
        if let Some(true) = farkas_certificate(p, &rows, &mu) {
            return QpSolution {
                z,
                duals: mu,
                status: QpStatus::Infeasible,
                iterations,
                residuals: res,
                ridge: 0.0,
            };
        }

        // reduced Newton matrix H + E' D E, D = mu / s
        let d: DVector<f64> = mu.component_div(&s);
        let mut k = h.clone();
        for (row, &di) in rows.rows.iter().zip(d.iter()) {
            for &(ja, va) in row {
                for &(jb, vb) in row {
                    k[(ja, jb)] += di * va * vb;
                }
            }
        }

        let solve_dir = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
            // rc is the target for M ds + S dmu
            let tmp = d.component_mul(&r_p) + rc.component_div(&s);
            let rhs = -&r_d - rows.tr_mul(&tmp, n);
            let dz = solve_structured(k.clone(), &rhs, split)?;
            let edz = rows.mul(&dz);
            let ds = -&r_p - &edz;
            let dmu = (rc + mu.component_mul(&r_p) + mu.component_mul(&edz)).component_div(&s);
            Some((dz, ds, dmu))
        };

        // predictor
        let rc_aff = -s.component_mul(&mu);
        let Some((_, ds_a, dmu_a)) = solve_dir(&rc_aff) else {
            break;
        };
        let alpha_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&mu, &dmu_a));
        let s_aff = &s + &ds_a * alpha_aff;
        let mu_aff = &mu + &dmu_a * alpha_aff;
        let gap_aff = s_aff.dot(&mu_aff) / m as f64;
        let sigma = (gap_aff / gap).powi(3).clamp(0.0, 1.0);

        // corrector
        let rc = &rc_aff - ds_a.component_mul(&dmu_a) + DVector::from_element(m, sigma * gap);
        let Some((dz, ds, dmu)) = solve_dir(&rc) else {
            break;
        };
        let alpha = (0.99 * step_to_boundary(&s, &ds).min(step_to_boundary(&mu, &dmu))).min(1.0);
        z += &dz * alpha;
        s += &ds * alpha;
        mu += &dmu * alpha;
        // keep strictly interior
        s.apply(|v| *v = v.max(1e-300));
        mu.apply(|v| *v = v.max(1e-300));
    }

    let (_, z, mu) = best.unwrap_or((f64::INFINITY, z, mu));
    let residuals = kkt_residuals(p, &z, &mu);
    let status = if residuals.max() <= tol { QpStatus::Optimal } else { QpStatus::MaxIter };
    QpSolution { z, duals: mu, status, iterations, residuals, ridge: 0.0 }
}

fn kkt_residuals_sparse(
    r_d: &DVector<f64>,
    ez: &DVector<f64>,
    b: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktResiduals {
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..b.len() {
        let g = ez[i] - b[i];
        primal = primal.max(g);
        comp = comp.max((g * mu[i]).abs());
    }
    KktResiduals { stationarity: r_d.amax(), primal_infeasibility: primal, complementarity: comp }
}

fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(1.0, f64::min)
}

/// Farkas certificate `y >= 0, E' y = 0, b' y < 0` built from diverging duals.
fn farkas_certificate(p: &QpProblem, rows: &SparseRows, mu: &DVector<f64>) -> Option<bool> {
    let norm = mu.iter().sum::<f64>();
    if norm < 1e8 {
        return None;
    }
    let y = mu / norm;
    let ety = rows.tr_mul(&y, p.n());
    let scale = p.b.amax().max(1.0);
    Some(ety.amax() <= 1e-8 && p.b.dot(&y) < -1e-9 * scale)
}

/// Feasibility of `E z <= b` via a box-bounded auxiliary problem
/// `min t` with `E z - t <= b`, solved by the same interior point method.
fn phase_one_feasible(p: &QpProblem) -> bool {
    let n = p.n();
    let m = p.m();
    if m == 0 {
        return true;
    }
    // variables [z; t], objective 1e-6 ||z||^2 + t^2 + t keeps it strictly convex
    let mut w = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        w[(i, i)] = 1e-6;
    }
    w[(n, n)] = 1e-6;
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    let mut e = DMatrix::zeros(m, n + 1);
    e.view_mut((0, 0), (m, n)).copy_from(&p.e);
    for i in 0..m {
        e[(i, n)] = -1.0;
    }
    let Ok(aux) = QpProblem::new(w, c, e, p.b.clone()) else {
        return true;
    };
    // unbounded below in t only if a t-floor is missing; the quadratic term bounds it
    let sol = interior_point(&aux, &SolverSettings { tol: 1e-9, max_iter: 200, warm_start: None });
    sol.z[n] <= 1e-7 * p.b.amax().max(1.0)
}

/// Re-solves the equality-constrained KKT system on the detected active set,
/// dropping constraints with negative multipliers and adding violated ones
/// for a few rounds.
fn polish(p: &QpProblem, sol: &QpSolution) -> Option<QpSolution> {
    let n = p.n();
    let m = p.m();
    if m == 0 {
        return None;
    }
    let slack = &p.b - &p.e * &sol.z;
    let mut active: Vec<usize> = (0..m).filter(|&i| sol.duals[i] > slack[i]).collect();
    let w2 = &p.w * 2.0;
    for _ in 0..8 {
        let na = active.len();
        if n + na > 160 || na > n {
            return None;
        }
        let mut kkt = DMatrix::zeros(n + na, n + na);
        kkt.view_mut((0, 0), (n, n)).copy_from(&w2);
        let mut rhs = DVector::zeros(n + na);
        rhs.rows_mut(0, n).copy_from(&(-&p.c));
        for (a, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + a, j)] = p.e[(i, j)];
                kkt[(j, n + a)] = p.e[(i, j)];
            }
            rhs[n + a] = p.b[i];
        }
        let x = kkt.lu().solve(&rhs)?;
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let z = x.rows(0, n).into_owned();
        let worst_dual = (0..na).min_by(|&a, &b| x[n + a].total_cmp(&x[n + b]));
        if let Some(a) = worst_dual.filter(|&a| x[n + a] < 0.0) {
            active.remove(a);
            continue;
        }
        let viol = &p.e * &z - &p.b;
        let worst_row = (0..m)
            .filter(|i| !active.contains(i))
            .max_by(|&a, &b| viol[a].total_cmp(&viol[b]));
        if let Some(i) = worst_row.filter(|&i| viol[i] > 0.0) {
            active.push(i);
            active.sort_unstable();
            continue;
        }
        let mut duals = DVector::zeros(m);
        for (a, &i) in active.iter().enumerate() {
            duals[i] = x[n + a];
        }
        let residuals = kkt_residuals(p, &z, &duals);
        return Some(QpSolution { z, duals, residuals, ..sol.clone() });
    }
    None
}
