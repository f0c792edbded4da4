//! Guidance laws: proportional navigation baselines and the two predictive
//! laws built on the stacked prediction form
//!
//! ```text
//!     X_k = F_k + G_k dU_k + g_k + d_k
//! ```
//!
//! where block `j` of each stack belongs to `x(k+j+1|k)` and is evaluated at
//! the nominal state `x(k+j|k)`.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Feature;
use crate::engagement::{
    d_d, f_d, g_d, target_accel_polar, AgentState, EngagementState, PolarTargetAccel, StepConfig, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::maneuver::G;
use crate::predictor::{forecast_accel, polar_sequence, EncoderDecoder};
use crate::qp::{self, QpProblem, QpStatus, SolverSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub n_p: usize,
    pub n_c: usize,
    pub dt: f64,
    pub q: [f64; STATE_DIM],
    /// `R = r_weight * I`.
    pub r_weight: f64,
    pub u_max: f64,
    pub du_max: f64,
    /// Bound on each disturbance entry of the unknown-acceleration law.
    pub d_max: f64,
    /// Missile speed used to turn the missile heading along the nominal
    /// inputs; `None` holds the heading fixed over the horizon. Serialized
    /// as a number, with 0 for `None`.
    #[serde(with = "zero_is_none")]
    pub heading_speed: Option<f64>,
    /// KKT tolerance relative to `max(1, |c|_inf, |W|_inf)`.
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub sensitivity: Sensitivity,
    /// The nominal rollout is truncated once the predicted range drops
    /// below this, m.
    pub min_range: f64,
}

/// How `G_k` maps input increments to predicted states.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sensitivity {
    /// Block `j` holds `g_d(x(k+j|k))` in columns `0..=j`: each increment
    /// acts on a predicted state through one step only.
    #[default]
    Feedthrough,
    /// Full linearized response of every later state, obtained by
    /// resimulating the nominal rollout with each increment perturbed.
    /// `F_k` is adjusted so the prediction still equals the nominal
    /// rollout at the nominal increments.
    Propagated,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let u_max = 25.0 * G;
        let dt = 0.02;
        Self {
            n_p: 40,
            n_c: 40,
            dt,
            q: [0.0, 0.0, 0.0, 100.0],
            r_weight: 1.0,
            u_max,
            du_max: 0.025 * u_max,
            d_max: 8.0 * G * dt,
            heading_speed: Some(150.0),
            qp_tol: 1e-6,
            qp_max_iter: 4000,
            sensitivity: Sensitivity::Feedthrough,
            min_range: 1.0,
        }
    }
}

impl MpcConfig {
    pub fn with_horizon(n: usize) -> Self {
        Self { n_p: n, n_c: n, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.n_c == 0 || self.n_c > self.n_p {
            return Err(Error::Config(format!("need 0 < n_c <= n_p, got n_c={} n_p={}", self.n_c, self.n_p)));
        }
        if !(self.dt > 0.0) || !(self.u_max > 0.0) || !(self.du_max > 0.0) || !(self.d_max >= 0.0) {
            return Err(Error::Config("dt, u_max, du_max must be positive and d_max non-negative".into()));
        }
        if !(self.min_range >= 0.0) {
            return Err(Error::Config("min_range must be non-negative".into()));
        }
        if !(self.r_weight > 0.0) || self.q.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("weights must be non-negative with r_weight > 0".into()));
        }
        Ok(())
    }

    fn solver(&self, prob: &QpProblem) -> SolverSettings {
        let scale = 1f64.max(prob.c().amax()).max(prob.w().amax());
        SolverSettings { tol: self.qp_tol * scale, max_iter: self.qp_max_iter, warm_start: None }
    }
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok(if v > 0.0 { Some(v) } else { None })
    }
}

/// Stacked prediction matrices around a nominal rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    /// Nominal states `x(k+j|k)`, `j = 0..=n_p`.
    pub states: Vec<EngagementState>,
    /// Missile heading used at each nominal state.
    pub theta_m: Vec<f64>,
    pub f_stack: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_prev: DVector<f64>,
    pub d_stack: DVector<f64>,
    /// Blocks built from a valid state; later blocks are frozen.
    pub valid_blocks: usize,
}

impl PredictionMatrices {
    pub fn n_p(&self) -> usize {
        self.f_stack.len() / STATE_DIM
    }

    pub fn n_c(&self) -> usize {
        self.g_mat.ncols()
    }

    pub fn truncated(&self) -> bool {
        self.valid_blocks < self.n_p()
    }

    /// `F + G dU + g + d`.
    pub fn predict(&self, du: &DVector<f64>) -> DVector<f64> {
        ((&self.f_stack + &self.g_mat * du) + &self.g_prev) + &self.d_stack
    }

    /// Bearing `lambda(k+j|k)` for `j = 0..n_p`.
    pub fn bearings(&self) -> Vec<f64> {
        self.states.iter().take(self.n_p()).map(|s| s.lambda).collect()
    }
}

/// Lower-triangular matrix of ones.
pub fn i_lt(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 })
}

/// Drops the first increment and appends a zero.
pub fn shift_du(du: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = du.iter().skip(1).copied().collect();
    s.push(0.0);
    s
}

/// Nominal rollout and prediction matrices at step `k`.
///
/// `du_prev` is the previous step's increment solution; it is shifted before
/// use, so the nominal input is `u(k+j|k) = u_prev + sum_{i<=j} shift(du_prev)_i`.
/// A rollout reaching `r <= min_range` freezes the remaining blocks at the last valid
/// state with no input or disturbance effect.
pub fn rollout_nominal(
    x_k: &EngagementState,
    u_prev: f64,
    du_prev: &[f64],
    w_seq: &[PolarTargetAccel],
    theta_m: f64,
    cfg: &MpcConfig,
) -> Result<PredictionMatrices> {
    let (n_p, n_c, dt) = (cfg.n_p, cfg.n_c, cfg.dt);
    if du_prev.len() != n_c {
        return Err(Error::Dimension(format!("du_prev has {} entries, n_c = {n_c}", du_prev.len())));
    }
    if w_seq.len() != n_p {
        return Err(Error::Dimension(format!("w sequence has {} entries, n_p = {n_p}", w_seq.len())));
    }
    let shifted = shift_du(du_prev);
    let mut f_stack = DVector::zeros(STATE_DIM * n_p);
    let mut g_mat = DMatrix::zeros(STATE_DIM * n_p, n_c);
    let mut g_prev = DVector::zeros(STATE_DIM * n_p);
    let mut d_stack = DVector::zeros(STATE_DIM * n_p);
    let mut states = Vec::with_capacity(n_p + 1);
    let mut headings = Vec::with_capacity(n_p + 1);
    states.push(*x_k);
    headings.push(theta_m);
    let mut x = *x_k;
    let mut th = theta_m;
    let mut u = u_prev;
    let mut valid = n_p;
    for j in 0..n_p {
        let base = STATE_DIM * j;
        if valid < n_p {
            let a = x.to_array();
            for i in 0..STATE_DIM {
                f_stack[base + i] = a[i];
            }
            states.push(x);
            headings.push(th);
            continue;
        }
        let step = StepConfig { dt, theta_m: th };
        let f = f_d(&x, dt);
        let g = g_d(&x, &step);
        let d = d_d(&w_seq[j], dt);
        for i in 0..STATE_DIM {
            f_stack[base + i] = f[i];
            g_prev[base + i] = g[i] * u_prev;
            d_stack[base + i] = d[i];
            for c in 0..=j.min(n_c - 1) {
                g_mat[(base + i, c)] = g[i];
            }
        }
        if j < n_c {
            u += shifted[j];
        }
        let mut next = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            next[i] = f[i] + g[i] * u + d[i];
        }
        let nx = EngagementState::from_array(next);
        if let Some(v) = cfg.heading_speed {
            th += dt * u / v;
        }
        if !(nx.r > cfg.min_range) || !nx.is_finite() {
            valid = j + 1;
            states.push(x);
            headings.push(th);
            continue;
        }
        x = nx;
        states.push(x);
        headings.push(th);
    }
    let mut pm = PredictionMatrices { states, theta_m: headings, f_stack, g_mat, g_prev, d_stack, valid_blocks: valid };
    if cfg.sensitivity == Sensitivity::Propagated {
        propagate_sensitivity(&mut pm, x_k, u_prev, &shifted, w_seq, theta_m, cfg);
    }
    Ok(pm)
}

/// States `x(k+1..=k+n_p|k)` under absolute increments `du`, freezing after
/// the range collapses.
fn simulate_stack(
    x_k: &EngagementState,
    u_prev: f64,
    du: &[f64],
    w_seq: &[PolarTargetAccel],
    theta_m: f64,
    cfg: &MpcConfig,
) -> DVector<f64> {
    let mut out = DVector::zeros(STATE_DIM * cfg.n_p);
    let (mut x, mut th, mut u) = (*x_k, theta_m, u_prev);
    let mut alive = true;
    for j in 0..cfg.n_p {
        if alive {
            if j < du.len() {
                u += du[j];
            }
            let step = StepConfig { dt: cfg.dt, theta_m: th };
            let (f, g, d) = (f_d(&x, cfg.dt), g_d(&x, &step), d_d(&w_seq[j], cfg.dt));
            let mut next = [0.0; STATE_DIM];
            for i in 0..STATE_DIM {
                next[i] = f[i] + g[i] * u + d[i];
            }
            let nx = EngagementState::from_array(next);
            if let Some(v) = cfg.heading_speed {
                th += cfg.dt * u / v;
            }
            if nx.r > cfg.min_range && nx.is_finite() {
                x = nx;
            } else {
                alive = false;
            }
        }
        let a = x.to_array();
        for i in 0..STATE_DIM {
            out[STATE_DIM * j + i] = a[i];
        }
    }
    out
}

fn propagate_sensitivity(
    pm: &mut PredictionMatrices,
    x_k: &EngagementState,
    u_prev: f64,
    nominal: &[f64],
    w_seq: &[PolarTargetAccel],
    theta_m: f64,
    cfg: &MpcConfig,
) {
    let h = 1e-3 * cfg.du_max.max(1.0);
    let mut du = nominal.to_vec();
    for c in 0..cfg.n_c {
        du[c] = nominal[c] + h;
        let plus = simulate_stack(x_k, u_prev, &du, w_seq, theta_m, cfg);
        du[c] = nominal[c] - h;
        let minus = simulate_stack(x_k, u_prev, &du, w_seq, theta_m, cfg);
        du[c] = nominal[c];
        for i in 0..plus.len() {
            pm.g_mat[(i, c)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    // keep X = F + G dU + g + d exact at the nominal increments
    let x_nom = simulate_stack(x_k, u_prev, nominal, w_seq, theta_m, cfg);
    let du_nom = DVector::from_column_slice(nominal);
    pm.f_stack = ((x_nom - &pm.g_mat * du_nom) - &pm.g_prev) - &pm.d_stack;
}

fn q_diag(cfg: &MpcConfig, n_p: usize) -> DVector<f64> {
    DVector::from_fn(STATE_DIM * n_p, |i, _| cfg.q[i % STATE_DIM])
}

/// Magnitude and rate constraint rows over `dU` (`4 n_c` rows, `n_c` columns).
fn input_constraints(cfg: &MpcConfig, u_prev: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = cfg.n_c;
    let lt = i_lt(n);
    let mut e = DMatrix::zeros(4 * n, n);
    let mut b = DVector::zeros(4 * n);
    let u_min = -cfg.u_max;
    let du_min = -cfg.du_max;
    for i in 0..n {
        for j in 0..n {
            e[(i, j)] = -lt[(i, j)];
            e[(n + i, j)] = lt[(i, j)];
        }
        e[(2 * n + i, i)] = -1.0;
        e[(3 * n + i, i)] = 1.0;
        b[i] = -u_min + u_prev;
        b[n + i] = cfg.u_max - u_prev;
        b[2 * n + i] = -du_min;
        b[3 * n + i] = cfg.du_max;
    }
    (e, b)
}

/// QP of the law with predicted target accelerations, over `dU`.
pub fn build_tap_qp(pm: &PredictionMatrices, cfg: &MpcConfig, u_prev: f64) -> Result<QpProblem> {
    let n_p = pm.n_p();
    let qd = q_diag(cfg, n_p);
    let qg = DMatrix::from_fn(pm.g_mat.nrows(), pm.g_mat.ncols(), |i, j| qd[i] * pm.g_mat[(i, j)]);
    let mut w = pm.g_mat.tr_mul(&qg);
    for i in 0..cfg.n_c {
        w[(i, i)] += cfg.r_weight;
    }
    let free = ((&pm.f_stack + &pm.g_prev) + &pm.d_stack).component_mul(&qd);
    let c = pm.g_mat.tr_mul(&free) * 2.0;
    let (e, b) = input_constraints(cfg, u_prev);
    QpProblem::new(w, c, e, b)
}

/// QP of the law with unknown bounded target accelerations, over `[dU; d]`
/// with `d` in `R^{4 n_p}`.
pub fn build_unknown_qp(pm: &PredictionMatrices, cfg: &MpcConfig, u_prev: f64) -> Result<QpProblem> {
    let n_p = pm.n_p();
    let n_c = cfg.n_c;
    let nd = STATE_DIM * n_p;
    let n = n_c + nd;
    let qd = q_diag(cfg, n_p);
    let qg = DMatrix::from_fn(nd, n_c, |i, j| qd[i] * pm.g_mat[(i, j)]);
    let mut w = DMatrix::zeros(n, n);
    let mut top = pm.g_mat.tr_mul(&qg);
    for i in 0..n_c {
        top[(i, i)] += cfg.r_weight;
    }
    w.view_mut((0, 0), (n_c, n_c)).copy_from(&top);
    w.view_mut((n_c, 0), (nd, n_c)).copy_from(&qg);
    w.view_mut((0, n_c), (n_c, nd)).copy_from(&qg.transpose());
    for i in 0..nd {
        w[(n_c + i, n_c + i)] = qd[i];
    }
    let free = (&pm.f_stack + &pm.g_prev).component_mul(&qd) * 2.0;
    let mut c = DVector::zeros(n);
    c.rows_mut(0, n_c).copy_from(&pm.g_mat.tr_mul(&free));
    c.rows_mut(n_c, nd).copy_from(&free);

    let (eu, bu) = input_constraints(cfg, u_prev);
    let m = eu.nrows() + 2 * nd;
    let mut e = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    e.view_mut((0, 0), (eu.nrows(), n_c)).copy_from(&eu);
    b.rows_mut(0, bu.len()).copy_from(&bu);
    let r0 = eu.nrows();
    for i in 0..nd {
        e[(r0 + i, n_c + i)] = -1.0;
        b[r0 + i] = cfg.d_max;
        e[(r0 + nd + i, n_c + i)] = 1.0;
        b[r0 + nd + i] = cfg.d_max;
    }
    QpProblem::new(w, c, e, b)
}

/// Proportional navigation `N' V_c lambda_dot`, saturated.
pub fn pn_command(state: &EngagementState, n_prime: f64, u_max: f64) -> f64 {
    let u = n_prime * (-state.v_r) * (state.v_lambda / state.r);
    u.clamp(-u_max, u_max)
}

/// Augmented proportional navigation, saturated.
pub fn apn_command(state: &EngagementState, a_tlambda: f64, n_prime: f64, u_max: f64) -> f64 {
    let u = n_prime * (-state.v_r) * (state.v_lambda / state.r) + 0.5 * n_prime * a_tlambda;
    u.clamp(-u_max, u_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawKind {
    Pn,
    Apn,
    NmpcUnknown,
    NmpcTap,
}

impl LawKind {
    pub const ALL: [LawKind; 4] = [LawKind::Pn, LawKind::Apn, LawKind::NmpcUnknown, LawKind::NmpcTap];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pn => "pn",
            Self::Apn => "apn",
            Self::NmpcUnknown => "nmpc-unknown",
            Self::NmpcTap => "nmpc-tap",
        }
    }

    pub fn is_predictive(self) -> bool {
        matches!(self, Self::NmpcUnknown | Self::NmpcTap)
    }
}

impl std::str::FromStr for LawKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pn" => Ok(Self::Pn),
            "apn" => Ok(Self::Apn),
            "nmpc-unknown" | "unknown" | "nmpc" => Ok(Self::NmpcUnknown),
            "nmpc-tap" | "tap" => Ok(Self::NmpcTap),
            other => Err(Error::Config(format!("unknown guidance law {other:?}"))),
        }
    }
}

/// What a guidance law sees at one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub relative: EngagementState,
    pub theta_m: f64,
    pub target: AgentState,
    /// Target lateral acceleration, m/s².
    pub target_accel: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub qp_status: Option<QpStatus>,
    pub qp_iterations: usize,
    /// `X_k` at the chosen increments.
    pub predicted: Option<DVector<f64>>,
    pub solve_time_s: f64,
    /// The QP failed and the previous command was held.
    pub held: bool,
    pub warmup: bool,
    pub truncated: bool,
    /// First-step target acceleration the controller assumed, if any.
    pub w_pred: Option<PolarTargetAccel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceCommand {
    pub u: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LawConfig {
    pub mpc: MpcConfig,
    pub n_prime: f64,
    /// Predictive laws fly rate-limited PN until this much time has passed
    /// and the predictor history is full.
    pub warmup_s: f64,
    /// Apply the magnitude and rate limits to PN and APN as well.
    pub limit_baselines: bool,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self { mpc: MpcConfig::default(), n_prime: 3.0, warmup_s: 2.0, limit_baselines: false }
    }
}

/// Per-engagement guidance state.
#[derive(Debug, Clone)]
pub struct GuidanceLaw {
    kind: LawKind,
    cfg: LawConfig,
    predictor: Option<Arc<EncoderDecoder>>,
    u_prev: f64,
    du_prev: Vec<f64>,
    w_prev: Vec<PolarTargetAccel>,
    history: VecDeque<Feature>,
    steps: usize,
    forecast: Option<Vec<f64>>,
}

impl GuidanceLaw {
    pub fn new(kind: LawKind, cfg: LawConfig, predictor: Option<Arc<EncoderDecoder>>) -> Result<Self> {
        cfg.mpc.validate()?;
        if kind == LawKind::NmpcTap {
            let Some(p) = predictor.as_ref() else {
                return Err(Error::Config("nmpc-tap needs a predictor".into()));
            };
            let span = (p.horizon() - 1) as f64 * p.window.sample_dt();
            if (cfg.mpc.n_p - 1) as f64 * cfg.mpc.dt > span + 1e-9 {
                return Err(Error::HorizonExceeded {
                    requested: cfg.mpc.n_p,
                    available: (span / cfg.mpc.dt + 1e-9).floor() as usize + 1,
                });
            }
        }
        let n_c = cfg.mpc.n_c;
        let n_p = cfg.mpc.n_p;
        Ok(Self {
            kind,
            cfg,
            predictor,
            u_prev: 0.0,
            du_prev: vec![0.0; n_c],
            w_prev: vec![PolarTargetAccel::ZERO; n_p],
            history: VecDeque::new(),
            steps: 0,
            forecast: None,
        })
    }

    /// NMPC-TAP fed externally supplied target accelerations through
    /// [`GuidanceLaw::step_with_forecast`] instead of a learned model.
    pub fn with_external_forecast(cfg: LawConfig) -> Result<Self> {
        let mut law = Self::new(LawKind::NmpcUnknown, cfg, None)?;
        law.kind = LawKind::NmpcTap;
        Ok(law)
    }

    /// As [`GuidanceLaw::step`], with `accel` (`n_p` lateral target
    /// accelerations at the control step, starting now) replacing the
    /// model forecast.
    pub fn step_with_forecast(&mut self, meas: &Measurement, accel: &[f64]) -> Result<GuidanceCommand> {
        if accel.len() != self.cfg.mpc.n_p {
            return Err(Error::Dimension(format!("forecast has {} entries, n_p = {}", accel.len(), self.cfg.mpc.n_p)));
        }
        self.forecast = Some(accel.to_vec());
        let out = self.step(meas);
        self.forecast = None;
        out
    }

    pub fn kind(&self) -> LawKind {
        self.kind
    }

    pub fn config(&self) -> &LawConfig {
        &self.cfg
    }

    pub fn last_command(&self) -> f64 {
        self.u_prev
    }

    fn history_len(&self) -> usize {
        match &self.predictor {
            Some(p) => (p.window.n_history - 1) * p.window.stride + 1,
            None => 1,
        }
    }

    fn window(&self) -> Vec<Feature> {
        let p = self.predictor.as_ref().expect("predictor present");
        let stride = p.window.stride;
        self.history.iter().step_by(stride).copied().collect()
    }

    fn rate_limited(&self, u: f64) -> f64 {
        let m = &self.cfg.mpc;
        let du = (u - self.u_prev).clamp(-m.du_max, m.du_max);
        (self.u_prev + du).clamp(-m.u_max, m.u_max)
    }

    fn baseline_limit(&self, u: f64) -> f64 {
        if self.cfg.limit_baselines {
            self.rate_limited(u)
        } else {
            u
        }
    }

    /// Computes the command for the current control step.
    pub fn step(&mut self, meas: &Measurement) -> Result<GuidanceCommand> {
        let t = self.steps as f64 * self.cfg.mpc.dt;
        self.steps += 1;
        if self.predictor.is_some() {
            let (vx, vy) = meas.target.velocity();
            self.history.push_back([meas.target.x, meas.target.y, vx, vy]);
            while self.history.len() > self.history_len() {
                self.history.pop_front();
            }
        }
        let u_max = self.cfg.mpc.u_max;
        let n_prime = self.cfg.n_prime;
        match self.kind {
            LawKind::Pn => {
                let u = self.baseline_limit(pn_command(&meas.relative, n_prime, u_max));
                self.u_prev = u;
                Ok(GuidanceCommand { u, diagnostics: Diagnostics::default() })
            }
            LawKind::Apn => {
                let w = target_accel_polar(meas.target_accel, meas.target.theta, meas.relative.lambda);
                let u = self.baseline_limit(apn_command(&meas.relative, w.a_tlambda, n_prime, u_max));
                self.u_prev = u;
                Ok(GuidanceCommand { u, diagnostics: Diagnostics::default() })
            }
            LawKind::NmpcUnknown | LawKind::NmpcTap => {
                let warm = t < self.cfg.warmup_s - 1e-9 || (self.predictor.is_some() && self.history.len() < self.history_len());
                if warm {
                    let u = self.rate_limited(pn_command(&meas.relative, n_prime, u_max));
                    self.u_prev = u;
                    self.du_prev.iter_mut().for_each(|v| *v = 0.0);
                    let diagnostics = Diagnostics { warmup: true, ..Diagnostics::default() };
                    return Ok(GuidanceCommand { u, diagnostics });
                }
                self.predictive_step(meas)
            }
        }
    }

    fn predictive_step(&mut self, meas: &Measurement) -> Result<GuidanceCommand> {
        let cfg = self.cfg.mpc.clone();
        let x = meas.relative;
        let start = Instant::now();
        let (pm, prob) = match self.kind {
            LawKind::NmpcTap => {
                let w_guess: Vec<PolarTargetAccel> =
                    self.w_prev.iter().skip(1).copied().chain(std::iter::once(*self.w_prev.last().expect("n_p > 0"))).collect();
                let first = rollout_nominal(&x, self.u_prev, &self.du_prev, &w_guess, meas.theta_m, &cfg)?;
                let a = match (&self.forecast, &self.predictor) {
                    (Some(a), _) => a.clone(),
                    (None, Some(model)) => forecast_accel(model, &self.window(), cfg.dt, cfg.n_p)?,
                    (None, None) => return Err(Error::Config("nmpc-tap needs a predictor or a forecast".into())),
                };
                let w = polar_sequence(&a, &first.bearings(), meas.target.theta, meas.target.speed, cfg.dt)?;
                let pm = rollout_nominal(&x, self.u_prev, &self.du_prev, &w, meas.theta_m, &cfg)?;
                let prob = build_tap_qp(&pm, &cfg, self.u_prev)?;
                self.w_prev = w;
                (pm, prob)
            }
            _ => {
                let zeros = vec![PolarTargetAccel::ZERO; cfg.n_p];
                let pm = rollout_nominal(&x, self.u_prev, &self.du_prev, &zeros, meas.theta_m, &cfg)?;
                let prob = build_unknown_qp(&pm, &cfg, self.u_prev)?;
                (pm, prob)
            }
        };
        let sol = qp::solve(&prob, &cfg.solver(&prob));
        let mut diagnostics = Diagnostics {
            qp_status: Some(sol.status),
            qp_iterations: sol.iterations,
            solve_time_s: start.elapsed().as_secs_f64(),
            truncated: pm.truncated(),
            ..Diagnostics::default()
        };
        if sol.status != QpStatus::Optimal || sol.z.iter().any(|v| !v.is_finite()) {
            diagnostics.held = true;
            self.du_prev.iter_mut().for_each(|v| *v = 0.0);
            return Ok(GuidanceCommand { u: self.u_prev, diagnostics });
        }
        let du = sol.z.rows(0, cfg.n_c).into_owned();
        diagnostics.w_pred = match self.kind {
            LawKind::NmpcTap => Some(self.w_prev[0]),
            _ => Some(PolarTargetAccel { a_tr: sol.z[cfg.n_c + 1] / cfg.dt, a_tlambda: sol.z[cfg.n_c + 3] / cfg.dt }),
        };
        let u = self.rate_limited(self.u_prev + du[0]);
        diagnostics.predicted = Some(pm.predict(&du));
        self.u_prev = u;
        self.du_prev = du.iter().copied().collect();
        Ok(GuidanceCommand { u, diagnostics })
    }
}
