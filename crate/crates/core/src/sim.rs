//! Closed-loop engagements, metrics and the Monte-Carlo harness.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engagement::{propagate_agent, relative_state, AgentState, EngagementState, PolarTargetAccel};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceLaw, LawConfig, LawKind, Measurement};
use crate::maneuver::{sample_script, ManeuverLimits, ManeuverScript};
use crate::par::{self, Exec};
use crate::predictor::EncoderDecoder;
use crate::rng::{self, SimRng};

pub const SUMMARY_FORMAT: &str = "intercept-mc-summary/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub missile: AgentState,
    pub script: ManeuverScript,
    pub dt: f64,
    pub t_max: f64,
    /// Measurement noise as a fraction of each quantity's running range.
    pub noise: f64,
    pub seed: u64,
    pub kill_radius: f64,
}

impl Scenario {
    /// Missile at the origin heading east at 150 m/s; target at
    /// (1000, 1000) m heading 190° at 100 m/s flying the benchmark script.
    pub fn benchmark(noise: f64, seed: u64) -> Self {
        let t_max = 20.0;
        let target = AgentState::new(1000.0, 1000.0, 190f64.to_radians(), 100.0);
        Self {
            missile: AgentState::new(0.0, 0.0, 0.0, 150.0),
            script: ManeuverScript::benchmark(target, t_max),
            dt: 0.02,
            t_max,
            noise,
            seed,
            kill_radius: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_max > 0.0) {
            return Err(Error::Config("dt and t_max must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.kill_radius >= 0.0) {
            return Err(Error::Config("noise and kill radius must be non-negative".into()));
        }
        Ok(())
    }

    fn target_accel(&self, t: f64) -> Result<f64> {
        self.script.lateral_accel_at(t.min(self.script.total_duration()))
    }
}

/// Target quantities available to the guidance laws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTruth {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub accel: f64,
}

impl TargetTruth {
    fn as_array(&self) -> [f64; 5] {
        [self.x, self.y, self.vx, self.vy, self.accel]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self { x: a[0], y: a[1], vx: a[2], vy: a[3], accel: a[4] }
    }
}

/// Running per-quantity min/max used as the noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningRange {
    min: [f64; 5],
    max: [f64; 5],
}

impl Default for RunningRange {
    fn default() -> Self {
        Self { min: [f64::INFINITY; 5], max: [f64::NEG_INFINITY; 5] }
    }
}

impl RunningRange {
    pub fn update(&mut self, t: &TargetTruth) {
        for (i, v) in t.as_array().into_iter().enumerate() {
            self.min[i] = self.min[i].min(v);
            self.max[i] = self.max[i].max(v);
        }
    }

    pub fn range(&self) -> [f64; 5] {
        let mut r = [0.0; 5];
        for i in 0..5 {
            r[i] = if self.max[i] >= self.min[i] { self.max[i] - self.min[i] } else { 0.0 };
        }
        r
    }
}

/// Adds zero-mean Gaussian noise with std `fraction * scale` per quantity.
/// Always draws one normal per quantity so the stream advances identically
/// for every law.
pub fn apply_noise(truth: &TargetTruth, scale: &[f64; 5], fraction: f64, rng: &mut SimRng) -> TargetTruth {
    let mut a = truth.as_array();
    for (v, s) in a.iter_mut().zip(scale) {
        let n: f64 = StandardNormal.sample(rng);
        *v += fraction * s * n;
    }
    TargetTruth::from_array(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub missile: AgentState,
    pub target: AgentState,
    pub state: EngagementState,
    pub u: f64,
    pub a_t_true: f64,
    pub w_pred: Option<PolarTargetAccel>,
    pub qp_held: bool,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementRecord {
    pub law: LawKind,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub miss_distance: f64,
    pub interception_time: f64,
    pub qp_failures: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Kill,
    RangeIncreasing,
    Timeout,
}

impl EngagementRecord {
    pub fn inputs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.u).collect()
    }

    /// Mean `|u(k) - u(k-1)|` over the recorded commands.
    pub fn air(&self) -> f64 {
        let u = self.inputs();
        if u.len() < 2 {
            return 0.0;
        }
        u.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (u.len() - 1) as f64
    }

    /// Largest `|u|` and `|u(k) - u(k-1)|`, with `u(-1) = 0`.
    pub fn input_extremes(&self) -> (f64, f64) {
        let mut prev = 0.0;
        let mut mu: f64 = 0.0;
        let mut mdu: f64 = 0.0;
        for u in self.inputs() {
            mu = mu.max(u.abs());
            mdu = mdu.max((u - prev).abs());
            prev = u;
        }
        (mu, mdu)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "t,x_M,y_M,x_T,y_T,r,V_r,lambda,V_lambda,u,a_T_true,a_Tlambda_pred,a_Tr_pred")?;
        for s in &self.steps {
            let (al, ar) = s.w_pred.map_or((f64::NAN, f64::NAN), |w| (w.a_tlambda, w.a_tr));
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.t,
                s.missile.x,
                s.missile.y,
                s.target.x,
                s.target.y,
                s.state.r,
                s.state.v_r,
                s.state.lambda,
                s.state.v_lambda,
                s.u,
                s.a_t_true,
                al,
                ar
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Closest approach between two samples, assuming both agents move linearly
/// in between. Returns `(distance, fraction of the step)`.
fn segment_min(p0: (f64, f64), p1: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let vv = dx * dx + dy * dy;
    let tau = if vv > 0.0 { (-(p0.0 * dx + p0.1 * dy) / vv).clamp(0.0, 1.0) } else { 0.0 };
    ((p0.0 + tau * dx).hypot(p0.1 + tau * dy), tau)
}

fn relative_position(m: &AgentState, t: &AgentState) -> (f64, f64) {
    (t.x - m.x, t.y - m.y)
}

/// Flies one engagement.
pub fn run_engagement(
    scenario: &Scenario,
    law: LawKind,
    cfg: &LawConfig,
    predictor: Option<Arc<EncoderDecoder>>,
) -> Result<EngagementRecord> {
    if law == LawKind::NmpcTap && predictor.is_none() {
        return Err(Error::Config("nmpc-tap needs a predictor".into()));
    }
    let cfg = scenario_law_config(scenario, cfg);
    let guidance = GuidanceLaw::new(law, cfg, if law == LawKind::NmpcTap { predictor } else { None })?;
    fly(scenario, guidance, false)
}

/// NMPC-TAP given the target's true future accelerations.
pub fn run_engagement_perfect_forecast(scenario: &Scenario, cfg: &LawConfig) -> Result<EngagementRecord> {
    let cfg = scenario_law_config(scenario, cfg);
    fly(scenario, GuidanceLaw::with_external_forecast(cfg)?, true)
}

fn scenario_law_config(scenario: &Scenario, cfg: &LawConfig) -> LawConfig {
    let mut cfg = cfg.clone();
    cfg.mpc.dt = scenario.dt;
    cfg.mpc.heading_speed = cfg.mpc.heading_speed.map(|_| scenario.missile.speed);
    cfg
}

fn fly(scenario: &Scenario, mut guidance: GuidanceLaw, perfect_forecast: bool) -> Result<EngagementRecord> {
    scenario.validate()?;
    let law = guidance.kind();
    let n_p = guidance.config().mpc.n_p;
    let mut noise_rng = rng::stream(scenario.seed, 0);
    let mut range = RunningRange::default();
    let mut missile = scenario.missile;
    let mut target = scenario.script.initial;
    let dt = scenario.dt;
    let n_max = (scenario.t_max / dt).floor() as usize;
    let mut steps: Vec<StepRecord> = Vec::with_capacity(n_max + 1);
    let mut qp_failures = 0;
    let mut increasing = 0usize;
    let mut prev_r = f64::INFINITY;
    let mut termination = Termination::Timeout;
    let mut k = 0usize;
    loop {
        let t = k as f64 * dt;
        let state = match (relative_state(&missile, &target), steps.last()) {
            (Ok(s), _) => s,
            // exact coincidence after a step
            (Err(Error::DegenerateGeometry), Some(prev)) => {
                EngagementState { r: 0.0, ..prev.state }
            }
            (Err(e), _) => return Err(e),
        };
        if !state.is_finite() {
            return Err(Error::NonFinite { t });
        }
        if state.r < scenario.kill_radius {
            steps.push(StepRecord {
                t,
                missile,
                target,
                state,
                u: guidance.last_command(),
                a_t_true: scenario.target_accel(t)?,
                w_pred: None,
                qp_held: false,
                qp_iterations: 0,
            });
            termination = Termination::Kill;
            break;
        }
        if state.r > prev_r {
            increasing += 1;
            if increasing >= 3 {
                termination = Termination::RangeIncreasing;
                break;
            }
        } else {
            increasing = 0;
        }
        prev_r = state.r;
        if k > n_max {
            break;
        }

        let a_t = scenario.target_accel(t)?;
        let (vx, vy) = target.velocity();
        let truth = TargetTruth { x: target.x, y: target.y, vx, vy, accel: a_t };
        range.update(&truth);
        let meas = apply_noise(&truth, &range.range(), scenario.noise, &mut noise_rng);
        let meas_target = AgentState::from_position_velocity(meas.x, meas.y, meas.vx, meas.vy);
        let meas_state = relative_state(&missile, &meas_target)?;
        let m = Measurement { relative: meas_state, theta_m: missile.theta, target: meas_target, target_accel: meas.accel };
        let cmd = if perfect_forecast {
            let a = (0..n_p).map(|j| scenario.target_accel(t + j as f64 * dt)).collect::<Result<Vec<_>>>()?;
            guidance.step_with_forecast(&m, &a)?
        } else {
            guidance.step(&m)?
        };
        if !cmd.u.is_finite() {
            return Err(Error::NonFinite { t });
        }
        if cmd.diagnostics.held {
            qp_failures += 1;
        }
        steps.push(StepRecord {
            t,
            missile,
            target,
            state,
            u: cmd.u,
            a_t_true: a_t,
            w_pred: cmd.diagnostics.w_pred,
            qp_held: cmd.diagnostics.held,
            qp_iterations: cmd.diagnostics.qp_iterations,
        });
        missile = propagate_agent(&missile, cmd.u, dt);
        target = propagate_agent(&target, a_t, dt);
        k += 1;
    }

    // closest approach, refined between samples
    let mut best = (f64::INFINITY, 0.0);
    let mut positions: Vec<(f64, (f64, f64))> =
        steps.iter().map(|s| (s.t, relative_position(&s.missile, &s.target))).collect();
    if termination != Termination::Kill {
        positions.push((k as f64 * dt, relative_position(&missile, &target)));
    }
    for (i, &(t, p)) in positions.iter().enumerate() {
        let r = p.0.hypot(p.1);
        if r < best.0 {
            best = (r, t);
        }
        if let Some(&(t1, p1)) = positions.get(i + 1) {
            let (d, tau) = segment_min(p, p1);
            if d < best.0 {
                best = (d, t + tau * (t1 - t));
            }
        }
    }
    Ok(EngagementRecord {
        law,
        seed: scenario.seed,
        steps,
        miss_distance: best.0,
        interception_time: best.1,
        qp_failures,
        termination,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub miss_distance: f64,
    pub interception_time: f64,
    pub air: f64,
    pub max_abs_u: f64,
    pub max_abs_du: f64,
    pub qp_failures: usize,
}

impl From<&EngagementRecord> for RunSummary {
    fn from(r: &EngagementRecord) -> Self {
        let (max_abs_u, max_abs_du) = r.input_extremes();
        Self {
            seed: r.seed,
            miss_distance: r.miss_distance,
            interception_time: r.interception_time,
            air: r.air(),
            max_abs_u,
            max_abs_du,
            qp_failures: r.qp_failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub law: LawKind,
    pub n_p: usize,
    pub n_runs: usize,
    pub n_failed: usize,
    pub md_mean: f64,
    pub md_std: f64,
    pub it_mean: f64,
    pub air: f64,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<(u64, String)>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Summary statistics over successful runs.
pub fn metrics(law: LawKind, n_p: usize, runs: &[RunSummary], failures: Vec<(u64, String)>) -> McSummary {
    let md: Vec<f64> = runs.iter().map(|r| r.miss_distance).collect();
    let (md_mean, md_std) = mean_std(&md);
    let it_mean = mean_std(&runs.iter().map(|r| r.interception_time).collect::<Vec<_>>()).0;
    let air = mean_std(&runs.iter().map(|r| r.air).collect::<Vec<_>>()).0;
    McSummary {
        law,
        n_p,
        n_runs: runs.len() + failures.len(),
        n_failed: failures.len(),
        md_mean,
        md_std,
        it_mean,
        air,
        runs: runs.to_vec(),
        failures,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub n_runs: usize,
    pub base_seed: u64,
    pub laws: Vec<LawKind>,
    /// Horizons for the predictive laws; baselines run once.
    pub horizons: Vec<usize>,
    pub randomize_maneuver: bool,
    pub limits: ManeuverLimits,
    pub exec: Exec,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            base_seed: 1000,
            laws: LawKind::ALL.to_vec(),
            horizons: vec![10, 30, 40],
            randomize_maneuver: false,
            limits: ManeuverLimits::default(),
            exec: Exec::Parallel,
        }
    }
}

/// Scenario of run `i`: seed `base + i`, optionally with a random script.
pub fn run_scenario(template: &Scenario, mc: &McConfig, i: usize) -> Scenario {
    let mut s = template.clone();
    s.seed = mc.base_seed + i as u64;
    if mc.randomize_maneuver {
        let mut r = rng::stream(s.seed, 1);
        let mut script = sample_script(&mut r, &mc.limits, s.t_max);
        script.initial = template.script.initial;
        s.script = script;
    }
    s
}

/// Paired-seed Monte-Carlo batch. Returns one summary per law and horizon,
/// in law order then horizon order.
pub fn monte_carlo(
    template: &Scenario,
    law_cfg: &LawConfig,
    mc: &McConfig,
    predictor: Option<Arc<EncoderDecoder>>,
) -> Result<Vec<McSummary>> {
    if mc.n_runs == 0 {
        return Err(Error::Config("n_runs must be positive".into()));
    }
    let mut jobs: Vec<(LawKind, usize)> = Vec::new();
    for &law in &mc.laws {
        if law.is_predictive() {
            for &h in &mc.horizons {
                jobs.push((law, h));
            }
        } else {
            jobs.push((law, law_cfg.mpc.n_p));
        }
    }
    if jobs.iter().any(|(l, _)| *l == LawKind::NmpcTap) && predictor.is_none() {
        return Err(Error::Config("nmpc-tap needs a predictor".into()));
    }
    let total = jobs.len() * mc.n_runs;
    let results = par::map_range(mc.exec, total, |idx| {
        let (law, n_p) = jobs[idx / mc.n_runs];
        let i = idx % mc.n_runs;
        let s = run_scenario(template, mc, i);
        let mut cfg = law_cfg.clone();
        cfg.mpc.n_p = n_p;
        cfg.mpc.n_c = n_p.min(cfg.mpc.n_c.max(n_p));
        run_engagement(&s, law, &cfg, predictor.clone()).map(|r| RunSummary::from(&r)).map_err(|e| (s.seed, e.to_string()))
    });
    let mut out = Vec::with_capacity(jobs.len());
    for (ji, &(law, n_p)) in jobs.iter().enumerate() {
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for r in &results[ji * mc.n_runs..(ji + 1) * mc.n_runs] {
            match r {
                Ok(s) => runs.push(*s),
                Err(f) => failures.push(f.clone()),
            }
        }
        out.push(metrics(law, n_p, &runs, failures));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub format: String,
    pub scenario: Scenario,
    pub law_config: LawConfig,
    pub mc: McConfig,
    pub summaries: Vec<McSummary>,
}

pub fn write_summary(path: &Path, file: &SummaryFile) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, file)?;
    Ok(())
}
