//! Planar missile-target engagement: polar relative state, its Euler
//! discretization, and constant-speed point-mass agent kinematics.
//!
//! The polar state is `x = [r, v_r, lambda, v_lambda]` with the line of sight
//! (LOS) pointing from the missile to the target. The discrete model is
//!
//! ```text
//! x(k+1) = f_d(x(k)) + g_d(x(k)) u(k) + d_d(x(k)) w(k)
//! ```
//!
//! with `u` the missile lateral acceleration and `w = [a_Tr, a_Tlambda]` the
//! target acceleration projected onto the LOS frame.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of polar state components.
pub const STATE_DIM: usize = 4;

/// Wraps an angle into `(-pi, pi]`.
///
/// Values already inside the interval are returned bit-for-bit unchanged.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Polar relative state of the target seen from the missile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngagementState {
    /// Range along the LOS, m.
    pub r: f64,
    /// Range rate, m/s. Negative while closing.
    pub v_r: f64,
    /// LOS angle, rad, in `(-pi, pi]`.
    pub lambda: f64,
    /// Relative velocity component normal to the LOS, m/s.
    pub v_lambda: f64,
}

impl EngagementState {
    pub fn new(r: f64, v_r: f64, lambda: f64, v_lambda: f64) -> Self {
        Self { r, v_r, lambda: wrap_angle(lambda), v_lambda }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.r, self.v_r, self.lambda, self.v_lambda]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self { r: a[0], v_r: a[1], lambda: a[2], v_lambda: a[3] }
    }

    /// LOS rate, rad/s.
    pub fn lambda_dot(&self) -> f64 {
        self.v_lambda / self.r
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Cartesian kinematic state of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Flight-path angle, rad, in `(-pi, pi]`.
    pub theta: f64,
    /// Constant speed, m/s.
    pub speed: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, theta: f64, speed: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta), speed }
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.speed * self.theta.cos(), self.speed * self.theta.sin())
    }

    /// Builds an agent from a position and a velocity vector.
    pub fn from_position_velocity(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, theta: vy.atan2(vx), speed: vx.hypot(vy) }
    }
}

/// Target acceleration projected onto the LOS frame, `w = [a_Tr, a_Tlambda]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PolarTargetAccel {
    pub a_tr: f64,
    pub a_tlambda: f64,
}

impl PolarTargetAccel {
    pub const ZERO: Self = Self { a_tr: 0.0, a_tlambda: 0.0 };

    pub fn magnitude(&self) -> f64 {
        self.a_tr.hypot(self.a_tlambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    /// Integration step, s.
    pub dt: f64,
    /// Missile flight-path angle held over the step, rad.
    pub theta_m: f64,
}

/// Polar relative state from the Cartesian states of both agents.
pub fn relative_state(missile: &AgentState, target: &AgentState) -> Result<EngagementState> {
    let dx = target.x - missile.x;
    let dy = target.y - missile.y;
    let r = dx.hypot(dy);
    if r == 0.0 || !r.is_finite() {
        return Err(Error::DegenerateGeometry);
    }
    let lambda = dy.atan2(dx);
    let dt_l = wrap_angle(target.theta - lambda);
    let dm_l = wrap_angle(missile.theta - lambda);
    let v_r = target.speed * dt_l.cos() - missile.speed * dm_l.cos();
    let v_lambda = target.speed * dt_l.sin() - missile.speed * dm_l.sin();
    Ok(EngagementState { r, v_r, lambda, v_lambda })
}

/// Projects a scalar target lateral acceleration onto the LOS frame.
pub fn target_accel_polar(a_t: f64, theta_t: f64, lambda: f64) -> PolarTargetAccel {
    let d = wrap_angle(theta_t - lambda);
    PolarTargetAccel { a_tr: a_t * d.sin(), a_tlambda: a_t * d.cos() }
}

/// Drift term `f_d(x)` of the discrete model.
pub fn f_d(x: &EngagementState, dt: f64) -> [f64; STATE_DIM] {
    let EngagementState { r, v_r, lambda, v_lambda } = *x;
    [
        r + dt * v_r,
        v_r + dt * (v_lambda * v_lambda / r),
        lambda + dt * (v_lambda / r),
        v_lambda + dt * (-v_r * v_lambda / r),
    ]
}

/// Input column `g_d(x)` of the discrete model.
pub fn g_d(x: &EngagementState, cfg: &StepConfig) -> [f64; STATE_DIM] {
    let d = wrap_angle(cfg.theta_m - x.lambda);
    [0.0, cfg.dt * d.sin(), 0.0, -cfg.dt * d.cos()]
}

/// Disturbance term `d_d(x) w` of the discrete model.
pub fn d_d(w: &PolarTargetAccel, dt: f64) -> [f64; STATE_DIM] {
    [0.0, dt * w.a_tr, 0.0, dt * w.a_tlambda]
}

/// One Euler step of the polar engagement model.
///
/// Components are summed as `(f_d + g_d u) + d_d w`, the same order the
/// stacked prediction form uses, so both paths agree bit-for-bit.
pub fn step_discrete(
    x: &EngagementState,
    u: f64,
    w: &PolarTargetAccel,
    cfg: &StepConfig,
) -> Result<EngagementState> {
    let f = f_d(x, cfg.dt);
    let g = g_d(x, cfg);
    let d = d_d(w, cfg.dt);
    let mut next = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        next[i] = f[i] + g[i] * u + d[i];
    }
    next[2] = wrap_angle(next[2]);
    let state = EngagementState::from_array(next);
    if state.r <= 0.0 {
        return Err(Error::RangeCollapsed { state });
    }
    Ok(state)
}

/// Constant-speed, lateral-acceleration-only point-mass update. A stationary
/// agent keeps its heading.
pub fn propagate_agent(agent: &AgentState, lateral_accel: f64, dt: f64) -> AgentState {
    let (vx, vy) = agent.velocity();
    let turn = if agent.speed == 0.0 { 0.0 } else { dt * lateral_accel / agent.speed };
    AgentState {
        x: agent.x + dt * vx,
        y: agent.y + dt * vy,
        theta: wrap_angle(agent.theta + turn),
        speed: agent.speed,
    }
}
