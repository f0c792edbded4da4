//! Structured target attack patterns: level flight, coordinated turns and
//! weaves, chained with random switching.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engagement::{propagate_agent, AgentState};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::{self, SimRng};

/// Gravitational acceleration, m/s².
pub const G: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ManeuverKind {
    Level,
    CoordTurnLeft,
    CoordTurnRight,
    Weave,
}

impl ManeuverKind {
    pub const ALL: [ManeuverKind; 4] =
        [Self::Level, Self::CoordTurnLeft, Self::CoordTurnRight, Self::Weave];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Self::Level => 0,
            Self::CoordTurnLeft => 1,
            Self::CoordTurnRight => 2,
            Self::Weave => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverSegment {
    pub kind: ManeuverKind,
    /// Lateral acceleration in multiples of g, zero for level flight.
    pub g_load: f64,
    pub duration_s: f64,
    /// Full sign-flip period of a weave; ignored for other kinds.
    pub weave_period_s: f64,
}

impl ManeuverSegment {
    pub fn level(duration_s: f64) -> Self {
        Self { kind: ManeuverKind::Level, g_load: 0.0, duration_s, weave_period_s: 0.0 }
    }

    pub fn turn_left(g_load: f64, duration_s: f64) -> Self {
        Self { kind: ManeuverKind::CoordTurnLeft, g_load, duration_s, weave_period_s: 0.0 }
    }

    pub fn turn_right(g_load: f64, duration_s: f64) -> Self {
        Self { kind: ManeuverKind::CoordTurnRight, g_load, duration_s, weave_period_s: 0.0 }
    }

    /// Turn specified by heading change instead of duration.
    pub fn turn_by_angle(kind: ManeuverKind, g_load: f64, angle_deg: f64, speed: f64) -> Self {
        let duration_s = angle_deg.to_radians().abs() * speed / (g_load * G);
        Self { kind, g_load, duration_s, weave_period_s: 0.0 }
    }

    pub fn weave(g_load: f64, period_s: f64, duration_s: f64) -> Self {
        Self { kind: ManeuverKind::Weave, g_load, duration_s, weave_period_s: period_s }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=8.0).contains(&self.g_load) {
            return Err(Error::Config(format!("g load {} outside [0, 8]", self.g_load)));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("segment duration must be positive".into()));
        }
        if self.kind == ManeuverKind::Weave && !(self.weave_period_s > 0.0) {
            return Err(Error::Config("weave period must be positive".into()));
        }
        Ok(())
    }

    /// Lateral acceleration `t` seconds into the segment.
    pub fn accel(&self, t: f64) -> f64 {
        let a = self.g_load * G;
        match self.kind {
            ManeuverKind::Level => 0.0,
            ManeuverKind::CoordTurnLeft => a,
            ManeuverKind::CoordTurnRight => -a,
            ManeuverKind::Weave => {
                let half = 0.5 * self.weave_period_s;
                if ((t / half).floor() as i64) % 2 == 0 {
                    a
                } else {
                    -a
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverScript {
    pub segments: Vec<ManeuverSegment>,
    pub initial: AgentState,
}

impl ManeuverScript {
    pub fn new(segments: Vec<ManeuverSegment>, initial: AgentState) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("script has no segments".into()));
        }
        for s in &segments {
            s.validate()?;
        }
        Ok(Self { segments, initial })
    }

    /// Left 4g turn through 70°, 100 m of level flight, then an 8g weave
    /// with a 4 s period until `flight_time_s`.
    pub fn benchmark(initial: AgentState, flight_time_s: f64) -> Self {
        let turn = ManeuverSegment::turn_by_angle(
            ManeuverKind::CoordTurnLeft,
            4.0,
            70.0,
            initial.speed,
        );
        let level = ManeuverSegment::level(100.0 / initial.speed);
        let rest = (flight_time_s - turn.duration_s - level.duration_s).max(1e-9);
        Self {
            segments: vec![turn, level, ManeuverSegment::weave(8.0, 4.0, rest)],
            initial,
        }
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    /// Active segment index and the time elapsed inside it.
    pub fn segment_at(&self, t: f64) -> Result<(usize, f64)> {
        let span = self.total_duration();
        if !(t >= 0.0 && t <= span + 1e-9) {
            return Err(Error::TimeOutOfRange { t, span });
        }
        let mut start = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            let end = start + s.duration_s;
            if t < end || i + 1 == self.segments.len() {
                return Ok((i, t - start));
            }
            start = end;
        }
        unreachable!("non-empty script")
    }

    pub fn lateral_accel_at(&self, t: f64) -> Result<f64> {
        let (i, local) = self.segment_at(t)?;
        Ok(self.segments[i].accel(local))
    }

    pub fn kind_at(&self, t: f64) -> Result<ManeuverKind> {
        let (i, _) = self.segment_at(t)?;
        Ok(self.segments[i].kind)
    }
}

/// Sampling limits for random scripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverLimits {
    pub min_g: f64,
    pub max_g: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_weave_period_s: f64,
    pub max_weave_period_s: f64,
    /// Initial position box `[x_min, x_max] x [y_min, y_max]`, m.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub speed: f64,
}

impl Default for ManeuverLimits {
    fn default() -> Self {
        Self {
            min_g: 0.0,
            max_g: 8.0,
            min_duration_s: 1.5,
            max_duration_s: 6.0,
            min_weave_period_s: 2.0,
            max_weave_period_s: 6.0,
            x_range: (0.0, 2000.0),
            y_range: (0.0, 2000.0),
            speed: 100.0,
        }
    }
}

/// Draws a random script. Each segment kind is equally likely at every
/// switch point; the last segment is truncated at `flight_time_s`.
pub fn sample_script(rng: &mut SimRng, limits: &ManeuverLimits, flight_time_s: f64) -> ManeuverScript {
    let x = rng.random_range(limits.x_range.0..=limits.x_range.1);
    let y = rng.random_range(limits.y_range.0..=limits.y_range.1);
    // heading uniform in (-pi, pi]
    let theta = PI - rng.random::<f64>() * 2.0 * PI;
    let initial = AgentState::new(x, y, theta, limits.speed);

    let mut segments = Vec::new();
    let mut total = 0.0;
    while total < flight_time_s {
        let kind = ManeuverKind::ALL[rng.random_range(0..ManeuverKind::COUNT)];
        let g_load = rng.random_range(limits.min_g..=limits.max_g);
        let mut duration_s = rng.random_range(limits.min_duration_s..=limits.max_duration_s);
        let period = rng.random_range(limits.min_weave_period_s..=limits.max_weave_period_s);
        if total + duration_s > flight_time_s {
            duration_s = flight_time_s - total;
        }
        total += duration_s;
        segments.push(match kind {
            ManeuverKind::Level => ManeuverSegment::level(duration_s),
            ManeuverKind::CoordTurnLeft => ManeuverSegment::turn_left(g_load, duration_s),
            ManeuverKind::CoordTurnRight => ManeuverSegment::turn_right(g_load, duration_s),
            ManeuverKind::Weave => ManeuverSegment::weave(g_load, period, duration_s),
        });
    }
    ManeuverScript { segments, initial }
}

/// One sample of a simulated target flight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSample {
    pub state: AgentState,
    /// Lateral acceleration applied from this sample to the next, m/s².
    pub accel: f64,
    pub kind: ManeuverKind,
}

/// Rolls the constant-speed kinematics over the whole script.
pub fn simulate_target(script: &ManeuverScript, dt: f64) -> Result<Vec<TargetSample>> {
    if !(dt > 0.0) {
        return Err(Error::Config("dt must be positive".into()));
    }
    let span = script.total_duration();
    let steps = (span / dt + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut state = script.initial;
    for k in 0..=steps {
        let t = (k as f64 * dt).min(span);
        let (i, local) = script.segment_at(t)?;
        let seg = &script.segments[i];
        let accel = seg.accel(local);
        out.push(TargetSample { state, accel, kind: seg.kind });
        state = propagate_agent(&state, accel, dt);
    }
    Ok(out)
}

/// Generates `n` random flights; flight `i` uses random stream `i` of `seed`.
pub fn generate_flights(
    n: usize,
    limits: &ManeuverLimits,
    flight_time_s: f64,
    dt: f64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<TargetSample>>> {
    par::map_range(exec, n, |i| {
        let mut rng = rng::stream(seed, i as u64);
        let script = sample_script(&mut rng, limits, flight_time_s);
        simulate_target(&script, dt)
    })
    .into_iter()
    .collect()
}
