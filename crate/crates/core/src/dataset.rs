//! Windowed, noise-injected, min-max scaled training data for the
//! acceleration predictor.
//!
//! A window ends at simulation step `e`. Its history holds `n_history`
//! feature vectors `[x, y, v_x, v_y]` sampled every `stride` steps up to and
//! including `e`; its labels are the target lateral accelerations at
//! `e + j * stride` for `j = 0..horizon`.
//!
//! # File layout
//!
//! All integers are little-endian `u64`, all reals little-endian `f64`.
//!
//! ```text
//! magic        8 bytes  "ICDSET01"
//! n_history, horizon, stride        u64 x3
//! dt, noise_sigma, a_max            f64 x3
//! seed                              u64
//! scaler min[4], scaler max[4]      f64 x8
//! n_train, n_val, n_test            u64 x3
//! rows (train, then val, then test):
//!   label                           u64 (maneuver kind index)
//!   history                         f64 x (n_history * 4), row-major, scaled
//!   labels                          f64 x horizon, scaled
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maneuver::{ManeuverKind, TargetSample, G};
use crate::rng::SimRng;

pub const FEATURE_DIM: usize = 4;
pub type Feature = [f64; FEATURE_DIM];

const MAGIC: &[u8; 8] = b"ICDSET01";

pub fn features_of(s: &TargetSample) -> Feature {
    let (vx, vy) = s.state.velocity();
    [s.state.x, s.state.y, vx, vy]
}

/// Per-feature min-max scaling onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Feature,
    pub max: Feature,
}

impl MinMaxScaler {
    pub fn identity() -> Self {
        Self { min: [0.0; FEATURE_DIM], max: [1.0; FEATURE_DIM] }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a Feature>) -> Self {
        let mut min = [f64::INFINITY; FEATURE_DIM];
        let mut max = [f64::NEG_INFINITY; FEATURE_DIM];
        for r in rows {
            for i in 0..FEATURE_DIM {
                min[i] = min[i].min(r[i]);
                max[i] = max[i].max(r[i]);
            }
        }
        for i in 0..FEATURE_DIM {
            if !min[i].is_finite() || !max[i].is_finite() {
                min[i] = 0.0;
                max[i] = 1.0;
            } else if max[i] <= min[i] {
                max[i] = min[i] + 1.0;
            }
        }
        Self { min, max }
    }

    pub fn range(&self) -> Feature {
        std::array::from_fn(|i| self.max[i] - self.min[i])
    }

    pub fn scale(&self, f: &Feature) -> Feature {
        std::array::from_fn(|i| (f[i] - self.min[i]) / (self.max[i] - self.min[i]))
    }

    pub fn unscale(&self, f: &Feature) -> Feature {
        std::array::from_fn(|i| f[i] * (self.max[i] - self.min[i]) + self.min[i])
    }
}

/// Maps accelerations in `[-a_max, a_max]` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelScaler {
    pub a_max: f64,
}

impl Default for AccelScaler {
    fn default() -> Self {
        Self { a_max: 8.0 * G }
    }
}

impl AccelScaler {
    pub fn scale(&self, a: f64) -> f64 {
        (a + self.a_max) / (2.0 * self.a_max)
    }

    pub fn unscale(&self, s: f64) -> f64 {
        s * 2.0 * self.a_max - self.a_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub history: Vec<Feature>,
    pub future_accel: Vec<f64>,
    pub label: ManeuverKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub n_history: usize,
    pub horizon: usize,
    /// Simulation steps between consecutive window samples.
    pub stride: usize,
    /// Simulation step, s.
    pub dt: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { n_history: 10, horizon: 5, stride: 10, dt: 0.02 }
    }
}

impl WindowConfig {
    /// Time between window samples, s.
    pub fn sample_dt(&self) -> f64 {
        self.stride as f64 * self.dt
    }

    pub fn history_span_s(&self) -> f64 {
        (self.n_history - 1) as f64 * self.sample_dt()
    }

    /// Simulation steps covered by one window, history plus labels.
    pub fn steps_needed(&self) -> usize {
        (self.n_history - 1 + self.horizon - 1) * self.stride + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub window: WindowConfig,
    pub windows_per_flight: usize,
    /// Noise std as a fraction of each feature's training range.
    pub noise_sigma: f64,
    pub accel: AccelScaler,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            windows_per_flight: 100,
            noise_sigma: 0.01,
            accel: AccelScaler::default(),
            seed: 1,
        }
    }
}

/// Scaled dataset with its train/validation/test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub window: WindowConfig,
    pub train: Vec<TrajectorySample>,
    pub val: Vec<TrajectorySample>,
    pub test: Vec<TrajectorySample>,
    pub scaler: MinMaxScaler,
    pub accel: AccelScaler,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts a raw (unscaled, noiseless) window ending at step `end`.
pub fn raw_window(traj: &[TargetSample], end: usize, w: &WindowConfig) -> Option<TrajectorySample> {
    let back = (w.n_history - 1) * w.stride;
    let fwd = (w.horizon - 1) * w.stride;
    if end < back || end + fwd >= traj.len() {
        return None;
    }
    let history = (0..w.n_history).map(|i| features_of(&traj[end - back + i * w.stride])).collect();
    let future_accel = (0..w.horizon).map(|j| traj[end + j * w.stride].accel).collect();
    Some(TrajectorySample { history, future_accel, label: traj[end].kind })
}

/// Builds the partitioned dataset.
///
/// Window ends are drawn without replacement within each flight, all windows
/// are shuffled and split 60/20/20. Gaussian noise with per-feature std
/// `noise_sigma * range` (range over the clean training windows) is added
/// before fitting the min-max scaler on the noisy training windows.
pub fn build_dataset(
    trajectories: &[Vec<TargetSample>],
    cfg: &DatasetConfig,
    rng: &mut SimRng,
) -> Result<Dataset> {
    let w = &cfg.window;
    if w.n_history == 0 || w.horizon == 0 || w.stride == 0 || !(w.dt > 0.0) {
        return Err(Error::Config("window sizes and dt must be positive".into()));
    }
    if w.n_history as f64 * w.sample_dt() < 2.0 - 1e-9 {
        return Err(Error::Config(format!(
            "observation history of {} samples x {} s is shorter than 2 s",
            w.n_history,
            w.sample_dt()
        )));
    }
    let need = w.steps_needed();
    let first_end = (w.n_history - 1) * w.stride;
    let mut windows = Vec::new();
    for traj in trajectories {
        if traj.len() < need {
            return Err(Error::TrajectoryTooShort { len: traj.len(), need });
        }
        let candidates = traj.len() - need + 1;
        let take = cfg.windows_per_flight.min(candidates);
        let mut picks = index::sample(rng, candidates, take).into_vec();
        picks.sort_unstable();
        for p in picks {
            windows.push(raw_window(traj, first_end + p, w).expect("index within bounds"));
        }
    }
    windows.shuffle(rng);

    let n = windows.len();
    let n_train = (0.6 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;

    let clean = MinMaxScaler::fit(windows[..n_train].iter().flat_map(|s| s.history.iter()));
    let range = clean.range();
    if cfg.noise_sigma > 0.0 {
        let normals: Vec<Normal<f64>> = range
            .iter()
            .map(|r| Normal::new(0.0, cfg.noise_sigma * r).expect("finite std"))
            .collect();
        for s in &mut windows {
            for f in &mut s.history {
                for i in 0..FEATURE_DIM {
                    f[i] += normals[i].sample(rng);
                }
            }
        }
    }
    let scaler = MinMaxScaler::fit(windows[..n_train].iter().flat_map(|s| s.history.iter()));
    for s in &mut windows {
        for f in &mut s.history {
            *f = scaler.scale(f);
        }
        for a in &mut s.future_accel {
            *a = cfg.accel.scale(*a);
        }
    }
    let test = windows.split_off(n_train + n_val);
    let val = windows.split_off(n_train);
    Ok(Dataset {
        window: w.clone(),
        train: windows,
        val,
        test,
        scaler,
        accel: cfg.accel,
        noise_sigma: cfg.noise_sigma,
        seed: cfg.seed,
    })
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let w = &ds.window;
    for v in [w.n_history, w.horizon, w.stride] {
        put_u64(&mut out, v as u64)?;
    }
    for v in [w.dt, ds.noise_sigma, ds.accel.a_max] {
        put_f64(&mut out, v)?;
    }
    put_u64(&mut out, ds.seed)?;
    for v in ds.scaler.min.iter().chain(ds.scaler.max.iter()) {
        put_f64(&mut out, *v)?;
    }
    for part in [&ds.train, &ds.val, &ds.test] {
        put_u64(&mut out, part.len() as u64)?;
    }
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        put_u64(&mut out, s.label.index() as u64)?;
        for f in &s.history {
            for v in f {
                put_f64(&mut out, *v)?;
            }
        }
        for v in &s.future_accel {
            put_f64(&mut out, *v)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let n_history = get_u64(&mut r)? as usize;
    let horizon = get_u64(&mut r)? as usize;
    let stride = get_u64(&mut r)? as usize;
    let dt = get_f64(&mut r)?;
    let noise_sigma = get_f64(&mut r)?;
    let a_max = get_f64(&mut r)?;
    let seed = get_u64(&mut r)?;
    let mut mm = [0.0; 2 * FEATURE_DIM];
    for v in &mut mm {
        *v = get_f64(&mut r)?;
    }
    let counts = [get_u64(&mut r)?, get_u64(&mut r)?, get_u64(&mut r)?];
    let mut parts: [Vec<TrajectorySample>; 3] = Default::default();
    for (part, &count) in parts.iter_mut().zip(&counts) {
        for _ in 0..count {
            let label = ManeuverKind::from_index(get_u64(&mut r)? as usize)
                .ok_or_else(|| Error::Format("bad maneuver label".into()))?;
            let mut history = Vec::with_capacity(n_history);
            for _ in 0..n_history {
                let mut f = [0.0; FEATURE_DIM];
                for v in &mut f {
                    *v = get_f64(&mut r)?;
                }
                history.push(f);
            }
            let future_accel = (0..horizon).map(|_| get_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            part.push(TrajectorySample { history, future_accel, label });
        }
    }
    let [train, val, test] = parts;
    Ok(Dataset {
        window: WindowConfig { n_history, horizon, stride, dt },
        train,
        val,
        test,
        scaler: MinMaxScaler {
            min: mm[..FEATURE_DIM].try_into().expect("4 entries"),
            max: mm[FEATURE_DIM..].try_into().expect("4 entries"),
        },
        accel: AccelScaler { a_max },
        noise_sigma,
        seed,
    })
}

/// Flat CSV for inspection: one row per window, scaled values.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let w = &ds.window;
    let mut header = vec!["partition".to_string(), "label".to_string()];
    for i in 0..w.n_history {
        for name in ["x", "y", "vx", "vy"] {
            header.push(format!("{name}_{i}"));
        }
    }
    for j in 0..w.horizon {
        header.push(format!("a_{j}"));
    }
    writeln!(out, "{}", header.join(","))?;
    for (name, part) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for s in part {
            let mut row = vec![name.to_string(), format!("{:?}", s.label)];
            row.extend(s.history.iter().flatten().map(|v| v.to_string()));
            row.extend(s.future_accel.iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engagement::AgentState;
    use crate::maneuver::{simulate_target, ManeuverScript, ManeuverSegment};
    use crate::rng;

    fn flight() -> Vec<TargetSample> {
        let s = ManeuverScript::new(
            vec![ManeuverSegment::turn_left(3.0, 4.0), ManeuverSegment::weave(6.0, 3.0, 6.0)],
            AgentState::new(100.0, 200.0, 0.3, 100.0),
        )
        .unwrap();
        simulate_target(&s, 0.02).unwrap()
    }

    #[test]
    fn raw_window_alignment() {
        let tr = flight();
        let w = WindowConfig { n_history: 20, horizon: 10, stride: 5, dt: 0.02 };
        let s = raw_window(&tr, 95, &w).unwrap();
        assert_eq!(s.history.len(), 20);
        assert_eq!(s.history[19], features_of(&tr[95]));
        assert_eq!(s.history[0], features_of(&tr[0]));
        assert_eq!(s.future_accel[3], tr[110].accel);
        assert!(raw_window(&tr, 94, &w).is_none());
    }

    #[test]
    fn short_history_rejected() {
        let cfg = DatasetConfig {
            window: WindowConfig { n_history: 9, ..WindowConfig::default() },
            ..DatasetConfig::default()
        };
        let r = build_dataset(&[flight()], &cfg, &mut rng::seeded(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn short_trajectory_rejected() {
        let tr = flight();
        let r = build_dataset(&[tr[..100].to_vec()], &DatasetConfig::default(), &mut rng::seeded(0));
        assert!(matches!(r, Err(Error::TrajectoryTooShort { .. })));
    }

    #[test]
    fn noiseless_features_unscale_to_raw() {
        let tr = flight();
        let cfg = DatasetConfig { noise_sigma: 0.0, windows_per_flight: 20, ..Default::default() };
        let ds = build_dataset(&[tr.clone()], &cfg, &mut rng::seeded(3)).unwrap();
        let raw: Vec<TrajectorySample> = (0..tr.len()).filter_map(|e| raw_window(&tr, e, &cfg.window)).collect();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let h: Vec<Feature> = s.history.iter().map(|f| ds.scaler.unscale(f)).collect();
            let m = raw.iter().find(|r| {
                r.history.iter().zip(&h).all(|(a, b)| (0..4).all(|i| (a[i] - b[i]).abs() < 1e-9))
            });
            assert!(m.is_some());
        }
        let id = MinMaxScaler::identity();
        assert_eq!(id.scale(&[0.25, 3.0, -1.0, 0.5]), [0.25, 3.0, -1.0, 0.5]);
    }

    #[test]
    fn accel_scaler_maps_limits() {
        let s = AccelScaler { a_max: 25.0 };
        assert_eq!(s.scale(-25.0), 0.0);
        assert_eq!(s.scale(25.0), 1.0);
        assert_eq!(s.scale(0.0), 0.5);
        assert!((s.unscale(s.scale(13.7)) - 13.7).abs() < 1e-12);
    }
}
