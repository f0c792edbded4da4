//! Run configuration: one TOML file, every field optional.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use intercept::dataset::DatasetConfig;
use intercept::engagement::AgentState;
use intercept::guidance::{LawConfig, LawKind};
use intercept::maneuver::{ManeuverLimits, ManeuverScript};
use intercept::predictor::{Architecture, SizePreset, TrainConfig};
use intercept::sim::{McConfig, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub train: TrainSection,
    pub sim: SimSection,
    pub mc: McConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            train: TrainSection::default(),
            sim: SimSection::default(),
            mc: McConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub flights: usize,
    pub duration_s: f64,
    pub dt: f64,
    pub limits: ManeuverLimits,
    pub dataset: DatasetConfig,
    /// Also write a CSV export next to the binary dataset.
    pub csv: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            flights: 500,
            duration_s: 30.0,
            dt: 0.02,
            limits: ManeuverLimits::default(),
            dataset: DatasetConfig::default(),
            csv: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub arch: Architecture,
    pub size: SizePreset,
    pub recurrent_dropout: f64,
    pub dense_dropout: f64,
    /// Dataset to train on; defaults to `<output_dir>/dataset.icds`.
    pub dataset: Option<PathBuf>,
    pub optimizer: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            arch: Architecture::Lstm,
            size: SizePreset::Large,
            recurrent_dropout: 0.2,
            dense_dropout: 0.1,
            dataset: None,
            optimizer: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    pub missile: AgentState,
    /// Initial target state; the target flies the benchmark maneuver.
    pub target: AgentState,
    pub dt: f64,
    pub t_max: f64,
    pub noise: f64,
    pub kill_radius: f64,
    pub guidance: LawConfig,
    pub laws: Vec<LawKind>,
    /// Predictor used by nmpc-tap.
    pub model: Option<PathBuf>,
}

impl Default for SimSection {
    fn default() -> Self {
        let b = Scenario::benchmark(0.05, 0);
        Self {
            missile: b.missile,
            target: b.script.initial,
            dt: b.dt,
            t_max: b.t_max,
            noise: b.noise,
            kill_radius: b.kill_radius,
            guidance: LawConfig::default(),
            laws: LawKind::ALL.to_vec(),
            model: None,
        }
    }
}

impl SimSection {
    pub fn scenario(&self, seed: u64) -> Scenario {
        Scenario {
            missile: self.missile,
            script: ManeuverScript::benchmark(self.target, self.t_max),
            dt: self.dt,
            t_max: self.t_max,
            noise: self.noise,
            seed,
            kill_radius: self.kill_radius,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    /// Writes the effective configuration to `<output_dir>/<command>.config.toml`.
    pub fn echo(&self, command: &str) -> Result<PathBuf> {
        let path = self.output_dir.join(format!("{command}.config.toml"));
        let text = toml::to_string_pretty(self).context("serializing config")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.train.dataset.clone().unwrap_or_else(|| self.output_dir.join("dataset.icds"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.sim.guidance.mpc.u_max, 25.0 * 9.81);
        assert_eq!(c.sim.guidance.mpc.du_max, 0.025 * 25.0 * 9.81);
        assert_eq!(c.sim.guidance.mpc.q, [0.0, 0.0, 0.0, 100.0]);
        assert_eq!(c.sim.guidance.mpc.dt, 0.02);
        assert_eq!(c.sim.guidance.n_prime, 3.0);
        assert_eq!(c.data.flights, 500);
        assert_eq!(c.data.duration_s, 30.0);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.sim.guidance.mpc.heading_speed = None;
        c.seed = 99;
        c.train.dataset = Some("x/y.icds".into());
        let text = toml::to_string_pretty(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_overrides_only_named_fields() {
        let c: RunConfig = toml::from_str("seed = 5\n[sim.guidance.mpc]\nn_p = 10\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.sim.guidance.mpc.n_p, 10);
        assert_eq!(c.sim.guidance.mpc.n_c, 40);
        assert_eq!(c.sim.noise, 0.05);
    }
}
