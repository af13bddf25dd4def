//! Experiment configuration, read from JSON. Unknown keys are rejected at
//! every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel_sim::{SimConfig, TrajectoryParams};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{FusionKind, InputMode, ModelSpec};
use crate::posnet::PosNetConfig;
use crate::probmap::{Grid, GridConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write one map CSV per evaluated sample.
    pub dump_maps: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            dump_maps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub trajectory: TrajectoryParams,
    pub num_train: usize,
    pub num_test: usize,
    pub grid: GridConfig,
    pub mode: InputMode,
    pub fusion: FusionKind,
    pub fusion_config: FusionConfig,
    pub posnet: PosNetConfig,
    pub train: TrainConfig,
    /// Seeds of the replication matrix.
    pub seeds: Vec<u64>,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale preset: 4 antennas, 16 subcarriers, 8x8 grid on 4x4 m,
    /// impairments on.
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig {
                num_subcarriers: 16,
                ..SimConfig::default()
            },
            trajectory: TrajectoryParams::default(),
            num_train: 20_000,
            num_test: 2_000,
            grid: GridConfig::default(),
            mode: InputMode::Learned,
            fusion: FusionKind::None,
            fusion_config: FusionConfig::default(),
            posnet: PosNetConfig::default(),
            train: TrainConfig {
                epochs: 40,
                fusion_epochs: 10,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-size dimensions: 234 subcarriers, a 22x22 grid (K = 484) and the
    /// wide positioning network.
    pub fn full_scale() -> Self {
        let d = ExperimentConfig::default();
        ExperimentConfig {
            sim: SimConfig {
                num_subcarriers: 234,
                ..d.sim
            },
            grid: GridConfig {
                rows: 22,
                cols: 22,
                ..d.grid
            },
            trajectory: TrajectoryParams {
                region_min: [0.1; 2],
                region_max: [3.9; 2],
                ..d.trajectory
            },
            posnet: PosNetConfig::full_scale(),
            train: TrainConfig::default(),
            ..d
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Applies a master seed to both simulation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.trajectory.validate(&self.sim)?;
        self.posnet.validate()?;
        self.train.validate()?;
        let grid = Grid::new(self.grid)?;
        if self.grid.width != self.sim.area[0] || self.grid.height != self.sim.area[1] {
            return Err(Error::Config(format!(
                "grid area {}x{} differs from simulated area {:?}",
                self.grid.width, self.grid.height, self.sim.area
            )));
        }
        let (lo, hi) = grid.hull();
        if (0..2).any(|d| self.trajectory.region_min[d] < lo[d] - 1e-12 || self.trajectory.region_max[d] > hi[d] + 1e-12) {
            return Err(Error::Config(format!(
                "trajectory region {:?}..{:?} leaves the grid hull {lo:?}..{hi:?}",
                self.trajectory.region_min, self.trajectory.region_max
            )));
        }
        if self.num_train == 0 || self.num_test == 0 {
            return Err(Error::Config("num_train and num_test must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self, mode: InputMode, fusion: FusionKind) -> ModelSpec {
        ModelSpec {
            m_r: self.sim.num_antennas,
            w: self.sim.num_subcarriers,
            mode,
            fusion,
            fusion_cfg: self.fusion_config,
            grid: self.grid,
            posnet: self.posnet.clone(),
        }
    }

    /// Earlier samples every evaluated target must have, so that all fusion
    /// variants are scored on the same records.
    pub fn common_history(&self) -> usize {
        (self.fusion_config.tau + 1) * (self.fusion_config.delta + 1) - 1
    }
}
