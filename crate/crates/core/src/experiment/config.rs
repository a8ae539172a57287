use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::FlowConfig;
use crate::learn::{AdamConfig, OnlineMethod, PretrainConfig};
use crate::ssm::ModelKind;

/// Format version written to and required from every config file.
pub const CONFIG_VERSION: u32 = 1;

/// Which state components enter the RMSE of the tracking task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmseScope {
    Full,
    /// Position and velocity.
    #[default]
    Kinematic,
    Position,
}

impl RmseScope {
    /// Indices of the scored components. Linear Gaussian runs always use the
    /// full state.
    pub fn indices(self, model: ModelKind) -> Vec<usize> {
        let n = match (model, self) {
            (ModelKind::Lgssm { dim }, _) => dim,
            (ModelKind::Tracking, RmseScope::Full) => 5,
            (ModelKind::Tracking, RmseScope::Kinematic) => 4,
            (ModelKind::Tracking, RmseScope::Position) => 2,
        };
        (0..n).collect()
    }
}

/// Initial particle law for online runs and pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Uniform over the per-dimension range of the offline states.
    #[default]
    Hypercube,
    /// `N(0, I)` in model coordinates.
    StandardNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub n_traj: usize,
    pub steps: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
}

fn default_epochs() -> usize {
    PretrainConfig::default().epochs
}

fn default_batch() -> usize {
    16
}

fn default_patience() -> usize {
    5
}

fn default_validation() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSection {
    pub steps: usize,
    /// Online checkpoint interval in windows (0 = none).
    #[serde(default)]
    pub checkpoint_every: usize,
}

/// Everything one experiment needs. Stored as TOML; see `README.md`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelKind,
    pub particles: usize,
    /// Sliding-window length `L`.
    pub window: usize,
    pub lr: f64,
    /// Seeds of the online runs; one trajectory per seed.
    pub seeds: Vec<u64>,
    pub methods: Vec<OnlineMethod>,
    pub out_dir: PathBuf,
    /// Seed of the offline data, standardisation and model initialisation.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub rmse_scope: RmseScope,
    #[serde(default)]
    pub init: InitMode,
    pub pretrain: PretrainSection,
    pub online: OnlineSection,
    #[serde(default)]
    pub flow: FlowConfig,
    /// Load pretrained parameters from here instead of pretraining.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Full-scale settings: 500 × 50 offline trajectories, 5 000 online steps,
    /// 50 seeds.
    pub fn full_scale(model: ModelKind) -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            model,
            particles: 100,
            window: 10,
            lr: 0.005,
            seeds: (0..50).collect(),
            methods: OnlineMethod::ALL.to_vec(),
            out_dir: PathBuf::from("runs").join(Self::slug(model)),
            data_seed: 2024,
            rmse_scope: RmseScope::Kinematic,
            init: InitMode::Hypercube,
            pretrain: PretrainSection {
                n_traj: 500,
                steps: 50,
                epochs: default_epochs(),
                batch_size: default_batch(),
                patience: default_patience(),
                validation_fraction: default_validation(),
            },
            online: OnlineSection {
                steps: 5000,
                checkpoint_every: 0,
            },
            flow: FlowConfig::default(),
            checkpoint: None,
        }
    }

    /// Desk-scale settings: 100 × 50 offline trajectories, 10 seeds, 2 000
    /// online steps for the linear Gaussian model and 1 000 for tracking.
    pub fn desk(model: ModelKind) -> Self {
        let mut c = Self::full_scale(model);
        c.seeds = (0..10).collect();
        c.pretrain.n_traj = 100;
        c.online.steps = match model {
            ModelKind::Lgssm { .. } => 2000,
            ModelKind::Tracking => 1000,
        };
        c
    }

    pub fn slug(model: ModelKind) -> String {
        match model {
            ModelKind::Lgssm { dim } => format!("lgssm-d{dim}"),
            ModelKind::Tracking => "tracking".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.version != CONFIG_VERSION {
            return bad(&format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.particles < 2 {
            return bad("particles must be at least 2");
        }
        if self.window == 0 || self.online.steps == 0 || self.pretrain.steps == 0 {
            return bad("window and step counts must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.checkpoint.is_none() && self.pretrain.n_traj == 0 {
            return bad("pretrain.n_traj must be positive");
        }
        if let ModelKind::Lgssm { dim: 0 } = self.model {
            return bad("lgssm dimension must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            patience: self.pretrain.patience,
            validation_fraction: self.pretrain.validation_fraction,
            adam: self.adam(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoints").join("pretrained.ckpt"))
    }
}
