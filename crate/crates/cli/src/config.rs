//! The flat run configuration file.
//!
//! Every key has a default; `qcnn train --dump-default-config` prints them
//! all. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use qcnn_core::noise::{Insertion, NoiseConfig};
use qcnn_core::training::TrainConfig;
use qcnn_core::{GradMode, LossKind, Mode, QcnnConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable naming the directory that holds `mnist/` and `fmnist/`.
pub const DATA_DIR_ENV: &str = "QCNN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name used for output files; empty means derived from the config hash.
    pub run_id: String,
    /// `mnist` or `fmnist`.
    pub dataset: String,
    /// Directory with the IDX files; empty means `$QCNN_DATA_DIR/<dataset>`
    /// or `data/<dataset>`.
    pub data_dir: String,
    pub out_dir: String,

    /// `linear`, `nonlinear`, `baseline_order1` or `baseline_order2`.
    pub mode: String,
    pub num_layers: usize,
    /// Qubits per layer; empty means the mode's defaults.
    pub layer_subsets: Vec<Vec<usize>>,
    /// `cross_entropy` or `mean_squared`.
    pub loss: String,
    pub use_bias: bool,

    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// `straight_through` or `exact_svd`.
    pub grad_mode: String,
    pub train_eval_size: usize,
    pub full_train_eval: bool,
    /// Write elapsed seconds into the metrics CSV (makes it run-dependent).
    pub wall_clock: bool,

    pub noise_p: f64,
    pub noise_gamma: f64,
    /// `after_each_layer` or `after_encoding_and_layers`.
    pub noise_insertion: String,
    pub noise_trajectories: usize,
    pub noise_seed: u64,

    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let noise = NoiseConfig::default();
        Self {
            run_id: String::new(),
            dataset: "mnist".into(),
            data_dir: String::new(),
            out_dir: "runs".into(),
            mode: "linear".into(),
            num_layers: 1,
            layer_subsets: Vec::new(),
            loss: LossKind::CrossEntropy.as_str().into(),
            use_bias: true,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            batch_size: train.batch_size,
            max_iterations: train.max_iterations,
            eval_every: train.eval_every,
            seed: train.seed,
            grad_mode: train.grad_mode.to_string(),
            train_eval_size: train.train_eval_size,
            full_train_eval: train.full_train_eval,
            wall_clock: false,
            noise_p: noise.p_depolarizing,
            noise_gamma: noise.gamma_phase_damping,
            noise_insertion: noise.insertion.as_str().into(),
            noise_trajectories: noise.trajectories,
            noise_seed: noise.seed,
            workers: 1,
        }
    }
}

fn invalid(e: qcnn_core::Error) -> CliError {
    CliError::config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !matches!(self.dataset.as_str(), "mnist" | "fmnist") {
            return Err(CliError::config(format!("dataset must be mnist or fmnist, got `{}`", self.dataset)));
        }
        self.qcnn()?.validate().map_err(invalid)?;
        self.train()?.validate().map_err(invalid)?;
        self.noise()?.validate().map_err(invalid)?;
        Ok(())
    }

    pub fn qcnn(&self) -> Result<QcnnConfig, CliError> {
        let mode: Mode = self.mode.parse().map_err(invalid)?;
        let layers = if mode.is_baseline() { 0 } else { self.num_layers };
        let mut cfg = QcnnConfig::new(mode, layers);
        if !self.layer_subsets.is_empty() {
            cfg.layer_subsets = self.layer_subsets.clone();
        }
        cfg.loss = self.loss.parse().map_err(invalid)?;
        cfg.use_bias = self.use_bias;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let grad_mode: GradMode = self.grad_mode.parse().map_err(invalid)?;
        Ok(TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_iterations: self.max_iterations,
            eval_every: self.eval_every,
            seed: self.seed,
            grad_mode,
            train_eval_size: self.train_eval_size,
            full_train_eval: self.full_train_eval,
            wall_clock: self.wall_clock,
            workers: self.workers,
        })
    }

    pub fn noise(&self) -> Result<NoiseConfig, CliError> {
        let insertion: Insertion = self.noise_insertion.parse().map_err(invalid)?;
        Ok(NoiseConfig {
            p_depolarizing: self.noise_p,
            gamma_phase_damping: self.noise_gamma,
            insertion,
            trajectories: self.noise_trajectories,
            seed: self.noise_seed,
        })
    }

    /// Hash of everything that can change results. Paths, the run id and
    /// the worker count are excluded.
    pub fn hash(&self) -> String {
        let canonical = Self {
            run_id: String::new(),
            data_dir: String::new(),
            out_dir: String::new(),
            workers: 0,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn resolved_run_id(&self) -> String {
        if !self.run_id.is_empty() {
            return self.run_id.clone();
        }
        let layers = if self.mode.starts_with("baseline") {
            String::new()
        } else {
            format!("-{}l", self.num_layers)
        };
        format!("{}-{}{}-{}", self.dataset, self.mode, layers, self.hash())
    }

    pub fn resolved_data_dir(&self) -> PathBuf {
        if !self.data_dir.is_empty() {
            return PathBuf::from(&self.data_dir);
        }
        default_data_root().join(&self.dataset)
    }
}

pub fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}
