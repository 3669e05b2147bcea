//! Run configuration: one TOML file drives model geometry, optimization,
//! and dataset/output locations, with `PCC_*` environment overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf::CrfConfig;
use crate::encoder::EncoderConfig;
use crate::error::{PccError, Result};
use crate::fusion::FusionMode;
use crate::head::ModelSpec;

/// One phase of the learning-rate schedule. `epochs = 0` on the final phase
/// means "all remaining epochs".
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LrPhase {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_schedule: Vec<LrPhase>,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr_schedule: vec![
                LrPhase { epochs: 2, lr: 1e-3 },
                LrPhase { epochs: 0, lr: 1e-4 },
            ],
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() {
            return Err(PccError::config("lr_schedule must have at least one phase"));
        }
        for (i, phase) in self.lr_schedule.iter().enumerate() {
            if phase.lr <= 0.0 || !phase.lr.is_finite() {
                return Err(PccError::config(format!(
                    "lr_schedule phase {i} has non-positive lr {}",
                    phase.lr
                )));
            }
            let is_last = i + 1 == self.lr_schedule.len();
            if phase.epochs == 0 && !is_last {
                return Err(PccError::config(format!(
                    "lr_schedule phase {i} has zero epochs but is not the final phase"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index. Past the end of the
    /// schedule, the final phase's rate applies.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let mut consumed = 0;
        for phase in &self.lr_schedule {
            if phase.epochs == 0 {
                return phase.lr;
            }
            consumed += phase.epochs;
            if epoch < consumed {
                return phase.lr;
            }
        }
        self.lr_schedule.last().expect("validated non-empty").lr
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PathsConfig {
    /// Dataset root in the layout `data::voc::ingest_voc_style` reads.
    pub dataset: PathBuf,
    /// Cluster assignment file; required when fusion_mode = cluster_token.
    pub cluster_map: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    /// Width H of the appended fusion token.
    pub cluster_dim: usize,
    pub fusion_mode: FusionMode,
    /// k for top-k pooling of patch scores.
    pub topk: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub include_background_in_loss: bool,
    /// Force single-worker, fixed-order iteration (parallel batches reduce
    /// in a fixed order anyway, so results match either way).
    pub deterministic: bool,
    /// Apply CRF refinement when generating pseudo labels.
    pub apply_crf: bool,
    pub crf: CrfConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            cluster_dim: 32,
            fusion_mode: FusionMode::ClusterToken,
            topk: 6,
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            max_epochs: 30,
            seed: 0,
            include_background_in_loss: true,
            deterministic: false,
            apply_crf: false,
            crf: CrfConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.optimizer.validate()?;
        self.crf.validate()?;
        if self.batch_size == 0 {
            return Err(PccError::config("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(PccError::config("max_epochs must be positive"));
        }
        if self.cluster_dim == 0 && self.fusion_mode != FusionMode::None {
            return Err(PccError::config("cluster_dim must be positive when a token is appended"));
        }
        if self.topk < 1 || self.topk > self.encoder.num_tokens() {
            return Err(PccError::config(format!(
                "topk {} outside 1..={} patch tokens",
                self.topk,
                self.encoder.num_tokens()
            )));
        }
        if self.fusion_mode == FusionMode::ClusterToken && self.paths.cluster_map.is_none() {
            return Err(PccError::config(
                "fusion_mode = cluster_token requires paths.cluster_map",
            ));
        }
        Ok(())
    }

    /// Check that every path referenced by this run exists (call at run
    /// start, not at parse time, so configs can be written before data).
    pub fn validate_paths(&self) -> Result<()> {
        if !self.paths.dataset.is_dir() {
            return Err(PccError::config(format!(
                "dataset directory {} does not exist",
                self.paths.dataset.display()
            )));
        }
        if let Some(map) = &self.paths.cluster_map {
            if !map.is_file() {
                return Err(PccError::config(format!(
                    "cluster map {} does not exist",
                    map.display()
                )));
            }
        }
        Ok(())
    }

    /// Instantiate the model geometry. The run seed drives parameter
    /// initialization, so one config field controls the whole run.
    pub fn model_spec(&self, num_clusters: usize, num_classes: usize) -> ModelSpec {
        let mut encoder = self.encoder;
        encoder.seed = self.seed;
        ModelSpec {
            encoder,
            cluster_dim: self.cluster_dim,
            fusion_mode: self.fusion_mode,
            num_clusters,
            num_classes,
            topk: self.topk,
            include_background_in_loss: self.include_background_in_loss,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
        cfg.apply_overrides(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let text = toml::to_string_pretty(self).map_err(|e| PccError::format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Apply `PCC_*` overrides from an environment-like iterator. Supported:
    /// PCC_SEED, PCC_MAX_EPOCHS, PCC_BATCH_SIZE, PCC_TOPK, PCC_CLUSTER_DIM,
    /// PCC_FUSION_MODE, PCC_APPLY_CRF, PCC_DETERMINISTIC, PCC_DATASET,
    /// PCC_CLUSTER_MAP, PCC_CHECKPOINTS, PCC_OUTPUTS.
    pub fn apply_overrides<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                PccError::config(format!("cannot parse {key}={value:?}"))
            })
        }
        for (key, value) in vars {
            match key.as_str() {
                "PCC_SEED" => self.seed = parse(&key, &value)?,
                "PCC_MAX_EPOCHS" => self.max_epochs = parse(&key, &value)?,
                "PCC_BATCH_SIZE" => self.batch_size = parse(&key, &value)?,
                "PCC_TOPK" => self.topk = parse(&key, &value)?,
                "PCC_CLUSTER_DIM" => self.cluster_dim = parse(&key, &value)?,
                "PCC_FUSION_MODE" => {
                    self.fusion_mode = match value.as_str() {
                        "none" => FusionMode::None,
                        "class_token" => FusionMode::ClassToken,
                        "cluster_token" => FusionMode::ClusterToken,
                        other => {
                            return Err(PccError::config(format!(
                                "PCC_FUSION_MODE={other:?} is not none|class_token|cluster_token"
                            )))
                        }
                    }
                }
                "PCC_APPLY_CRF" => self.apply_crf = parse(&key, &value)?,
                "PCC_DETERMINISTIC" => self.deterministic = parse(&key, &value)?,
                "PCC_DATASET" => self.paths.dataset = PathBuf::from(value),
                "PCC_CLUSTER_MAP" => self.paths.cluster_map = Some(PathBuf::from(value)),
                "PCC_CHECKPOINTS" => self.paths.checkpoints = PathBuf::from(value),
                "PCC_OUTPUTS" => self.paths.outputs = PathBuf::from(value),
                _ => {}
            }
        }
        Ok(())
    }
}
