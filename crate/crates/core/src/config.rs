//! JSON run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::RerankConfig;
use crate::matcher::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub top_n: usize,
    pub lambda: f64,
    pub rerank: bool,
    /// Extra checkpoints whose similarity matrices are averaged with the main one.
    pub ensemble: Vec<PathBuf>,
    pub folds: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        let r = RerankConfig::default();
        Self {
            top_n: r.top_n,
            lambda: r.lambda,
            rerank: false,
            ensemble: Vec::new(),
            folds: 1,
        }
    }
}

impl EvalOptions {
    pub fn rerank_config(&self) -> RerankConfig {
        RerankConfig {
            top_n: self.top_n,
            lambda: self.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Dataset directory or manifest path.
    pub dataset: Option<PathBuf>,
    /// Drives model initialisation and batch shuffling.
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: None,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            out: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| {
            Error::Config("no dataset given (use --dataset or the config file)".into())
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.visual().validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.eval.folds == 0 {
            return Err(Error::Config("folds must be ≥ 1".into()));
        }
        Ok(())
    }
}
