//! Run configuration loaded from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gradcheck::GradcheckConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Number of samples generated per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything one command needs. Every section is optional in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter initialisation and epoch shuffling.
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub splits: SplitSizes,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synthetic: SyntheticConfig::default(),
            splits: SplitSizes::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.feature_dim != self.synthetic.feature_dim {
            return Err(Error::Config(format!(
                "model.feature_dim {} differs from synthetic.feature_dim {}",
                self.model.feature_dim, self.synthetic.feature_dim
            )));
        }
        if self.model.vocab_size != self.synthetic.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} differs from synthetic.vocab_size {}",
                self.model.vocab_size, self.synthetic.vocab_size
            )));
        }
        if self.splits.train == 0 {
            return Err(Error::Config("splits.train must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
