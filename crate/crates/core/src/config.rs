//! TOML run configuration. Every section is optional and unknown keys are
//! rejected.
//!
//! ```toml
//! baseline = "H"
//! [model]
//! image_filters = 16
//! [attention]
//! n_channels = 10
//! [train]
//! lambda_1 = 100.0
//! [augment]
//! flip_prob = 0.5
//! [run]
//! steps = 500
//! batch_size = 4
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::TrainConfig;
use crate::model::{build_ablation, AblationSpec, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Total optimisation steps; `epochs` takes precedence when set.
    pub steps: u64,
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub checkpoint_every: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            epochs: None,
            batch_size: 4,
            checkpoint_every: Some(100),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub baseline: char,
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub train: TrainConfig,
    /// Augmentation; disabled when the section is absent.
    pub augment: Option<AugmentConfig>,
    pub run: RunConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            baseline: 'H',
            model: ModelConfig::default(),
            attention: AttentionConfig::default(),
            train: TrainConfig::default(),
            augment: None,
            run: RunConfig::default(),
        }
    }
}

impl FileConfig {
    /// Small widths that train in minutes on one CPU core at 64x64.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                image_filters: 16,
                semantic_filters: 4,
                disc_filters: 16,
                depth: None,
                init_std: 0.02,
            },
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: FileConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn wiring(&self) -> Result<AblationSpec> {
        build_ablation(self.baseline)
    }

    pub fn validate(&self) -> Result<()> {
        self.wiring()?;
        self.attention.validate()?;
        self.train.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if self.run.batch_size == 0 {
            return Err(Error::Config("run.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}
