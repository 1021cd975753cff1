//! The single JSON run configuration shared by every command, with one
//! section per module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Result, XitError};
use crate::mixup::MixupConfig;
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::train::{FinetuneConfig, PretrainConfig, PretrainSettings};

/// File name of the effective configuration written into each output
/// directory.
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Datasets whose longest series exceeds this are left out of the pool.
    pub max_length: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Collection manifest for pretraining. Relative paths resolve against
    /// the config file's directory.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub mixup: MixupConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            output_dir: PathBuf::from("xit-out"),
            seed: 0,
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            mixup: MixupConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            XitError::Config {
                key: if key == "." { "<root>".into() } else { key },
                message: e.into_inner().to_string(),
            }
        })
    }

    /// Reads a config file and resolves a relative manifest path against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| XitError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.manifest = Some(base.join(m));
            }
        }
        Ok(cfg)
    }

    /// Checks every section that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if self.data.max_length == Some(0) {
            return Err(XitError::Config {
                key: "data.max_length".into(),
                message: "must be positive".into(),
            });
        }
        self.pretrain_settings().validate()?;
        self.finetune.validate()
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            train: self.train.clone(),
            augment: self.augment.clone(),
            mixup: self.mixup.clone(),
            loss: self.loss.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes the effective configuration into `dir` and returns its path.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| XitError::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_json()?).map_err(|e| XitError::io(&path, e))?;
        Ok(path)
    }
}
