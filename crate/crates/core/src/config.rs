//! Run configuration file (JSON).
//!
//! ```json
//! {
//!   "dataset": { ... },   // optional, see DatasetConfig
//!   "model":   { "arch": "ushape", "num_blocks": 3, "block_channels": [8, 16, 32] },
//!   "train":   { ... },   // optional, see TrainConfig
//!   "output":  { "directory": "runs", "formats": ["csv", "json", "markdown"] }
//! }
//! ```
//!
//! Only `model.arch`, `model.num_blocks` and `model.block_channels` are
//! required. Unknown keys are rejected, and every error names its key path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ModelConfig;
use crate::data::{DatasetConfig, NUM_FG_CLASSES};
use crate::error::{Error, Result};
use crate::train::{AblationSetup, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Markdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Used when the command line gives no `--out`.
    pub directory: String,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: "runs".into(),
            formats: vec![OutputFormat::Csv, OutputFormat::Json, OutputFormat::Markdown],
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn nested(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { path, msg } => Error::Config {
            path: format!("{prefix}.{path}"),
            msg,
        },
        other => other,
    })
}

impl RunConfigFile {
    pub fn validate(&self) -> Result<()> {
        nested("dataset", self.dataset.validate())?;
        nested("model", self.model.validate())?;
        nested("train", self.train.validate())?;
        if self.model.input_size != [self.dataset.height, self.dataset.width] {
            return Err(Error::config(
                "model.input_size",
                format!(
                    "{:?} differs from the dataset's {}x{}",
                    self.model.input_size, self.dataset.height, self.dataset.width
                ),
            ));
        }
        if self.model.cls_classes != NUM_FG_CLASSES {
            return Err(Error::config(
                "model.cls_classes",
                format!("the shapes dataset has {NUM_FG_CLASSES} foreground classes"),
            ));
        }
        if self.train.batch_size > self.dataset.count {
            return Err(Error::config(
                "train.batch_size",
                format!("exceeds dataset.count ({})", self.dataset.count),
            ));
        }
        Ok(())
    }

    /// Parses and validates JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { "<root>".into() } else { path },
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn ablation_setup(&self) -> AblationSetup {
        AblationSetup {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }
}

/// Reads, parses and validates a run configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    RunConfigFile::from_json(&text)
}
