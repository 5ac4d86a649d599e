//! Single JSON run configuration covering model, training, data and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::GeneratorParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::streaming::DEFAULT_THETA_FLOOR;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding the manifest.
    pub dir: PathBuf,
    pub clips: usize,
    pub seed: u64,
    pub generator: GeneratorParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            clips: 600,
            seed: 0,
            generator: GeneratorParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Output offsets to sweep; 0 reads the newest window position.
    pub deltas: Vec<usize>,
    pub theta_floor: f32,
    /// Share of the test split stitched into the detection video.
    pub stitch_fraction: f64,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            deltas: (0..=23).collect(),
            theta_floor: DEFAULT_THETA_FLOOR,
            stitch_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.data.generator.validate()?;
        if let Some(&d) = self.evaluation.deltas.iter().find(|&&d| d >= self.training.window) {
            return Err(Error::Config(format!(
                "offset {d} does not fit a window of {} frames",
                self.training.window
            )));
        }
        if !(self.evaluation.stitch_fraction > 0.0 && self.evaluation.stitch_fraction <= 1.0) {
            return Err(Error::Config("stitch_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.evaluation.theta_floor) {
            return Err(Error::Config("theta_floor must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Parses and validates; syntax errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// Loads a config file; a relative data directory resolves against the file's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if cfg.data.dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.data.dir = parent.join(&cfg.data.dir);
            }
        }
        Ok(cfg)
    }

    /// Fails unless the dataset directory exists.
    pub fn require_data(&self) -> Result<()> {
        if self.data.dir.is_dir() {
            Ok(())
        } else {
            Err(Error::Data(format!("dataset directory {} does not exist", self.data.dir.display())))
        }
    }
}
