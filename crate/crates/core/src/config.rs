//! JSON run configuration shared by every CLI command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchSettings;
use crate::data::DatasetSpec;
use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

/// Everything a command needs. Missing fields take their defaults, unknown
/// fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub data: DataPaths,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
    /// Scenes generated per split when no dataset file is given.
    pub n_train: usize,
    pub n_val: usize,
    /// Seeds used by `compare`.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
            data: DataPaths::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            bench: BenchSettings::default(),
            n_train: 2000,
            n_val: 400,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks every constraint that does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.eval.conf_threshold) || !in_unit(self.eval.nms_iou) || !in_unit(self.eval.match_iou) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        if self.dataset.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "dataset image size {} differs from model image size {}",
                self.dataset.image_size, self.model.image_size
            )));
        }
        if self.dataset.finest_stride != self.model.stride(0) {
            return Err(Error::Config("dataset finest stride must equal the model's finest stride".into()));
        }
        if self.seeds.is_empty() || self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("seeds, n_train and n_val must be non-empty".into()));
        }
        if self.bench.n_images == 0 || self.bench.repeats == 0 {
            return Err(Error::Config("bench needs positive n_images and repeats".into()));
        }
        Ok(())
    }

    /// Checks that configured dataset files exist.
    pub fn validate_paths(&self) -> Result<()> {
        for p in [&self.data.train, &self.data.val].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Data(format!("dataset file {} not found", p.display())));
            }
        }
        Ok(())
    }
}
