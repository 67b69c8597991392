//! TOML run configuration with a closed key set.
//!
//! ```toml
//! [train]
//! steps = 5000
//! lambda_g = 1000.0
//!
//! [model]
//! resolution = 32
//!
//! [data]
//! synthetic_seed = 0
//! synthetic_n = 10
//!
//! [eval]
//! metrics = ["ppl", "diversity", "modes"]
//! every = 1000
//!
//! [output]
//! dir = "runs/acceptance"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_image_folder, make_synthetic_fewshot, FewShotDataset};
use crate::error::{MixdlError, Result};
use crate::metrics::{EvalSettings, MetricKind};
use crate::models::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable that overrides `output.dir`.
pub const OUTPUT_ENV: &str = "MIXDL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Image folder; when absent a synthetic set is generated.
    pub path: Option<PathBuf>,
    pub synthetic_seed: u64,
    pub synthetic_n: usize,
    /// Must equal `model.resolution` when given.
    pub resolution: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synthetic_seed: 0,
            synthetic_n: 10,
            resolution: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<MetricKind>,
    /// Steps between metric reports during training; 0 reports only at the end.
    pub every: u64,
    /// Steps between snapshot grids; 0 writes only the final one.
    pub snapshot_every: u64,
    pub samples: usize,
    pub ppl_paths: usize,
    pub distance: String,
    pub embedder: String,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        EvalConfig {
            metrics: s.metrics,
            every: 0,
            snapshot_every: 500,
            samples: s.samples,
            ppl_paths: s.ppl_paths,
            distance: s.distance,
            embedder: s.embedder,
            knn_k: s.knn_k,
        }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            metrics: self.metrics.clone(),
            samples: self.samples,
            ppl_paths: self.ppl_paths,
            distance: self.distance.clone(),
            embedder: self.embedder.clone(),
            knn_k: self.knn_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Steps between checkpoints; the final step is always saved.
    pub checkpoint_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/mixdl"),
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| MixdlError::Configuration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data.path` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MixdlError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            MixdlError::Configuration(msg) => {
                MixdlError::Configuration(format!("{}: {msg}", path.display()))
            }
            other => other,
        })?;
        if let (Some(p), Some(base)) = (cfg.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if let Some(r) = self.data.resolution {
            if r != self.model.resolution {
                return Err(MixdlError::Configuration(format!(
                    "data.resolution {r} differs from model.resolution {}",
                    self.model.resolution
                )));
            }
        }
        if self.data.path.is_none() && self.data.synthetic_n == 0 {
            return Err(MixdlError::Configuration("data.synthetic_n must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies a `--seed` override to every seeded component.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self
    }

    /// `MIXDL_OUT` if set, otherwise `output.dir`.
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output.dir.clone())
    }

    pub fn load_dataset(&self) -> Result<FewShotDataset> {
        match &self.data.path {
            Some(p) => load_image_folder(p, self.model.resolution),
            None => make_synthetic_fewshot(
                self.data.synthetic_seed,
                self.data.synthetic_n,
                self.model.resolution,
            ),
        }
    }
}
