//! Run configuration, read from TOML. Command-line flags override the file,
//! which overrides the built-in defaults.
//!
//! ```toml
//! seed = 0
//! workers = 0
//! variants = ["pretrained", "ours", "random"]
//!
//! [dataset]
//! noise_scale = 0.25
//!
//! [eval]
//! ks = [5, 10]
//!
//! [eval.finetune]
//! lr = 0.01
//! ```
//!
//! The top-level `seed` is copied into the dataset and evaluation sections
//! and also seeds pre-training.

use std::path::{Path, PathBuf};

use gafl_core::eval::SweepParam;
use gafl_core::{EvalConfig, PretrainConfig, SyntheticConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::artifact::{config_hash, ArtifactMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub masked_persons: Vec<usize>,
    pub extra_factor: Vec<usize>,
    /// Overrides `eval.trials_per_class` for sweep runs.
    pub trials_per_class: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { masked_persons: (1..=6).collect(), extra_factor: (2..=5).collect(), trials_per_class: None }
    }
}

impl SweepConfig {
    pub fn grid(&self) -> Vec<(SweepParam, usize)> {
        let nv = self.masked_persons.iter().map(|&v| (SweepParam::MaskedPersons, v));
        nv.chain(self.extra_factor.iter().map(|&v| (SweepParam::ExtraFactor, v))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, data_dir: PathBuf::from("gafl-data") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    /// Protocol worker threads; 0 means one per core.
    pub workers: usize,
    pub variants: Vec<Variant>,
    pub dataset: SyntheticConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub serve: ServeConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            variants: Variant::ALL.to_vec(),
            dataset: SyntheticConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            Error::Parse {
                path: origin.to_path_buf(),
                line: text[..offset.min(text.len())].matches('\n').count() + 1,
                offset,
                message: e.message().to_string(),
            }
        })
    }

    /// Defaults, or the file at `path` layered over them.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text, p)
            }
        }
    }

    /// Propagates the top-level seed into the sections that carry one.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.pretrain.validate()?;
        self.eval.validate()?;
        if self.variants.is_empty() {
            return Err(Error::Invalid("variants must not be empty".into()));
        }
        if self.sweep.masked_persons.is_empty() && self.sweep.extra_factor.is_empty() {
            return Err(Error::Invalid("the sweep grid is empty".into()));
        }
        if self.sweep.extra_factor.contains(&0) {
            return Err(Error::Invalid("sweep.extra_factor values must be positive".into()));
        }
        if self.sweep.trials_per_class == Some(0) {
            return Err(Error::Invalid("sweep.trials_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Evaluation settings used for sweeps.
    pub fn sweep_eval(&self) -> EvalConfig {
        let mut cfg = self.eval.clone();
        if let Some(t) = self.sweep.trials_per_class {
            cfg.trials_per_class = t;
        }
        cfg
    }

    /// Hash over everything that influences results; worker count and
    /// serving options are left out.
    pub fn reproducibility_hash(&self) -> String {
        config_hash(&serde_json::json!({
            "seed": self.seed,
            "variants": self.variants,
            "dataset": self.dataset,
            "pretrain": self.pretrain,
            "eval": self.eval,
            "sweep": self.sweep,
        }))
    }

    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta::new(self.seed, self.reproducibility_hash())
    }
}
