//! Pipeline configuration file. Every key is optional; command-line flags
//! take precedence over file values, which take precedence over defaults.
//!
//! ```toml
//! seed = 42
//!
//! [paths]
//! slides = "data/slides"
//! masks = "data/masks"
//! cache = "work/cache"
//! queues = "work/queues"
//! out = "work"
//!
//! [tiling]
//! patch_size = 224
//! min_coverage = 0.5
//!
//! [embedder]
//! backend = "mock"        # or "remote"
//! dim = 1024
//! normalize = true
//! remote_url = "http://127.0.0.1:9000"
//! batch_size = 64
//! max_in_flight = 4
//! retry_budget = 3
//!
//! [index]
//! metric = "cosine"       # or "l2"
//!
//! [curation]
//! k_per_seed = 50
//! cap = 20000
//!
//! [split]
//! ratio = 0.8
//!
//! [context]
//! grid = 5
//! pad_value = 255
//!
//! [head]                  # transformer head, see HeadConfig
//! hidden = 128
//!
//! [train]                 # see TrainConfig
//! epochs = 10
//!
//! [serve]
//! host = "127.0.0.1"
//! port = 8080
//! lease_ttl_secs = 120
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spider_core::curation::{DEFAULT_CAP, DEFAULT_K_PER_SEED};
use spider_core::dataset::{ContextSpec, DEFAULT_CONTEXT_GRID, DEFAULT_PAD_VALUE, DEFAULT_SPLIT_RATIO};
use spider_core::embedder::EmbedderConfig;
use spider_core::model::HeadConfig;
use spider_core::slide::{DEFAULT_MIN_COVERAGE, DEFAULT_PATCH_SIZE};
use spider_core::train_eval::TrainConfig;
use spider_core::verifysvc::DEFAULT_LEASE_TTL_MS;
use spider_core::vindex::Metric;
use spider_core::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub tiling: Tiling,
    pub embedder: EmbedderConfig,
    pub index: IndexSection,
    pub curation: Curation,
    pub split: SplitSection,
    pub context: ContextSection,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub serve: ServeSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub slides: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub queues: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tiling {
    pub patch_size: u32,
    pub min_coverage: f64,
}

impl Default for Tiling {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            min_coverage: DEFAULT_MIN_COVERAGE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub metric: Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Curation {
    pub k_per_seed: usize,
    pub cap: usize,
}

impl Default for Curation {
    fn default() -> Self {
        Self {
            k_per_seed: DEFAULT_K_PER_SEED,
            cap: DEFAULT_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratio: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_SPLIT_RATIO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSection {
    pub grid: u32,
    pub pad_value: u8,
}

impl Default for ContextSection {
    fn default() -> Self {
        Self {
            grid: DEFAULT_CONTEXT_GRID,
            pad_value: DEFAULT_PAD_VALUE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    pub lease_ttl_secs: u64,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            lease_ttl_secs: DEFAULT_LEASE_TTL_MS / 1000,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Input directories must exist; output directories are created on
    /// demand.
    pub fn validate(&self) -> Result<()> {
        for (key, dir) in [("paths.slides", &self.paths.slides), ("paths.masks", &self.paths.masks)] {
            if let Some(dir) = dir {
                if !dir.is_dir() {
                    return Err(Error::Config(format!("{key}: {} is not a directory", dir.display())));
                }
            }
        }
        self.embedder.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        self.context()?;
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(Error::Config(format!("split.ratio must lie in (0, 1), got {}", self.split.ratio)));
        }
        if self.tiling.patch_size == 0 {
            return Err(Error::Config("tiling.patch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn context(&self) -> Result<ContextSpec> {
        Ok(ContextSpec {
            pad_value: self.context.pad_value,
            ..ContextSpec::new(self.context.grid)?
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
