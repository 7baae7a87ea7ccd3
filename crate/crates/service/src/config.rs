//! Pipeline configuration, read from a TOML file and overridable from the
//! command line.

use std::fs;
use std::path::{Path, PathBuf};

use layercache::cache::{SearchMenus, SelectionRule};
use layercache::engine::EvalOptions;
use layercache::medial::SplitRatios;
use layercache::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Backbone manifest.
    pub backbone: PathBuf,
    /// Inference traffic the caches are built from.
    pub data: PathBuf,
    /// Labeled evaluation set; when absent, `evaluate` falls back to the
    /// test split of `data`, which then needs labels.
    pub test_data: Option<PathBuf>,
    pub artifacts: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            backbone: "backbone/manifest.toml".into(),
            data: "data/traffic.bin".into(),
            test_data: None,
            artifacts: "artifacts".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    #[serde(flatten)]
    pub menus: SearchMenus,
    #[serde(flatten)]
    pub selection: SelectionRule,
    /// Epoch cap while comparing architectures; `train-caches` uses the
    /// full training config.
    pub max_epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            menus: SearchMenus::default(),
            selection: SelectionRule::default(),
            max_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    #[serde(flatten)]
    pub ratios: SplitRatios,
    pub seed: u64,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub max_frame_bytes: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 7878,
            max_frame_bytes: 16 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaintenanceConfig {
    /// Share of new samples that signals data drift.
    pub drift_fraction: f64,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        Self {
            drift_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Accepted accuracy drop, as a fraction.
    pub tolerance: f64,
    /// Trailing candidate layers left without a cache.
    pub skip_last_k: usize,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub evaluation: EvalOptions,
    pub serve: ServeConfig,
    pub maintenance: MaintenanceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            tolerance: 0.02,
            skip_last_k: 1,
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            evaluation: EvalOptions::default(),
            serve: ServeConfig::default(),
            maintenance: MaintenanceConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses `path`; relative paths inside are taken relative to its
    /// directory.
    pub fn load(path: &Path) -> ServiceResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.paths.backbone);
        join(&mut self.paths.data);
        join(&mut self.paths.artifacts);
        if let Some(t) = &mut self.paths.test_data {
            join(t);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> ServiceResult<()> {
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(ServiceError::Config(format!(
                "tolerance must lie in [0, 1), got {}",
                self.tolerance
            )));
        }
        if !(self.maintenance.drift_fraction > 0.0 && self.maintenance.drift_fraction <= 1.0) {
            return Err(ServiceError::Config("drift_fraction must lie in (0, 1]".into()));
        }
        if self.search.max_epochs == 0 {
            return Err(ServiceError::Config("search.max_epochs must be positive".into()));
        }
        self.search.menus.validate()?;
        self.train.validate()?;
        self.split.ratios.validate()?;
        Ok(())
    }

    /// Training config used while comparing architectures.
    pub fn search_train(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.search.max_epochs.min(self.train.max_epochs),
            ..self.train.clone()
        }
    }
}
