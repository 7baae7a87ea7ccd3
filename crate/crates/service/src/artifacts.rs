//! Layout of the artifacts directory:
//!
//! ```text
//! candidates.json              candidate layers with costs
//! medial/<layer>.bin           tapped activations, teacher outputs, splits
//! search/<layer>.json          every trained architecture and the selection
//! caches/<layer>.bin           trained cache weights and metadata
//! calibration/<layer>.json     temperature, threshold and grid rows
//! optimize/val_record.json     per-cache validation predictions
//! optimize/subsets.json        score of every subset and the chosen one
//! evaluation/report.{json,txt} evaluation on labeled data
//! maintenance.json             collection counts and backbone hash at build
//! ```
//!
//! Every artifact records the hash of the backbone it was derived from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{ServiceError, ServiceResult};

#[derive(Debug, Clone)]
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn candidates(&self) -> PathBuf {
        self.root.join("candidates.json")
    }

    pub fn medial(&self, layer: &str) -> PathBuf {
        self.root.join("medial").join(format!("{layer}.bin"))
    }

    pub fn search(&self, layer: &str) -> PathBuf {
        self.root.join("search").join(format!("{layer}.json"))
    }

    pub fn cache(&self, layer: &str) -> PathBuf {
        self.root.join("caches").join(format!("{layer}.bin"))
    }

    pub fn calibration(&self, layer: &str) -> PathBuf {
        self.root.join("calibration").join(format!("{layer}.json"))
    }

    pub fn val_record(&self) -> PathBuf {
        self.root.join("optimize").join("val_record.json")
    }

    pub fn subsets(&self) -> PathBuf {
        self.root.join("optimize").join("subsets.json")
    }

    pub fn evaluation_json(&self) -> PathBuf {
        self.root.join("evaluation").join("report.json")
    }

    pub fn evaluation_text(&self) -> PathBuf {
        self.root.join("evaluation").join("report.txt")
    }

    pub fn maintenance(&self) -> PathBuf {
        self.root.join("maintenance.json")
    }
}

pub fn write_text(path: &Path, text: &str) -> ServiceResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> ServiceResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Fails with a precondition error naming `producer` when `path` is absent.
pub fn require(path: &Path, stage: &'static str, producer: &'static str) -> ServiceResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ServiceError::Precondition {
            stage,
            missing: path.display().to_string(),
            run_first: producer,
        })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str, producer: &'static str) -> ServiceResult<T> {
    require(path, stage, producer)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        layercache::error::Error::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        }
        .into()
    })
}

pub fn check_hash(artifact: &Path, found: &str, current: &str, producer: &'static str) -> ServiceResult<()> {
    if found == current {
        Ok(())
    } else {
        Err(ServiceError::Stale {
            artifact: artifact.display().to_string(),
            found: found.to_string(),
            current: current.to_string(),
            run_first: producer,
        })
    }
}
