//! Retraining triggers: enough new traffic, or a changed backbone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ServiceResult;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaintenanceState {
    /// Collected samples when the caches were last built.
    pub built_count: usize,
    /// Collected samples now.
    pub current_count: usize,
    /// Backbone hash at the last build.
    pub backbone_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trigger {
    None,
    DataDrift,
    BackboneChanged,
}

impl MaintenanceState {
    /// Records a new collection size; counts never go down.
    pub fn observe(&mut self, count: usize) {
        self.current_count = self.current_count.max(count);
    }

    pub fn mark_built(&mut self, backbone_hash: &str) {
        self.built_count = self.current_count;
        self.backbone_hash = backbone_hash.to_string();
    }

    pub fn load(path: &Path) -> ServiceResult<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path)?;
        Ok(Some(serde_json::from_str(&text).map_err(|e| {
            layercache::error::Error::Parse {
                what: path.display().to_string(),
                message: e.to_string(),
            }
        })?))
    }
}

/// A changed backbone wins over drift; drift fires once the share of
/// samples collected since the last build reaches `drift_fraction`.
pub fn check_retrain_trigger(state: &MaintenanceState, backbone_hash: &str, drift_fraction: f64) -> Trigger {
    if state.backbone_hash != backbone_hash {
        return Trigger::BackboneChanged;
    }
    if state.current_count == 0 || state.current_count <= state.built_count {
        return Trigger::None;
    }
    let new = (state.current_count - state.built_count) as f64;
    if new / state.current_count as f64 >= drift_fraction {
        Trigger::DataDrift
    } else {
        Trigger::None
    }
}
