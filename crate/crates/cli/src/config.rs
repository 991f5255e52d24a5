use std::fs;
use std::path::Path;

use alan_core::knn::KnnConfig;
use alan_core::segment::{PostProcess, Thresholds};
use alan_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region_label: Option<String>,
    pub thresholds: Thresholds,
    pub postproc: PostProcess,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub segment: SegmentSection,
    pub knn: KnnConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
