//! Pipeline configuration file and flag precedence.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use pss_core::classifier::TrainConfig;
use pss_core::core_extraction::HoughParams;
use pss_core::inference::InferenceConfig;
use pss_core::pss::PssConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every tunable of the pipeline. Missing sections and fields take their
/// defaults; `hough` has none because radii depend on the slide.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pss: PssConfig,
    pub inference: InferenceConfig,
    pub training: TrainConfig,
    pub hough: Option<HoughParams>,
    pub seed: u64,
}

/// A config file plus which sections it actually spelled out.
#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub cfg: PipelineConfig,
    pub has_pss: bool,
}

impl Loaded {
    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let has_pss = raw.get("pss").is_some();
        let cfg = serde_json::from_value(raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self { cfg, has_pss })
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.pss.validate()?;
        self.inference.validate()?;
        self.training.validate()?;
        if let Some(h) = &self.hough {
            h.validate()?;
        }
        Ok(())
    }
}

/// True when the flag was typed on the command line rather than defaulted.
pub fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.try_get_raw(id), Ok(Some(_))) && m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Overwrites `dst` with `value` only when flag `id` was given.
pub fn apply<T>(m: &ArgMatches, id: &str, dst: &mut T, value: T) {
    if given(m, id) {
        *dst = value;
    }
}
