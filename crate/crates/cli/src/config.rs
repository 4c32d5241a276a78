use std::path::Path;

use anyhow::{Context, Result};
use flowpose::eval::ThresholdConfig;
use flowpose::losses::PerturbSpec;
use flowpose::refine::RefinerConfig;
use serde::{Deserialize, Serialize};

/// Settings of the two-stage coarse search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseSettings {
    /// Grid size; the mixture draws as many samples again.
    pub m: usize,
    pub k: usize,
    pub sigma_deg: f64,
}

impl Default for CoarseSettings {
    fn default() -> Self {
        CoarseSettings { m: 104, k: 16, sigma_deg: 15.0 }
    }
}

/// Contents of `--config`; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub refiner: RefinerConfig,
    pub coarse: CoarseSettings,
    pub perturb: PerturbSpec,
    pub thresholds: ThresholdConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.refiner.validate()?;
        Ok(config)
    }
}
