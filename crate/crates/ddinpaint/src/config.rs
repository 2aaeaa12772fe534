//! JSON run configuration. Precedence: built-in defaults, then the config
//! file, then command-line flags.

use std::path::Path;

use ddinpaint_core::metrics::EvalSettings;
use ddinpaint_core::phantom::PhantomSpec;
use ddinpaint_core::pipeline::InpaintOptions;
use ddinpaint_core::schedule::{ScheduleParams, DEFAULT_TIMESTEPS};
use ddinpaint_core::trainer::TrainConfig;
use ddinpaint_core::unet::UNetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};

/// `T` plus optional explicit β endpoints; missing endpoints follow the
/// default schedule rescaled to `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { timesteps: DEFAULT_TIMESTEPS, beta_start: None, beta_end: None }
    }
}

impl ScheduleSection {
    pub fn resolve(&self) -> ScheduleParams {
        let d = ScheduleParams::scaled_default(self.timesteps);
        ScheduleParams { beta_start: self.beta_start.unwrap_or(d.beta_start), beta_end: self.beta_end.unwrap_or(d.beta_end), ..d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub inpaint: InpaintOptions,
    /// Map the output onto the baseline's clipped intensity range.
    pub renormalize: bool,
    /// Apply the intensity preprocessing to the baseline before sampling.
    pub preprocess: bool,
    /// Center-crop or pad slices whose size differs from the model's.
    pub crop: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { inpaint: InpaintOptions::default(), renormalize: true, preprocess: true, crop: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    /// Print a loss line every this many steps.
    pub log_every: u64,
    pub synth: PhantomSpec,
    pub sample: SampleSection,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::desk(),
            schedule: ScheduleSection::default(),
            train: TrainConfig::default(),
            log_every: 1,
            synth: PhantomSpec::default(),
            sample: SampleSection::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(path, e))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let bytes = read_file(p)?;
                let text = String::from_utf8(bytes).map_err(|e| Error::format(p, e.to_string()))?;
                Self::from_json(&text, p)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
