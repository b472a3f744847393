//! Run configuration: a JSON file with one section per subsystem, plus
//! dotted-path overrides from the command line and an environment seed
//! override.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::EvalOptions;
use crate::pipeline::PipelineConfig;
use crate::similarity::InterSimConfig;
use crate::synthgen::GenConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub pipeline: PipelineConfig,
    pub similarity: InterSimConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Apply one `section.key=value` override by round-tripping through the
    /// JSON representation, so types and unknown keys are checked the same
    /// way as in the file.
    pub fn apply_override(&mut self, entry: &str) -> Result<()> {
        let (path, value) = entry
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override '{entry}' is not key=value")))?;
        let mut tree = serde_json::to_value(&*self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = path.split('.').collect();
        if parts.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "override path '{path}' must be section.key"
            )));
        }
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown config section '{part}'")))?;
        }
        let key = parts[parts.len() - 1];
        let slot = node
            .get_mut(key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config key '{path}'")))?;
        // Parse the value as JSON when possible (numbers, booleans), else as
        // a bare string (enum variants like "average").
        let parsed: serde_json::Value = match serde_json::from_str(value) {
            Ok(v) => v,
            Err(_) => serde_json::Value::String(value.to_string()),
        };
        *slot = parsed;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::InvalidConfig(format!("override '{entry}': {e}")))?;
        Ok(())
    }

    /// The `IICS_SEED` environment variable overrides both generator and
    /// pipeline seeds.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("IICS_SEED") {
            let seed: u64 = s
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("IICS_SEED '{s}' is not a u64")))?;
            self.gen.seed = seed;
            self.pipeline.seed = seed;
        }
        Ok(())
    }
}
