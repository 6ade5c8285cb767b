use std::path::Path;

use serde_json::{Map, Value};
use sls_core::experiment::ExperimentConfig;

use crate::error::{CliError, Result};

/// Effective configuration after layering flags over the file over the defaults.
pub struct Loaded {
    pub config: ExperimentConfig,
    /// Whether the seed came from the file or a flag rather than the fallback.
    pub seed_given: bool,
}

impl Loaded {
    pub fn require_seed(&self, command: &str) -> Result<()> {
        if self.seed_given {
            Ok(())
        } else {
            Err(CliError::Config(format!("`{command}` needs a seed, in the config file or via --seed")))
        }
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(&self.config).expect("config serializes")
    }
}

pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Loaded> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                path: p.display().to_string(),
                source,
            })?;
            let value: Value = serde_json::from_str(&text).map_err(|source| CliError::Json {
                path: p.display().to_string(),
                source,
            })?;
            match value {
                Value::Object(map) => map,
                _ => return Err(CliError::Config(format!("{}: top level must be an object", p.display()))),
            }
        }
        None => Map::new(),
    };
    if let Some(seed) = seed {
        doc.insert("seed".into(), Value::from(seed));
    }
    let seed_given = doc.contains_key("seed");
    if !seed_given {
        doc.insert("seed".into(), Value::from(0u64));
    }
    let config: ExperimentConfig =
        serde_json::from_value(Value::Object(doc)).map_err(|e| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(Loaded { config, seed_given })
}
