//! Run configuration: a TOML file with a top-level `seed` and one table per
//! subcommand (`[gen-synth]`, `[train-probe]`, ...) plus the model tables
//! `[probe]`, `[toy]` and `[cost-model]`. Command-line flags override file values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::io::read_bytes;

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    sections: BTreeMap<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = read_bytes(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(text).map_err(|e| CliError::usage(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::usage(e.message().to_string()))?;
        let mut cfg = Self::default();
        for (key, value) in table {
            match (key.as_str(), value) {
                ("seed", toml::Value::Integer(s)) if s >= 0 => cfg.seed = Some(s as u64),
                ("seed", _) => return Err(CliError::usage("seed must be a nonnegative integer")),
                (_, toml::Value::Table(t)) => {
                    let json = serde_json::to_value(t).map_err(|e| CliError::usage(e.to_string()))?;
                    cfg.sections.insert(key, json);
                }
                _ => return Err(CliError::usage(format!("unexpected top-level key {key:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.sections.get(name)
    }
}

/// Overlays `top` onto `base`: keys present (and non-null) in `top` win.
pub fn overlay(base: &mut Value, top: &Value) {
    if let (Value::Object(b), Value::Object(t)) = (&mut *base, top) {
        for (k, v) in t {
            if !v.is_null() {
                b.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Resolves a settings struct from its file section and the parsed flags.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, file: Option<&Value>) -> CliResult<T> {
    let mut merged = file.cloned().unwrap_or_else(|| Value::Object(Default::default()));
    overlay(&mut merged, &serde_json::to_value(flags)?);
    serde_json::from_value(merged).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
}

/// Builds a model config: `base` defaults, then the file table, then explicit overrides.
pub fn layered<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Value>, overrides: Value) -> CliResult<T> {
    let mut merged = serde_json::to_value(base)?;
    if let Some(f) = file {
        overlay(&mut merged, f);
    }
    overlay(&mut merged, &overrides);
    serde_json::from_value(merged).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
}

/// Hex SHA-256 of the canonical (key-sorted, compact) JSON form of `value`.
pub fn config_hash(value: &Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
