//! Run configuration: a training config plus output settings, read and
//! written as one strict JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{LabError, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verbosity {
    Quiet,
    #[default]
    Normal,
    Verbose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub verbosity: Verbosity,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), output_dir: PathBuf::from("runs/default"), verbosity: Verbosity::Normal }
    }
}

const OUTPUT_DIR: &str = "output-dir";
const VERBOSITY: &str = "verbosity";

fn parse_err(e: serde_json::Error) -> LabError {
    LabError::Config(e.to_string())
}

impl RunConfig {
    /// Parses a document. Unknown keys anywhere are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(parse_err)?;
        Self::parse(value, Some(text))
    }

    pub fn from_value(value: Value) -> Result<Self> {
        Self::parse(value, None)
    }

    fn parse(value: Value, source: Option<&str>) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(LabError::Config("config must be a JSON object".into()));
        };
        let mut cfg = RunConfig::default();
        if let Some(v) = map.remove(OUTPUT_DIR) {
            cfg.output_dir = serde_json::from_value(v).map_err(|e| LabError::Config(format!("{OUTPUT_DIR}: {e}")))?;
        }
        if let Some(v) = map.remove(VERBOSITY) {
            cfg.verbosity = serde_json::from_value(v).map_err(|e| LabError::Config(format!("{VERBOSITY}: {e}")))?;
        }
        cfg.train = serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
            let path = e.path().to_string();
            let line = source.and_then(|s| key_line(s, &path)).map(|l| format!("line {l}: ")).unwrap_or_default();
            LabError::Config(format!("{line}`{path}`: {}", e.inner()))
        })?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.train) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        map.insert(OUTPUT_DIR.into(), Value::String(self.output_dir.to_string_lossy().into_owned()));
        map.insert(VERBOSITY.into(), serde_json::to_value(self.verbosity).unwrap_or(Value::Null));
        Value::Object(map)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).unwrap_or_default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            LabError::Config(msg) => LabError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `key.path=value` overrides in order and revalidates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = self.to_value();
        for o in overrides {
            apply_override(&mut value, o.as_ref())?;
        }
        let cfg = Self::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }
}

/// Line of the first occurrence of the last key of `path` in `source`.
fn key_line(source: &str, path: &str) -> Option<usize> {
    let key = path.rsplit('.').find(|k| !k.is_empty() && !k.starts_with('['))?;
    let needle = format!("\"{key}\"");
    source.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

/// Sets one dotted path in a JSON tree. The value is read as JSON when it
/// parses and as a string otherwise. Every path segment must already exist.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| LabError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in path.split('.') {
        node = node.as_object_mut().and_then(|m| m.get_mut(key)).ok_or_else(|| LabError::Config(format!("unknown config key `{path}`")))?;
    }
    *node = new;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_json(r#"{"stepz": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"variant": {"bicc": true}}"#).is_err());
        let partial = RunConfig::from_json(r#"{"context": {"ratio": 0.2}, "policy": {"window": 12}}"#).unwrap();
        assert_eq!(partial.train.context.max_context, 24);
        assert_eq!(partial.train.policy.max_position, 7);
        let e = RunConfig::from_json("{\n  \"steps\": \"x\"\n}").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn overrides() {
        let cfg =
            RunConfig::default().with_overrides(&["variant.bicc-enabled=true", "steps=7", "output-dir=out/x", "env=copy_reverse"]).unwrap();
        assert!(cfg.train.variant.bicc_enabled);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert!(RunConfig::default().with_overrides(&["variant.nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["steps"]).is_err());
        assert!(RunConfig::default().with_overrides(&["group-size=1"]).is_err());
    }
}
