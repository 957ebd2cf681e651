//! Resolution of a run's configuration: built-in defaults, overlaid by an
//! optional JSON config file, overlaid by command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Overlay `top` onto `base`. Objects merge key by key; a key absent from a
/// struct-like `base` object is rejected. Single-key objects are enum values
/// and are replaced whole.
fn merge(base: &mut Value, top: Value, path: &str) -> Result<(), CliError> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) if b.len() != 1 || t.keys().all(|k| b.contains_key(k)) => {
            for (k, v) in t {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(CliError::invalid(format!("unknown config field {sub:?}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[derive(Debug, Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    /// Record a flag value at a dotted path such as `training.lr`.
    pub fn set<V: Serialize>(&mut self, path: &str, value: Option<V>) {
        let Some(v) = value else { return };
        let v = serde_json::to_value(v).expect("flag values serialize");
        let mut parts: Vec<&str> = path.split('.').collect();
        let last = parts.pop().expect("non-empty path");
        let mut obj = &mut self.0;
        for p in parts {
            obj = obj
                .entry(p)
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("override paths do not collide");
        }
        obj.insert(last.to_string(), v);
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }
}

#[derive(Debug)]
pub struct Resolved<C> {
    pub config: C,
    pub file: Option<Value>,
    pub overrides: Value,
}

impl<C: Serialize> Resolved<C> {
    /// The record embedded in reports: resolved values plus their sources.
    pub fn record(&self) -> Value {
        serde_json::json!({
            "resolved": self.config,
            "config_file": self.file,
            "flags": self.overrides,
        })
    }
}

pub fn resolve<C: Serialize + DeserializeOwned>(
    defaults: C,
    file: Option<&Path>,
    overrides: Overrides,
) -> Result<Resolved<C>, CliError> {
    let mut v = serde_json::to_value(&defaults).expect("defaults serialize");
    let file_value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let fv: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?;
            merge(&mut v, fv.clone(), "")?;
            Some(fv)
        }
        None => None,
    };
    let overrides = overrides.into_value();
    merge(&mut v, overrides.clone(), "")?;
    let config = serde_json::from_value(v)?;
    Ok(Resolved {
        config,
        file: file_value,
        overrides,
    })
}
