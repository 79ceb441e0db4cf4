//! Flat key-value configuration shared by config files, checkpoint headers
//! and run manifests.
//!
//! Every configuration struct serializes to a JSON object of scalar fields.
//! [`to_kv`] renders it as `key → string`; [`from_kv`] starts from the
//! struct's defaults and overlays whichever of its own keys are present.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{NeurankError, Result};

pub type KeyValues = BTreeMap<String, String>;

pub fn to_kv<T: Serialize>(cfg: &T) -> Result<KeyValues> {
    let value = serde_json::to_value(cfg).map_err(|e| NeurankError::Config(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(NeurankError::Config("configuration must be a struct".into()));
    };
    Ok(map
        .into_iter()
        .map(|(k, v)| {
            let s = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            (k, s)
        })
        .collect())
}

pub fn from_kv<T>(kv: &KeyValues) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let defaults = serde_json::to_value(T::default()).map_err(|e| NeurankError::Config(e.to_string()))?;
    let Value::Object(mut map) = defaults else {
        return Err(NeurankError::Config("configuration must be a struct".into()));
    };
    for (key, slot) in map.iter_mut() {
        let Some(raw) = kv.get(key) else { continue };
        *slot = match slot {
            Value::String(_) => Value::String(raw.clone()),
            _ => serde_json::from_str(raw.trim())
                .map_err(|_| NeurankError::Config(format!("invalid value `{raw}` for `{key}`")))?,
        };
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| NeurankError::Config(e.to_string()))
}

/// Keys a configuration struct understands.
pub fn known_keys<T: Serialize + Default>() -> Vec<String> {
    to_kv(&T::default()).map(|kv| kv.into_keys().collect()).unwrap_or_default()
}
