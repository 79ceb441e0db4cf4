//! Flat configuration: an optional TOML file of scalar keys, then
//! `--set key=value` overrides. Every key must belong to one of the
//! configuration structs.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use neurank::config::{from_kv, known_keys, KeyValues};
use neurank::encoder::EncoderConfig;
use neurank::rankers::RankerConfig;
use neurank::training::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Config {
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for Bm25Config {
    fn default() -> Self {
        let p = neurank::bm25::Bm25Params::default();
        Bm25Config {
            bm25_k1: p.k1,
            bm25_b: p.b,
        }
    }
}

pub fn all_known_keys() -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    keys.extend(known_keys::<EncoderConfig>());
    keys.extend(known_keys::<RankerConfig>());
    keys.extend(known_keys::<TrainConfig>());
    keys.extend(known_keys::<PretrainConfig>());
    keys.extend(known_keys::<Bm25Config>());
    keys
}

fn toml_scalar(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => {
            let json: Vec<serde_json::Value> = items
                .iter()
                .map(|x| serde_json::to_value(x).context("array element"))
                .collect::<Result<_>>()?;
            serde_json::to_string(&json)?
        }
        _ => bail!("config key `{key}` must be a scalar or an array"),
    })
}

pub fn load_file(path: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("{}: invalid TOML", path.display()))?;
    table.iter().map(|(k, v)| Ok((k.clone(), toml_scalar(k, v)?))).collect()
}

/// File values, then overrides; rejects unknown keys.
pub fn resolve(path: Option<&Path>, sets: &[String]) -> Result<KeyValues> {
    let mut kv = match path {
        Some(p) => load_file(p)?,
        None => KeyValues::new(),
    };
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            bail!("--set expects key=value, got `{s}`");
        };
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    check_keys(&kv)?;
    Ok(kv)
}

pub fn check_keys(kv: &KeyValues) -> Result<()> {
    let known = all_known_keys();
    if let Some(bad) = kv.keys().find(|k| !known.contains(*k)) {
        bail!("unknown config key `{bad}`");
    }
    Ok(())
}

/// Typed view of a resolved configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub encoder: EncoderConfig,
    pub ranker: RankerConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub bm25: Bm25Config,
}

impl Settings {
    pub fn from_kv(kv: KeyValues) -> Result<Self> {
        Ok(Settings {
            encoder: from_kv(&kv)?,
            ranker: from_kv(&kv)?,
            train: from_kv(&kv)?,
            pretrain: from_kv(&kv)?,
            bm25: from_kv(&kv)?,
        })
    }

    /// Every key with its effective value, defaults included.
    pub fn snapshot(&self) -> Result<KeyValues> {
        use neurank::config::to_kv;
        let mut all = to_kv(&self.encoder)?;
        all.extend(to_kv(&self.ranker)?);
        all.extend(to_kv(&self.train)?);
        all.extend(to_kv(&self.pretrain)?);
        all.extend(to_kv(&self.bm25)?);
        Ok(all)
    }
}
