//! TOML experiment files layered over the reference desk configuration.

use std::path::Path;

use rloop_core::experiment::ExperimentConfig;
use rloop_core::store::sha256_hex;

use crate::CliError;

/// The shipped, commented default configuration.
pub const DEFAULT_TOML: &str = include_str!("../config/default.toml");

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn unknown_keys(user: &toml::Value, parsed: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(u), toml::Value::Table(p)) = (user, parsed) {
        for (k, v) in u {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match p.get(k) {
                Some(pv) => unknown_keys(v, pv, &path, out),
                None => out.push(path),
            }
        }
    }
}

/// Parses `text`; omitted keys keep their reference values, unknown keys
/// are rejected.
pub fn from_toml_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let user: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut merged = toml::Value::try_from(ExperimentConfig::reference_desk())
        .map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut merged, user.clone());
    let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let reparsed = toml::Value::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(&user, &reparsed, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(CliError::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        None => Ok(ExperimentConfig::reference_desk()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            from_toml_str(&text)
        }
    }
}

/// Key-sorted compact JSON; floats in shortest round-trip form.
pub fn canonical_json(cfg: &ExperimentConfig) -> Vec<u8> {
    let value = serde_json::to_value(cfg).expect("config serializes");
    serde_json::to_vec(&value).expect("value serializes")
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(&canonical_json(cfg))
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes to TOML")
}
