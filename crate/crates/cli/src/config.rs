//! Flat `key=value` configuration.
//!
//! Resolution order: built-in defaults, then `SAMOVAR_SEED`, then the
//! `--config` file, then command-line pairs. Keys outside the command's table
//! are rejected. Lines starting with `#` are comments; `manifest.*` keys are
//! run metadata and are skipped when a manifest is replayed.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const SEED_ENV: &str = "SAMOVAR_SEED";
pub const MANIFEST_PREFIX: &str = "manifest.";

/// Key, default value (`None` when required) and a one-line description.
pub type KeySpec = (&'static str, Option<&'static str>, &'static str);

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `key=value` lines.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(split_pair(line).map_err(|e| usage(format!("{origin}:{}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn split_pair(arg: &str) -> Result<(String, String), String> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected key=value, got `{arg}`")),
    }
}

impl Config {
    pub fn resolve(
        command: &str,
        keys: &[KeySpec],
        file: Option<&Path>,
        flags: &[(String, String)],
        env_seed: Option<String>,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = keys
            .iter()
            .filter_map(|(k, d, _)| d.map(|d| (k.to_string(), d.to_string())))
            .collect();
        let known = |k: &str| keys.iter().any(|(name, _, _)| *name == k);
        if let Some(seed) = env_seed {
            if known("seed") {
                values.insert("seed".into(), seed.trim().to_string());
            }
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_pairs(&text, &path.display().to_string())? {
                if let Some(meta) = k.strip_prefix(MANIFEST_PREFIX) {
                    if meta == "command" && v != command {
                        return Err(usage(format!(
                            "{} is a manifest of `{v}`, not `{command}`",
                            path.display()
                        )));
                    }
                    continue;
                }
                if !known(&k) {
                    return Err(usage(format!("unknown key `{k}` in {}", path.display())));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if !known(k) {
                return Err(usage(format!("unknown key `{k}` for `{command}`")));
            }
            values.insert(k.clone(), v.clone());
        }
        if let Some((k, _, _)) = keys.iter().find(|(k, _, _)| !values.contains_key(*k)) {
            return Err(usage(format!("missing required key `{k}`")));
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key `{key}` is not part of this command"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| usage(format!("bad value `{raw}` for `{key}`: {e}")))
    }

    /// Comma-separated list; empty entries are rejected.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Err(usage(format!("`{key}` needs at least one value")));
        }
        raw.split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|e| usage(format!("bad value `{v}` in `{key}`: {e}")))
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }
}
