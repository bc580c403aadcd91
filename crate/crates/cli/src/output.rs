use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::config::{Config, MANIFEST_PREFIX};
use crate::CliError;

/// A versioned CSV layout. `hash` pins the header; changing the columns
/// without updating it is caught when the file is written.
pub struct Schema {
    pub name: &'static str,
    pub columns: &'static [&'static str],
    pub hash: &'static str,
}

pub const SANDBOX_CSV: Schema = Schema {
    name: "sandbox.csv",
    columns: &["sigma_y", "objective", "L", "seed", "step_count", "final_loss", "mean_ratio", "ratio_stddev"],
    hash: "287f295af80973da",
};

pub const TRAIN_CSV: Schema = Schema {
    name: "train.csv",
    columns: &["beta", "episode", "loss", "kl_term", "recon_term", "max_prior_variance", "val_accuracy"],
    hash: "9f609516ffdb4127",
};

pub const EVAL_CSV: Schema = Schema {
    name: "eval.csv",
    columns: &["split", "episodes", "way", "shot", "L", "repeats", "mean_accuracy", "ci95", "repeat_se"],
    hash: "d6ca480d5a91a824",
};

pub const COLLAPSE_CSV: Schema = Schema {
    name: "collapse.csv",
    columns: &["objective", "episode", "max_prior_variance"],
    hash: "a3b362dcd1466f54",
};

pub fn header_hash(columns: &[&str]) -> String {
    let digest = Sha256::digest(columns.join(",").as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_csv(dir: &Path, schema: &Schema, rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
    let actual = header_hash(schema.columns);
    if actual != schema.hash {
        return Err(CliError::Internal(format!(
            "{} header hash {actual} does not match the pinned {}",
            schema.name, schema.hash
        )));
    }
    let path = dir.join(schema.name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
    w.write_record(schema.columns).map_err(|e| io(&path, e))?;
    for row in rows {
        debug_assert_eq!(row.len(), schema.columns.len());
        w.write_record(row).map_err(|e| io(&path, e))?;
    }
    w.flush().map_err(|e| io(&path, e))?;
    Ok(path)
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Run record written next to the outputs as `manifest.txt`. Passing it back
/// through `--config` replays the run.
pub struct Manifest<'a> {
    pub command: &'a str,
    pub config: &'a Config,
    pub started: u64,
    pub outputs: Vec<PathBuf>,
}

impl Manifest<'_> {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let mut text = String::new();
        let names: Vec<String> = self
            .outputs
            .iter()
            .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()))
            .collect();
        let meta = [
            ("command", self.command.to_string()),
            ("version", env!("CARGO_PKG_VERSION").to_string()),
            ("started", self.started.to_string()),
            ("finished", now().to_string()),
            ("outputs", names.join(",")),
        ];
        for (k, v) in meta {
            text.push_str(&format!("{MANIFEST_PREFIX}{k}={v}\n"));
        }
        for (k, v) in self.config.iter() {
            text.push_str(&format!("{k}={v}\n"));
        }
        write_text(dir, "manifest.txt", &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_header_hashes() {
        for s in [&SANDBOX_CSV, &TRAIN_CSV, &EVAL_CSV, &COLLAPSE_CSV] {
            assert_eq!(header_hash(s.columns), s.hash, "{}", s.name);
        }
    }

    #[test]
    fn drifted_schema_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let drifted = Schema { name: "x.csv", columns: &["a", "b"], hash: SANDBOX_CSV.hash };
        assert!(matches!(write_csv(dir.path(), &drifted, &[]), Err(CliError::Internal(_))));
    }
}
