//! Run configuration: one TOML document with `latent`, `arch`, `train`,
//! `data` and `eval` sections. Unknown keys are errors.

use std::path::{Path, PathBuf};

use repgan::data::fetch::CACHE_DIR_ENV;
use repgan::evaluation::TraversalSpec;
use repgan::{ArchConfig, LatentConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub latent: LatentConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Archive cache; falls back to the environment variable, then `./data`.
    pub cache_dir: Option<PathBuf>,
    /// Mirror to download from instead of the pinned default.
    pub url: Option<String>,
    /// Train on only the first this many training images.
    pub train_limit: Option<usize>,
    /// Local IDX files (gzipped or plain) that replace the cached archives.
    /// They bypass the pinned hashes.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl DataConfig {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Prior draws for the latent reconstruction error.
    pub latent_samples: usize,
    pub seed: u64,
    pub traversal: TraversalSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: 500,
            latent_samples: 10_000,
            seed: 0,
            traversal: TraversalSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.latent.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.eval.batch_size == 0 {
            return Err(CliError::config("eval.batch_size must be positive"));
        }
        if self.data.train_limit == Some(0) {
            return Err(CliError::config("data.train_limit must be positive"));
        }
        let d = &self.data;
        for (a, b, what) in [
            (&d.train_images, &d.train_labels, "train"),
            (&d.test_images, &d.test_labels, "test"),
        ] {
            if a.is_some() != b.is_some() {
                return Err(CliError::config(format!(
                    "data.{what}_images and data.{what}_labels must be given together"
                )));
            }
        }
        Ok(())
    }

    /// Parses TOML, applies `key.path=value` overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("reading config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of everything that shapes the trained parameters. Run length,
    /// checkpoint cadence, data locations and evaluation settings are left
    /// out so a run can be extended or evaluated elsewhere.
    pub fn fingerprint(&self) -> String {
        let train = TrainConfig {
            epochs: 0,
            max_steps: None,
            checkpoint_every: 0,
            prefetch: 0,
            ..self.train.clone()
        };
        let shaping = serde_json::json!({
            "latent": self.latent,
            "arch": self.arch,
            "train": train,
            "train_limit": self.data.train_limit,
        });
        let digest = Sha256::digest(serde_json::to_vec(&shaping).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML and
/// taken as a bare string if that fails.
fn apply_override(doc: &mut toml::Table, text: &str) -> Result<(), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {text:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key {key:?} is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override {key:?}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
