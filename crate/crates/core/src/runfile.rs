//! Plain-text configuration files, canonical resolution and run manifests.
//!
//! Configuration is line-oriented `key = value` text; `#` starts a comment
//! line and blank lines are ignored. Parsing materializes every default, and
//! the canonical form (all keys, sorted) is what gets hashed and stored in
//! manifests and checkpoints — re-parsing canonical text reproduces the
//! config exactly.
//!
//! ## Train runfile schema (defaults in parentheses)
//!
//! Model: `identifier` (none), `width` (64), `modality_dim` (auto),
//! `heads` (4), `mlp_ratio` (4), `proj_dim` (width), `layers_early` (0),
//! `layers_shared` (4), `layers_late` (0), `per_modality_head` (false),
//! `patch_size` (8), `vocab_size` (30), `max_seq_len` (12),
//! `image_size` (32), `channels` (3).
//!
//! Training: `steps` (600), `batch_size` (64), `lr` (3e-4), `beta1` (0.9),
//! `beta2` (0.999), `eps` (1e-8), `seed` (0), `eval_every` (0),
//! `eval_ks` (1,5,10), `n_pairs` (2560), `train_fraction` (1),
//! `data_seed` (7), `checkpoint` (checkpoint.bin).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data;
use crate::encoder::{default_modality_dim, IdentifierKind, ModelConfig};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Parsed `key = value` lines with field-level error reporting.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: empty key or value in {line:?}",
                    lineno + 1
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
        }
        Ok(Self { map })
    }

    /// Take and parse a key, falling back to `default` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, default: Option<T>) -> Result<T> {
        match self.map.remove(key) {
            None => default.ok_or_else(|| Error::Config(format!("missing key '{key}'"))),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': invalid value {raw:?}"))),
        }
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    /// Take a comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str, default: Option<Vec<T>>) -> Result<Vec<T>> {
        match self.map.remove(key) {
            None => default.ok_or_else(|| Error::Config(format!("missing key '{key}'"))),
            Some(raw) => raw
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|_| {
                        Error::Config(format!("key '{key}': invalid list item {item:?}"))
                    })
                })
                .collect(),
        }
    }

    /// Reject any keys that were never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        Ok(())
    }

    /// Hand the unconsumed entries to a nested parser.
    pub fn into_entries(self) -> Vec<(String, String)> {
        self.map.into_iter().collect()
    }
}

/// Render sorted `key = value` lines.
pub fn canonical_text(entries: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (k, v) in sorted {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// FNV-1a 64-bit hash of the canonical config text, as fixed-width hex.
/// Hand-rolled so the hash never depends on library internals.
pub fn config_hash(text: &str) -> String {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let h = text
        .bytes()
        .fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME));
    format!("{h:016x}")
}

fn entry(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

/// Canonical entries for a model config. `width`/`modality_dim` encode the
/// embedding split; `embed_dim` is derived on parse.
pub fn model_config_entries(config: &ModelConfig) -> Vec<(String, String)> {
    vec![
        entry("identifier", config.identifier.name()),
        entry("width", config.width()),
        entry("modality_dim", config.modality_dim),
        entry("vocab_size", config.vocab_size),
        entry("max_seq_len", config.max_seq_len),
        entry("image_size", config.image_size),
        entry("patch_size", config.patch_size),
        entry("channels", config.channels),
        entry("layers_early", config.layers_early),
        entry("layers_shared", config.layers_shared),
        entry("layers_late", config.layers_late),
        entry("heads", config.heads),
        entry("mlp_ratio", config.mlp_ratio),
        entry("proj_dim", config.proj_dim),
        entry("per_modality_head", config.per_modality_head),
    ]
}

pub fn model_config_canonical(config: &ModelConfig) -> String {
    canonical_text(&model_config_entries(config))
}

/// Parse the model keys out of `kv`. `modality_dim = auto` resolves via the
/// proportional width rule when the identifier is `feature-vector`.
pub fn parse_model_config(kv: &mut KeyValues) -> Result<ModelConfig> {
    let identifier = IdentifierKind::parse(&kv.take::<String>("identifier", Some("none".into()))?)?;
    let width: usize = kv.take("width", Some(64))?;
    let raw_dim = kv.take_raw("modality_dim");
    let modality_dim = match raw_dim.as_deref() {
        None | Some("auto") => match identifier {
            IdentifierKind::FeatureVector => default_modality_dim(width),
            _ => 0,
        },
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("key 'modality_dim': invalid value {raw:?}")))?,
    };
    if modality_dim >= width {
        return Err(Error::Config(format!(
            "modality_dim {modality_dim} must be smaller than width {width}"
        )));
    }
    let proj_dim = kv.take("proj_dim", Some(width))?;
    let config = ModelConfig {
        identifier,
        embed_dim: width - modality_dim,
        modality_dim,
        vocab_size: kv.take("vocab_size", Some(data::VOCAB_SIZE))?,
        max_seq_len: kv.take("max_seq_len", Some(data::CAPTION_LEN))?,
        image_size: kv.take("image_size", Some(data::IMAGE_SIZE))?,
        patch_size: kv.take("patch_size", Some(8))?,
        channels: kv.take("channels", Some(data::CHANNELS))?,
        layers_early: kv.take("layers_early", Some(0))?,
        layers_shared: kv.take("layers_shared", Some(4))?,
        layers_late: kv.take("layers_late", Some(0))?,
        heads: kv.take("heads", Some(4))?,
        mlp_ratio: kv.take("mlp_ratio", Some(4))?,
        proj_dim,
        per_modality_head: kv.take("per_modality_head", Some(false))?,
    };
    config.validate()?;
    Ok(config)
}

pub fn parse_model_config_text(text: &str) -> Result<ModelConfig> {
    let mut kv = KeyValues::parse(text)?;
    let config = parse_model_config(&mut kv)?;
    kv.finish()?;
    Ok(config)
}

/// Canonical entries for a full train config.
pub fn train_config_entries(config: &TrainConfig) -> Vec<(String, String)> {
    let mut entries = model_config_entries(&config.model);
    let ks: Vec<String> = config.eval_ks.iter().map(|k| k.to_string()).collect();
    entries.extend([
        entry("steps", config.steps),
        entry("batch_size", config.batch_size),
        entry("lr", config.optim.lr),
        entry("beta1", config.optim.beta1),
        entry("beta2", config.optim.beta2),
        entry("eps", config.optim.eps),
        entry("seed", config.seed),
        entry("eval_every", config.eval_every),
        entry("eval_ks", ks.join(",")),
        entry("n_pairs", config.n_pairs),
        entry("train_fraction", config.train_fraction),
        entry("data_seed", config.data_seed),
        entry("checkpoint", &config.checkpoint_name),
    ]);
    entries
}

pub fn train_config_canonical(config: &TrainConfig) -> String {
    canonical_text(&train_config_entries(config))
}

pub fn parse_train_config_text(text: &str) -> Result<TrainConfig> {
    let mut kv = KeyValues::parse(text)?;
    let model = parse_model_config(&mut kv)?;
    let config = TrainConfig {
        model,
        steps: kv.take("steps", Some(600))?,
        batch_size: kv.take("batch_size", Some(64))?,
        optim: AdamConfig {
            lr: kv.take("lr", Some(3e-4))?,
            beta1: kv.take("beta1", Some(0.9))?,
            beta2: kv.take("beta2", Some(0.999))?,
            eps: kv.take("eps", Some(1e-8))?,
        },
        seed: kv.take("seed", Some(0))?,
        eval_every: kv.take("eval_every", Some(0))?,
        eval_ks: kv.take_list("eval_ks", Some(vec![1, 5, 10]))?,
        n_pairs: kv.take("n_pairs", Some(2560))?,
        train_fraction: kv.take("train_fraction", Some(1.0))?,
        data_seed: kv.take("data_seed", Some(7))?,
        checkpoint_name: kv.take("checkpoint", Some("checkpoint.bin".to_string()))?,
    };
    kv.finish()?;
    config.validate()?;
    Ok(config)
}

/// Everything needed to reproduce a run: the materialized config, its hash,
/// the seed and the artifact file names (relative to the run directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub resolved_config: String,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(resolved_config: String, seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(&resolved_config),
            seed,
            resolved_config,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn with_artifact(mut self, kind: &str, file: &str) -> Self {
        self.artifacts.insert(kind.to_string(), file.to_string());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("manifest: invalid JSON: {e}")))
    }
}
