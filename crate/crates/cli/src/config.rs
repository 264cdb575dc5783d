use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kuronet::corpus::synth::SynthSpec;
use kuronet::postprocess::InferenceConfig;
use kuronet::training::TrainConfig;
use kuronet::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything a command can be configured with. Missing keys take their
/// defaults; unknown keys are an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds corpus synthesis and training (copied into `train.seed`).
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub synth: SynthSpec,
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Book directories, or directories of book directories.
    pub corpus: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Sets `a.b.c` in a JSON object tree; the value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not of the form key=value");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("override {key:?}: {} is not an object", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Reads the optional config file, applies `key=value` overrides and the
/// seed flag, and validates the result.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).context("invalid configuration")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.inference.validate()?;
    Ok(cfg)
}

/// Writes the effective configuration next to a command's outputs.
pub fn echo(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{command}.config.json"));
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
