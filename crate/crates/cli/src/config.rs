//! Experiment configuration: one JSON document covering corpus, model,
//! training, and the adaptation grid, with dotted-path overrides from the
//! command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use entlab_core::adapt::{AdaptGrid, TrainPlan};
use entlab_core::corpus::CorpusConfig;
use entlab_core::ModelConfig;

use crate::Failure;

fn default_corpus_dir() -> PathBuf {
    PathBuf::from("corpus")
}
fn default_checkpoint() -> PathBuf {
    PathBuf::from("checkpoint.json")
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Relative paths are resolved against the config file's directory, so a
/// config can be invoked from anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_corpus_dir")]
    pub corpus_dir: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> PathsConfig {
        PathsConfig {
            corpus_dir: default_corpus_dir(),
            checkpoint: default_checkpoint(),
            out_dir: default_out_dir(),
        }
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.corpus_dir, &mut self.checkpoint, &mut self.out_dir] {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default)]
    pub adapt: AdaptGrid,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        let check = |r: entlab_core::Result<()>| r.map_err(|e| Failure::Config(e.to_string()));
        check(self.corpus.validate())?;
        check(self.model.validate())?;
        check(self.train.validate())?;
        check(self.adapt.validate())?;
        if self.corpus.d_feat != self.model.d_feat {
            return Err(Failure::Config(format!(
                "corpus d_feat {} does not match model d_feat {}",
                self.corpus.d_feat, self.model.d_feat
            )));
        }
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(Failure::Config(format!(
                "corpus vocab_size {} does not match model vocab_size {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        Ok(())
    }
}

/// Applies one `key=value` override onto the raw JSON document. The key is a
/// dotted path; the value is parsed as JSON, falling back to a plain string.
fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override '{spec}' is not key=value")))?;
    if key.is_empty() {
        return Err(Failure::Config(format!("override '{spec}' has an empty key")));
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Failure::Config(format!(
                "override '{key}': '{part}' is not an object"
            )));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Failure::Config(format!("override '{key}' lands inside a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Loads, overrides, resolves paths, and validates a config file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let raw = std::fs::read_to_string(path).map_err(|e| {
        Failure::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut doc: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Failure::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(doc)
        .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    cfg.paths.resolve(base);
    cfg.validate()?;
    Ok(cfg)
}
