//! Run configuration: TOML file over built-in defaults, then `MOTOR_*`
//! environment overrides, then validation.
//!
//! An override names a key by its section path joined with underscores, for
//! example `MOTOR_PRETRAIN_LR=1e-3` or `MOTOR_FINETUNE_VQA_STEPS=100`. Values
//! are parsed as TOML and must keep the key's type.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::corpus::CorpusConfig;
use crate::downstream::{FinetuneOptions, Task};
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckOptions;
use crate::neural::EncoderConfig;
use crate::pretrain::PretrainOptions;

pub const ENV_PREFIX: &str = "MOTOR_";
/// File written next to every run's outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub vqa_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus_dir: "data/corpus".into(),
            out_dir: "runs/default".into(),
            precision: Precision::F32,
            checkpoint_every: 0,
            vqa_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub retrieval: FinetuneOptions,
    pub generation: FinetuneOptions,
    pub classification: FinetuneOptions,
    pub vqa: FinetuneOptions,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            retrieval: FinetuneOptions::for_task(Task::Retrieval),
            generation: FinetuneOptions::for_task(Task::Generation),
            classification: FinetuneOptions::for_task(Task::Classification),
            vqa: FinetuneOptions::for_task(Task::Vqa),
        }
    }
}

impl FinetuneSection {
    pub fn task(&self, task: Task) -> &FinetuneOptions {
        match task {
            Task::Retrieval => &self.retrieval,
            Task::Generation => &self.generation,
            Task::Classification => &self.classification,
            Task::Vqa => &self.vqa,
        }
    }

    pub fn task_mut(&mut self, task: Task) -> &mut FinetuneOptions {
        match task {
            Task::Retrieval => &mut self.retrieval,
            Task::Generation => &mut self.generation,
            Task::Classification => &mut self.classification,
            Task::Vqa => &mut self.vqa,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusConfig,
    pub model: EncoderConfig,
    pub pretrain: PretrainOptions,
    pub finetune: FinetuneSection,
    pub gradcheck: GradcheckOptions,
}

impl RunConfig {
    /// Defaults, overlaid with `file` when given, then with `env`.
    pub fn resolve(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut base = Self::default().to_table()?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let user: Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut base, user, "")?;
        }
        let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            apply_override(&mut base, &k[ENV_PREFIX.len()..].to_lowercase(), &v)
                .map_err(|e| Error::Config(format!("{k}: {e}")))?;
        }
        let cfg: Self = Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves against the process environment.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        Self::resolve(file, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pretrain.validate()?;
        for t in [Task::Retrieval, Task::Generation, Task::Classification, Task::Vqa] {
            self.finetune.task(t).validate()?;
        }
        Ok(())
    }

    fn to_table(&self) -> Result<Table> {
        match Value::try_from(self).map_err(|e| Error::Config(e.to_string()))? {
            Value::Table(t) => Ok(t),
            _ => unreachable!("struct serializes to a table"),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn merge(base: &mut Table, user: Table, path: &str) -> Result<()> {
    for (k, v) in user {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &full)?,
            (Some(_), Value::Table(_)) | (Some(Value::Table(_)), _) => {
                return Err(Error::Config(format!("`{full}`: section and value mismatch")))
            }
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(Error::Config(format!("unknown key `{full}`"))),
        }
    }
    Ok(())
}

const UNKNOWN_KEY: &str = "unknown configuration key";

/// Sets the key addressed by `name` (underscore-joined path, keys may contain
/// underscores themselves).
fn apply_override(table: &mut Table, name: &str, raw: &str) -> std::result::Result<(), String> {
    let keys: Vec<String> = table.keys().cloned().collect();
    let mut nested = None;
    for k in keys {
        if name == k {
            let slot = table.get_mut(&k).expect("listed key");
            if slot.is_table() {
                return Err("names a section, not a value".into());
            }
            *slot = parse_like(slot, raw)?;
            return Ok(());
        }
        if let Some(rest) = name.strip_prefix(&k).and_then(|r| r.strip_prefix('_')) {
            if let Some(Value::Table(sub)) = table.get_mut(&k) {
                match apply_override(sub, rest, raw) {
                    Ok(()) => return Ok(()),
                    Err(e) if e != UNKNOWN_KEY => nested = Some(e),
                    Err(_) => {}
                }
            }
        }
    }
    Err(nested.unwrap_or_else(|| UNKNOWN_KEY.into()))
}

fn parse_like(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    if current.is_str() {
        return Ok(Value::String(raw.to_string()));
    }
    let parsed: Table = format!("v = {raw}").parse().map_err(|e| format!("cannot parse {raw:?}: {e}"))?;
    let v = parsed["v"].clone();
    let v = match (current, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    };
    if std::mem::discriminant(current) != std::mem::discriminant(&v) {
        return Err(format!("expected {} but got {raw:?}", current.type_str()));
    }
    Ok(v)
}
