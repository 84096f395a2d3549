//! Flat `key = value` run configuration with layered overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use molkd_core::ndiff::AdamConfig;
use molkd_core::{DistillConfig, PretrainConfig};

use crate::error::CliError;

/// Every key any verb understands. A config file may carry keys for other
/// verbs, but a key outside this list is rejected as a typo.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "threads",
    "out",
    // inputs
    "reactions",
    "data",
    "teacher",
    "checkpoint",
    "predictor",
    "train",
    "valid",
    "test",
    "perturbations",
    "refs",
    "smiles",
    "k",
    "task_index",
    "n",
    // model and optimizer
    "preset",
    "unk",
    "arch",
    "layers",
    "k_hops",
    "hidden_dim",
    "embedding_dim",
    "student_dim",
    "head_hidden",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    // pre-training
    "margin",
    "yield_exponent",
    // distillation
    "task",
    "tau",
    "beta",
    "no_kd",
    "init_from_teacher",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

impl Settings {
    /// Parses `key = value` lines. `#` starts a comment anywhere outside a
    /// quoted value; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            s.set(k.trim(), unquote(v))
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k, unquote(v))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Config(format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(false),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => Err(CliError::Config(format!("{key} = {v:?} is not a boolean"))),
            },
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)
            .ok_or_else(|| CliError::Config(format!("missing required setting {key:?}")))
    }

    fn adam(&self, base: AdamConfig) -> Result<AdamConfig, CliError> {
        Ok(AdamConfig {
            lr: self.get_or("lr", base.lr)?,
            beta1: self.get_or("beta1", base.beta1)?,
            beta2: self.get_or("beta2", base.beta2)?,
            eps: self.get_or("eps", base.eps)?,
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, CliError> {
        let base = match self.raw("preset").unwrap_or("desk") {
            "desk" => PretrainConfig::default(),
            "full" => PretrainConfig::full_scale(),
            other => return Err(CliError::Config(format!("preset {other:?} is not desk or full"))),
        };
        let cfg = PretrainConfig {
            margin: self.get_or("margin", base.margin)?,
            yield_exponent: self.get_or("yield_exponent", base.yield_exponent)?,
            batch_size: self.get_or("batch_size", base.batch_size)?,
            epochs: self.get_or("epochs", base.epochs)?,
            adam: self.adam(base.adam)?,
            arch: self.get_or("arch", base.arch)?,
            layers: self.get_or("layers", base.layers)?,
            k_hops: self.get_or("k_hops", base.k_hops)?,
            hidden_dim: self.get_or("hidden_dim", base.hidden_dim)?,
            embedding_dim: self.get_or("embedding_dim", base.embedding_dim)?,
            seed: self.get_or("seed", base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn distill_config(&self) -> Result<DistillConfig, CliError> {
        let base = DistillConfig::default();
        let cfg = DistillConfig {
            tau: self.get_or("tau", base.tau)?,
            beta: self.get_or("beta", base.beta)?,
            task: self.get_or("task", base.task)?,
            arch: self.get_or("arch", base.arch)?,
            layers: self.get_or("layers", base.layers)?,
            k_hops: self.get_or("k_hops", base.k_hops)?,
            hidden_dim: self.get_or("hidden_dim", base.hidden_dim)?,
            student_dim: self.get_or("student_dim", base.student_dim)?,
            head_hidden: self.get_or("head_hidden", base.head_hidden)?,
            epochs: self.get_or("epochs", base.epochs)?,
            batch_size: self.get_or("batch_size", base.batch_size)?,
            adam: self.adam(base.adam)?,
            seed: self.get_or("seed", base.seed)?,
            no_kd: self.flag("no_kd")?,
            init_from_teacher: self.flag("init_from_teacher")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Echo of the effective settings for checkpoint manifests.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '"' | '\'') => quote = Some(c),
            (Some(q), c) if c == q => quote = None,
            (None, '#') => return &line[..i],
            _ => {}
        }
    }
    line
}
