//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Lists are comma separated; capability mixes are `count:value` pairs.
//! Every key is optional and falls back to its default.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::StaleIndexRule;
use crate::data::SyntheticSpec;
use crate::error::{HaflError, Result};
use crate::federation::{FederationConfig, Scheme};
use crate::model::TrainingConfig;
use crate::schemes::Capability;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub n_clients: usize,
    pub sample_size: usize,
    pub rounds: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub rank_mix: Vec<(usize, usize)>,
    pub freeze_mix: Vec<(usize, f64)>,
    pub stale_index_rule: StaleIndexRule,
    pub importance_beta1: f64,
    pub importance_beta2: f64,
    pub lora_scale: f64,
    /// When set, the adapter scale is `lora_alpha / r_g` instead of `lora_scale`.
    pub lora_alpha: Option<f64>,
    pub init_std: f64,
    pub bytes_per_param: usize,
    pub class_count: usize,
    pub feature_dim: usize,
    pub true_rank: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub label_noise: f64,
    pub base_std: f64,
    pub residual_std: f64,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub training: TrainingConfig,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<usize>,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        ExperimentConfig {
            scheme: Scheme::IfaLora,
            n_clients: 100,
            sample_size: 10,
            rounds: 100,
            r_min: 2,
            r_max: 16,
            rank_mix: vec![(33, 2), (33, 4), (34, 16)],
            freeze_mix: vec![(33, 0.875), (33, 0.75), (34, 0.0)],
            stale_index_rule: StaleIndexRule::RetainPrevious,
            importance_beta1: 0.85,
            importance_beta2: 0.85,
            lora_scale: 1.0,
            lora_alpha: None,
            init_std: crate::lora::DEFAULT_INIT_STD,
            bytes_per_param: 4,
            class_count: data.class_count,
            feature_dim: data.feature_dim,
            true_rank: data.true_rank,
            n_train: data.n_train,
            n_test: data.n_test,
            label_noise: data.label_noise,
            base_std: data.base_std,
            residual_std: data.residual_std,
            train_file: None,
            test_file: None,
            training: TrainingConfig::default(),
            seeds: vec![0, 1, 42],
            checkpoints: vec![50, 100],
            out_dir: PathBuf::from("out"),
            threads: 0,
        }
    }
}

/// Every accepted key, in serialisation order.
pub const CONFIG_KEYS: &[&str] = &[
    "scheme",
    "n_clients",
    "sample_size",
    "rounds",
    "r_min",
    "r_max",
    "rank_mix",
    "freeze_mix",
    "stale_index_rule",
    "importance_beta1",
    "importance_beta2",
    "lora_scale",
    "lora_alpha",
    "init_std",
    "bytes_per_param",
    "class_count",
    "feature_dim",
    "true_rank",
    "n_train",
    "n_test",
    "label_noise",
    "base_std",
    "residual_std",
    "train_file",
    "test_file",
    "eta",
    "lambda",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "local_epochs",
    "batch_size",
    "seeds",
    "checkpoints",
    "out_dir",
    "threads",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HaflError::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_mix<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<(usize, T)>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (count, v) = item.split_once(':').ok_or_else(|| {
                HaflError::config(key, format!("entry `{item}` is not `count:value`"))
            })?;
            Ok((parse_num(key, count.trim())?, parse_num(key, v.trim())?))
        })
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn join_mix<T: std::fmt::Display>(items: &[(usize, T)]) -> String {
    items
        .iter()
        .map(|(n, v)| format!("{n}:{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HaflError::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Parses and validates. `origin` only labels line-level errors.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HaflError::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(HaflError::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value, without cross-field validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.training;
        match key {
            "scheme" => self.scheme = value.parse().map_err(|e| HaflError::config(key, e))?,
            "n_clients" => self.n_clients = parse_num(key, value)?,
            "sample_size" => self.sample_size = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "r_min" => self.r_min = parse_num(key, value)?,
            "r_max" => self.r_max = parse_num(key, value)?,
            "rank_mix" => self.rank_mix = parse_mix(key, value)?,
            "freeze_mix" => self.freeze_mix = parse_mix(key, value)?,
            "stale_index_rule" => {
                self.stale_index_rule = value.parse().map_err(|e| HaflError::config(key, e))?
            }
            "importance_beta1" => self.importance_beta1 = parse_num(key, value)?,
            "importance_beta2" => self.importance_beta2 = parse_num(key, value)?,
            "lora_scale" => self.lora_scale = parse_num(key, value)?,
            "lora_alpha" => {
                self.lora_alpha = if value.is_empty() {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "init_std" => self.init_std = parse_num(key, value)?,
            "bytes_per_param" => self.bytes_per_param = parse_num(key, value)?,
            "class_count" => self.class_count = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "true_rank" => self.true_rank = parse_num(key, value)?,
            "n_train" => self.n_train = parse_num(key, value)?,
            "n_test" => self.n_test = parse_num(key, value)?,
            "label_noise" => self.label_noise = parse_num(key, value)?,
            "base_std" => self.base_std = parse_num(key, value)?,
            "residual_std" => self.residual_std = parse_num(key, value)?,
            "train_file" => self.train_file = optional_path(value),
            "test_file" => self.test_file = optional_path(value),
            "eta" => t.eta = parse_num(key, value)?,
            "lambda" => t.lambda = parse_num(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam_eps = parse_num(key, value)?,
            "local_epochs" => t.local_epochs = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "checkpoints" => self.checkpoints = parse_list(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "threads" => self.threads = parse_num(key, value)?,
            other => return Err(HaflError::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Canonical text form; `parse_str` of the result reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let t = &self.training;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let values: Vec<(&str, String)> = vec![
            ("scheme", self.scheme.to_string()),
            ("n_clients", self.n_clients.to_string()),
            ("sample_size", self.sample_size.to_string()),
            ("rounds", self.rounds.to_string()),
            ("r_min", self.r_min.to_string()),
            ("r_max", self.r_max.to_string()),
            ("rank_mix", join_mix(&self.rank_mix)),
            ("freeze_mix", join_mix(&self.freeze_mix)),
            ("stale_index_rule", self.stale_index_rule.to_string()),
            ("importance_beta1", self.importance_beta1.to_string()),
            ("importance_beta2", self.importance_beta2.to_string()),
            ("lora_scale", self.lora_scale.to_string()),
            (
                "lora_alpha",
                self.lora_alpha.map(|a| a.to_string()).unwrap_or_default(),
            ),
            ("init_std", self.init_std.to_string()),
            ("bytes_per_param", self.bytes_per_param.to_string()),
            ("class_count", self.class_count.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("true_rank", self.true_rank.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
            ("label_noise", self.label_noise.to_string()),
            ("base_std", self.base_std.to_string()),
            ("residual_std", self.residual_std.to_string()),
            ("train_file", path(&self.train_file)),
            ("test_file", path(&self.test_file)),
            ("eta", t.eta.to_string()),
            ("lambda", t.lambda.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("local_epochs", t.local_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seeds", join(&self.seeds)),
            ("checkpoints", join(&self.checkpoints)),
            ("out_dir", self.out_dir.display().to_string()),
            ("threads", self.threads.to_string()),
        ];
        debug_assert_eq!(values.len(), CONFIG_KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(HaflError::config(k, m));
        let min_dim = self.class_count.min(self.feature_dim);
        if self.class_count < 2 {
            return err("class_count", "must be >= 2".into());
        }
        if self.feature_dim == 0 {
            return err("feature_dim", "must be >= 1".into());
        }
        if self.r_max > min_dim {
            return err(
                "r_max",
                format!(
                    "{} exceeds min(class_count, feature_dim) = {min_dim}",
                    self.r_max
                ),
            );
        }
        if let Scheme::HomLora(r) = self.scheme {
            if r > min_dim {
                return err("scheme", format!("HomLoRA rank {r} exceeds {min_dim}"));
            }
        }
        if self.r_min == 0 || self.r_min > self.r_max {
            return err(
                "r_min",
                format!("must satisfy 1 <= r_min <= r_max = {}", self.r_max),
            );
        }
        if self.sample_size == 0 || self.sample_size > self.n_clients {
            return err(
                "sample_size",
                format!("must lie in [1, n_clients = {}]", self.n_clients),
            );
        }
        let rank_total: usize = self.rank_mix.iter().map(|m| m.0).sum();
        if rank_total != self.n_clients {
            return err(
                "rank_mix",
                format!(
                    "counts sum to {rank_total}, expected n_clients = {}",
                    self.n_clients
                ),
            );
        }
        if let Some((_, r)) = self
            .rank_mix
            .iter()
            .find(|(_, r)| *r < self.r_min || *r > self.r_max)
        {
            return err(
                "rank_mix",
                format!(
                    "rank {r} outside [r_min, r_max] = [{}, {}]",
                    self.r_min, self.r_max
                ),
            );
        }
        let freeze_total: usize = self.freeze_mix.iter().map(|m| m.0).sum();
        if freeze_total != self.n_clients {
            return err(
                "freeze_mix",
                format!(
                    "counts sum to {freeze_total}, expected n_clients = {}",
                    self.n_clients
                ),
            );
        }
        if let Some((_, a)) = self
            .freeze_mix
            .iter()
            .find(|(_, a)| !(0.0..1.0).contains(a))
        {
            return err("freeze_mix", format!("freeze ratio {a} outside [0, 1)"));
        }
        for (k, b) in [
            ("importance_beta1", self.importance_beta1),
            ("importance_beta2", self.importance_beta2),
            ("adam_beta1", self.training.adam_beta1),
            ("adam_beta2", self.training.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return err(k, format!("{b} outside (0, 1)"));
            }
        }
        if !(self.training.eta > 0.0) {
            return err("eta", "must be > 0".into());
        }
        if !(self.training.lambda >= 0.0) {
            return err("lambda", "must be >= 0".into());
        }
        if !(self.training.adam_eps > 0.0) {
            return err("adam_eps", "must be > 0".into());
        }
        if self.training.batch_size == 0 {
            return err("batch_size", "must be >= 1".into());
        }
        if !(self.lora_scale > 0.0) {
            return err("lora_scale", "must be > 0".into());
        }
        if matches!(self.lora_alpha, Some(a) if !(a > 0.0)) {
            return err("lora_alpha", "must be > 0 when set".into());
        }
        if !(self.init_std > 0.0) {
            return err("init_std", "must be > 0".into());
        }
        if self.bytes_per_param == 0 {
            return err("bytes_per_param", "must be >= 1".into());
        }
        if self.train_file.is_some() != self.test_file.is_some() {
            return err(
                "test_file",
                "train_file and test_file must be given together".into(),
            );
        }
        if self.train_file.is_none() {
            if self.true_rank == 0 || self.true_rank > min_dim {
                return err("true_rank", format!("must lie in [1, {min_dim}]"));
            }
            if !(0.0..0.5).contains(&self.label_noise) {
                return err("label_noise", "must lie in [0, 0.5)".into());
            }
            if self.n_test == 0 {
                return err("n_test", "must be >= 1".into());
            }
            if !(self.base_std >= 0.0) {
                return err("base_std", "must be >= 0".into());
            }
            if !(self.residual_std > 0.0) {
                return err("residual_std", "must be > 0".into());
            }
        }
        if self.seeds.is_empty() {
            return err("seeds", "at least one seed required".into());
        }
        Ok(())
    }

    pub fn global_rank(&self) -> usize {
        self.scheme.global_rank(self.r_max)
    }

    pub fn effective_scale(&self) -> f64 {
        match self.lora_alpha {
            Some(alpha) => alpha / self.global_rank() as f64,
            None => self.lora_scale,
        }
    }

    pub fn capability_mix(&self) -> Vec<(usize, Capability)> {
        match self.scheme {
            Scheme::ItaLora => self
                .rank_mix
                .iter()
                .map(|&(n, r)| (n, Capability::Rank(r)))
                .collect(),
            Scheme::IfaLora | Scheme::IfzLora => self
                .freeze_mix
                .iter()
                .map(|&(n, a)| (n, Capability::FreezeRatio(a)))
                .collect(),
            Scheme::HomLora(_) => vec![(self.n_clients, Capability::Full)],
        }
    }

    pub fn federation(&self, seed: u64) -> FederationConfig {
        FederationConfig {
            n_clients: self.n_clients,
            sample_size: self.sample_size,
            rounds: self.rounds,
            scheme: self.scheme,
            capability_mix: self.capability_mix(),
            r_min: self.r_min,
            r_max: self.r_max,
            seed,
            stale_index_rule: self.stale_index_rule,
            importance_beta1: self.importance_beta1,
            importance_beta2: self.importance_beta2,
            lora_scale: self.effective_scale(),
            init_std: self.init_std,
            bytes_per_param: self.bytes_per_param,
        }
    }

    pub fn synthetic(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            class_count: self.class_count,
            feature_dim: self.feature_dim,
            true_rank: self.true_rank,
            n_train: self.n_train,
            n_test: self.n_test,
            label_noise: self.label_noise,
            base_std: self.base_std,
            residual_std: self.residual_std,
            seed,
        }
    }

    /// Same config with another scheme.
    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        ExperimentConfig {
            scheme,
            ..self.clone()
        }
    }
}
