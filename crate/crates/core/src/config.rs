//! Run configuration in a flat `key = value` text format.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are an
//! error so that typos never silently fall back to defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augops::{AugConfig, CorruptionConfig};
use crate::contrastive::{ContrastConfig, Pooling};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::recommender::{JointConfig, Mode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Processed sequence file.
    pub data: Option<PathBuf>,
    /// Augmenter checkpoint used by the recommender phase.
    pub augmenter_checkpoint: Option<PathBuf>,
    pub emb_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub max_aug_len: usize,
    pub max_insert: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub p_keep: f64,
    pub p_delete: f64,
    pub p_insert: f64,
    pub gamma: f64,
    pub eta: f64,
    pub beta_r: f64,
    pub temperature: f64,
    pub symmetric_cl: bool,
    pub pooling: Pooling,
    pub train_encoder: bool,
    pub seed: u64,
    pub mode: Mode,
    pub epochs: usize,
    pub patience: usize,
    pub aug_epochs: usize,
    pub aug_patience: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            augmenter_checkpoint: None,
            emb_dim: 64,
            layers: 1,
            heads: 1,
            dropout: 0.5,
            max_len: 50,
            max_aug_len: 60,
            max_insert: 5,
            lr: 0.001,
            batch_size: 256,
            alpha: 0.1,
            beta: 0.005,
            p_keep: 0.4,
            p_delete: 0.5,
            p_insert: 0.1,
            gamma: 0.5,
            eta: 0.6,
            beta_r: 0.5,
            temperature: 1.0,
            symmetric_cl: true,
            pooling: Pooling::Last,
            train_encoder: true,
            seed: 42,
            mode: Mode::Full,
            epochs: 200,
            patience: 20,
            aug_epochs: 50,
            aug_patience: 5,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data" => self.data = path_or_none(v),
            "augmenter_checkpoint" => self.augmenter_checkpoint = path_or_none(v),
            "emb_dim" => self.emb_dim = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "max_len" => self.max_len = parse_value(key, v)?,
            "max_aug_len" => self.max_aug_len = parse_value(key, v)?,
            "max_insert" => self.max_insert = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "p_keep" => self.p_keep = parse_value(key, v)?,
            "p_delete" => self.p_delete = parse_value(key, v)?,
            "p_insert" => self.p_insert = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "eta" => self.eta = parse_value(key, v)?,
            "beta_r" => self.beta_r = parse_value(key, v)?,
            "temperature" => self.temperature = parse_value(key, v)?,
            "symmetric_cl" => self.symmetric_cl = parse_bool(key, v)?,
            "pooling" => self.pooling = v.parse()?,
            "train_encoder" => self.train_encoder = parse_bool(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "mode" => self.mode = v.parse()?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "aug_epochs" => self.aug_epochs = parse_value(key, v)?,
            "aug_patience" => self.aug_patience = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1).validate()?;
        self.corruption().validate()?;
        self.aug().validate()?;
        if self.max_len == 0 || self.max_len >= self.max_aug_len {
            return Err(Error::Config(format!(
                "max_len {} must be positive and below max_aug_len {}",
                self.max_len, self.max_aug_len
            )));
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("lr and temperature must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        Ok(())
    }

    pub fn model_config(&self, item_count: usize) -> ModelConfig {
        ModelConfig {
            item_count,
            emb_dim: self.emb_dim,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            max_aug_len: self.max_aug_len,
            max_insert: self.max_insert,
            causal: true,
        }
    }

    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig {
            p_keep: self.p_keep,
            p_delete: self.p_delete,
            p_insert: self.p_insert,
            max_insert_run: self.max_insert,
        }
    }

    pub fn aug(&self) -> AugConfig {
        AugConfig { gamma: self.gamma, eta: self.eta, beta_r: self.beta_r }
    }

    pub fn joint(&self) -> JointConfig {
        JointConfig {
            alpha: self.alpha,
            beta: self.beta,
            contrast: ContrastConfig { temperature: self.temperature, symmetric: self.symmetric_cl },
            pooling: self.pooling,
            aug: self.aug(),
            corruption: self.corruption(),
            train_encoder: self.train_encoder,
        }
    }

    /// Serializes every key; `apply_text` on the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pooling = match self.pooling {
            Pooling::Last => "last",
            Pooling::Mean => "mean",
        };
        format!(
            "data = {}\naugmenter_checkpoint = {}\nemb_dim = {}\nlayers = {}\nheads = {}\ndropout = {}\n\
             max_len = {}\nmax_aug_len = {}\nmax_insert = {}\nlr = {}\nbatch_size = {}\nalpha = {}\nbeta = {}\n\
             p_keep = {}\np_delete = {}\np_insert = {}\ngamma = {}\neta = {}\nbeta_r = {}\ntemperature = {}\n\
             symmetric_cl = {}\npooling = {}\ntrain_encoder = {}\nseed = {}\nmode = {}\nepochs = {}\npatience = {}\n\
             aug_epochs = {}\naug_patience = {}\n",
            p(&self.data),
            p(&self.augmenter_checkpoint),
            self.emb_dim,
            self.layers,
            self.heads,
            self.dropout,
            self.max_len,
            self.max_aug_len,
            self.max_insert,
            self.lr,
            self.batch_size,
            self.alpha,
            self.beta,
            self.p_keep,
            self.p_delete,
            self.p_insert,
            self.gamma,
            self.eta,
            self.beta_r,
            self.temperature,
            self.symmetric_cl,
            pooling,
            self.train_encoder,
            self.seed,
            self.mode,
            self.epochs,
            self.patience,
            self.aug_epochs,
            self.aug_patience,
        )
    }
}
