//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Every key has a default, listed in
//! [`KEYS`]; unknown keys are rejected. Command-line `--set key=value`
//! overrides are applied after the file, and the effective configuration is
//! written back with [`RunConfig::render`] so a run can be replayed from it.

use std::path::Path;
use std::str::FromStr;

use crate::corpus::BioMode;
use crate::encoder::{EncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::lajoint::ArchConfig;
use crate::trainer::TrainConfig;

/// Encoder hyper-parameters that do not depend on the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderShape {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderShape {
    fn default() -> Self {
        EncoderShape {
            layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            max_len: 64,
            dropout: 0.1,
        }
    }
}

impl EncoderShape {
    pub fn config(&self, vocab: &Vocabulary, seed: u64) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size: vocab.len(),
            dropout: self.dropout,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderShape,
    pub arch: ArchConfig,
    pub bio_mode: BioMode,
    pub source_locale: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            encoder: EncoderShape::default(),
            arch: ArchConfig::default(),
            bio_mode: BioMode::Strict,
            source_locale: "en".into(),
        }
    }
}

/// Every accepted key with its meaning. Defaults come from `RunConfig::default()`.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialization, augmentation, shuffling and dropout"),
    ("source_locale", "locale of the training corpus"),
    ("bio_mode", "strict rejects malformed BIO tags, lenient repairs them"),
    ("train.batch_size", "utterances per optimizer step"),
    ("train.epochs", "passes over the training set"),
    ("train.lr_encoder", "peak learning rate for encoder and label parameters"),
    ("train.lr_head", "peak learning rate for intent and projection heads"),
    ("train.weight_decay", "decoupled weight decay on matrices"),
    ("train.warmup_fraction", "share of steps with linear warmup before linear decay"),
    ("train.clip_norm", "global gradient-norm clip"),
    ("train.train_fraction", "share of the training set used, in (0, 1]"),
    ("cs.sentence_ratio", "probability that an utterance is code-switched"),
    ("cs.word_ratio", "probability that a covered word is replaced"),
    ("cs.target_locales", "comma-separated dictionary targets to use; empty means all"),
    ("cl.lambda_u", "weight of the utterance-level contrastive loss"),
    ("cl.lambda_s", "weight of the slot-level contrastive loss"),
    ("cl.lambda_w", "weight of the word-level contrastive loss"),
    ("cl.margin_u", "utterance-level triplet margin"),
    ("cl.margin_s", "slot-level triplet margin"),
    ("cl.margin_w", "word-level triplet margin"),
    ("cl.n_w", "negative words sampled per anchor word"),
    ("pool.p_v", "most frequent values kept per slot descriptor"),
    ("pool.p_s", "similar slots per slot"),
    ("pool.n_s", "negative utterances per code-switched utterance"),
    ("encoder.layers", "transformer layers"),
    ("encoder.d_model", "hidden width"),
    ("encoder.heads", "attention heads"),
    ("encoder.d_ff", "feed-forward width"),
    ("encoder.max_len", "longest input, label positions included"),
    ("encoder.dropout", "dropout probability during training"),
    ("arch.compressor", "learned label compressor; false sums the embeddings"),
    ("arch.projector", "learned projector; false uses identity"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "seed" => {
                t.seed = parse(key, v)?;
                t.codeswitch.seed = t.seed;
            }
            "source_locale" => self.source_locale = v.to_string(),
            "bio_mode" => {
                self.bio_mode = match v {
                    "strict" => BioMode::Strict,
                    "lenient" => BioMode::Lenient,
                    _ => return Err(Error::Config(format!("bio_mode: expected strict or lenient, got {v:?}"))),
                }
            }
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.lr_encoder" => t.lr_encoder = parse(key, v)?,
            "train.lr_head" => t.lr_head = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.warmup_fraction" => t.warmup_fraction = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.train_fraction" => t.train_fraction = parse(key, v)?,
            "cs.sentence_ratio" => t.codeswitch.sentence_ratio = parse(key, v)?,
            "cs.word_ratio" => t.codeswitch.word_ratio = parse(key, v)?,
            "cs.target_locales" => {
                t.codeswitch.target_locales = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "cl.lambda_u" => t.cl.lambda_u = parse(key, v)?,
            "cl.lambda_s" => t.cl.lambda_s = parse(key, v)?,
            "cl.lambda_w" => t.cl.lambda_w = parse(key, v)?,
            "cl.margin_u" => t.cl.margin_u = parse(key, v)?,
            "cl.margin_s" => t.cl.margin_s = parse(key, v)?,
            "cl.margin_w" => t.cl.margin_w = parse(key, v)?,
            "cl.n_w" => t.cl.n_w = parse(key, v)?,
            "pool.p_v" => t.negpool.p_v = parse(key, v)?,
            "pool.p_s" => t.negpool.p_s = parse(key, v)?,
            "pool.n_s" => t.negpool.n_s = parse(key, v)?,
            "encoder.layers" => self.encoder.layers = parse(key, v)?,
            "encoder.d_model" => self.encoder.d_model = parse(key, v)?,
            "encoder.heads" => self.encoder.heads = parse(key, v)?,
            "encoder.d_ff" => self.encoder.d_ff = parse(key, v)?,
            "encoder.max_len" => self.encoder.max_len = parse(key, v)?,
            "encoder.dropout" => self.encoder.dropout = parse(key, v)?,
            "arch.compressor" => self.arch.compressor = parse(key, v)?,
            "arch.projector" => self.arch.projector = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "source_locale" => self.source_locale.clone(),
            "bio_mode" => match self.bio_mode {
                BioMode::Strict => "strict".into(),
                BioMode::Lenient => "lenient".into(),
            },
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.lr_encoder" => t.lr_encoder.to_string(),
            "train.lr_head" => t.lr_head.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.warmup_fraction" => t.warmup_fraction.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.train_fraction" => t.train_fraction.to_string(),
            "cs.sentence_ratio" => t.codeswitch.sentence_ratio.to_string(),
            "cs.word_ratio" => t.codeswitch.word_ratio.to_string(),
            "cs.target_locales" => t.codeswitch.target_locales.join(","),
            "cl.lambda_u" => t.cl.lambda_u.to_string(),
            "cl.lambda_s" => t.cl.lambda_s.to_string(),
            "cl.lambda_w" => t.cl.lambda_w.to_string(),
            "cl.margin_u" => t.cl.margin_u.to_string(),
            "cl.margin_s" => t.cl.margin_s.to_string(),
            "cl.margin_w" => t.cl.margin_w.to_string(),
            "cl.n_w" => t.cl.n_w.to_string(),
            "pool.p_v" => t.negpool.p_v.to_string(),
            "pool.p_s" => t.negpool.p_s.to_string(),
            "pool.n_s" => t.negpool.n_s.to_string(),
            "encoder.layers" => self.encoder.layers.to_string(),
            "encoder.d_model" => self.encoder.d_model.to_string(),
            "encoder.heads" => self.encoder.heads.to_string(),
            "encoder.d_ff" => self.encoder.d_ff.to_string(),
            "encoder.max_len" => self.encoder.max_len.to_string(),
            "encoder.dropout" => self.encoder.dropout.to_string(),
            "arch.compressor" => self.arch.compressor.to_string(),
            "arch.projector" => self.arch.projector.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?}: expected key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// The effective configuration, one documented key per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).expect("every key renders")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.encoder;
        if e.layers == 0 || e.d_model == 0 || e.heads == 0 || !e.d_model.is_multiple_of(e.heads) {
            return Err(Error::Config(format!(
                "encoder: need layers > 0 and d_model ({}) divisible by heads ({})",
                e.d_model, e.heads
            )));
        }
        if !(0.0..1.0).contains(&e.dropout) {
            return Err(Error::Config(format!("encoder.dropout must be in [0, 1), got {}", e.dropout)));
        }
        Ok(())
    }

    /// Settings used for the generated toy corpus: a small encoder trained
    /// from scratch needs larger learning rates than a pretrained one.
    pub fn toy() -> Self {
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 16;
        cfg.train.lr_encoder = 3e-3;
        cfg.train.lr_head = 3e-3;
        cfg.encoder.max_len = 32;
        cfg
    }
}
