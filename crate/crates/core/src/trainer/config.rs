//! Flat `key = value` run configuration with `model.`, `train.`,
//! `retrieval.` and `generate.` sections.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::LengthNorm;
use crate::transformer::TransformerConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoEvidence,
    Top1Evidence,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_evidence" => Ok(Ablation::NoEvidence),
            "top1_evidence" => Ok(Ablation::Top1Evidence),
            _ => Err(Error::Config(format!("ablation must be full, no_evidence or top1_evidence, got {s:?}"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoEvidence => "no_evidence",
            Ablation::Top1Evidence => "top1_evidence",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub codebook_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 128, n_layers: 2, n_heads: 4, d_ff: 512, max_len: 168, dropout: 0.1, codebook_size: 64 }
    }
}

impl ModelConfig {
    /// Full-size dimensions: 12 layers, 12 heads, width 768, 400 codes.
    pub fn full_size() -> Self {
        Self { d_model: 768, n_layers: 12, n_heads: 12, d_ff: 3072, max_len: 168, dropout: 0.1, codebook_size: 400 }
    }

    pub fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub vqvae_steps: u64,
    pub prior_steps: u64,
    pub decoder_steps: u64,
    pub eval_every: u64,
    /// Evaluations without dev improvement before stopping; 0 disables.
    pub patience: u64,
    pub seed: u64,
    pub ablation: Ablation,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 64,
            beta: 0.25,
            vqvae_steps: 5000,
            prior_steps: 5000,
            decoder_steps: 5000,
            eval_every: 200,
            patience: 5,
            seed: 0,
            ablation: Ablation::Full,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 45 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub beams: usize,
    pub samples: usize,
    pub max_steps: usize,
    pub length_norm: LengthNorm,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { beams: 10, samples: 10, max_steps: 32, length_norm: LengthNorm::Mean }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub generate: GenerateConfig,
}

pub const KEYS: &[&str] = &[
    "model.d_model",
    "model.n_layers",
    "model.n_heads",
    "model.d_ff",
    "model.max_len",
    "model.dropout",
    "model.codebook_size",
    "train.lr",
    "train.batch_size",
    "train.beta",
    "train.vqvae_steps",
    "train.prior_steps",
    "train.decoder_steps",
    "train.eval_every",
    "train.patience",
    "train.seed",
    "train.ablation",
    "train.min_count",
    "retrieval.k",
    "generate.beams",
    "generate.samples",
    "generate.max_steps",
    "generate.length_norm",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.codebook_size" => self.model.codebook_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.beta" => self.train.beta = parse(key, v)?,
            "train.vqvae_steps" => self.train.vqvae_steps = parse(key, v)?,
            "train.prior_steps" => self.train.prior_steps = parse(key, v)?,
            "train.decoder_steps" => self.train.decoder_steps = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.ablation" => self.train.ablation = v.parse()?,
            "train.min_count" => self.train.min_count = parse(key, v)?,
            "retrieval.k" => self.retrieval.k = parse(key, v)?,
            "generate.beams" => self.generate.beams = parse(key, v)?,
            "generate.samples" => self.generate.samples = parse(key, v)?,
            "generate.max_steps" => self.generate.max_steps = parse(key, v)?,
            "generate.length_norm" => self.generate.length_norm = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model.d_model" => self.model.d_model.to_string(),
            "model.n_layers" => self.model.n_layers.to_string(),
            "model.n_heads" => self.model.n_heads.to_string(),
            "model.d_ff" => self.model.d_ff.to_string(),
            "model.max_len" => self.model.max_len.to_string(),
            "model.dropout" => self.model.dropout.to_string(),
            "model.codebook_size" => self.model.codebook_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.beta" => self.train.beta.to_string(),
            "train.vqvae_steps" => self.train.vqvae_steps.to_string(),
            "train.prior_steps" => self.train.prior_steps.to_string(),
            "train.decoder_steps" => self.train.decoder_steps.to_string(),
            "train.eval_every" => self.train.eval_every.to_string(),
            "train.patience" => self.train.patience.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.ablation" => self.train.ablation.to_string(),
            "train.min_count" => self.train.min_count.to_string(),
            "retrieval.k" => self.retrieval.k.to_string(),
            "generate.beams" => self.generate.beams.to_string(),
            "generate.samples" => self.generate.samples.to_string(),
            "generate.max_steps" => self.generate.max_steps.to_string(),
            "generate.length_norm" => match self.generate.length_norm {
                LengthNorm::None => "none".into(),
                LengthNorm::Mean => "mean".into(),
            },
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment. Errors carry
    /// `origin:line`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| {
                Error::Config(format!("{origin}:{}: {}", i + 1, e.to_string().trim_start_matches("config error: ")))
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(Error::Config(format!("expected `key = value`, got {line:?}"))))?;
            self.set(k.trim(), v).map_err(at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, "<snapshot>")?;
        c.validate()?;
        Ok(c)
    }

    /// Every key in canonical order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.transformer(16).validate()?;
        if self.model.codebook_size < 2 {
            return Err(Error::Config("model.codebook_size must be at least 2".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.train.beta > 0.0 && self.train.beta.is_finite()) {
            return Err(Error::Config("train.beta must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be positive".into()));
        }
        if self.generate.beams == 0 || self.generate.samples == 0 {
            return Err(Error::Config("generate.beams and generate.samples must be positive".into()));
        }
        if self.generate.max_steps == 0 || self.generate.max_steps > crate::generator::MAX_DECODE_STEPS {
            return Err(Error::Config(format!(
                "generate.max_steps must be in 1..={}",
                crate::generator::MAX_DECODE_STEPS
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.train.beta, 0.25);
        assert_eq!(c.train.lr, 5e-5);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.retrieval.k, 45);
        assert_eq!(c.generate.beams, 10);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.set("train.lr", "0.001").unwrap();
        c.set("train.ablation", "top1_evidence").unwrap();
        c.set("generate.length_norm", "none").unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let mut c = Config::default();
        let err = c.apply_text("# comment\ntrain.lr = 0.1\ntrain.foo = 3\n", "run.conf").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.foo") && msg.contains("run.conf:3"), "{msg}");
    }

    #[test]
    fn type_mismatch_named() {
        let mut c = Config::default();
        let msg = c.apply_text("model.d_model = wide", "f").unwrap_err().to_string();
        assert!(msg.contains("model.d_model") && msg.contains("f:1"), "{msg}");
    }
}
