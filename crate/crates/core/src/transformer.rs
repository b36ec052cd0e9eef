//! Post-LN transformer stacks on the tape: a bidirectional encoder with
//! last-position pooling, a causal decoder with tied output embedding, and a
//! decoder variant conditioned on a latent vector.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::text::{CLS, PAD};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// Small defaults that train on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, n_layers: 2, n_heads: 4, d_model: 128, d_ff: 512, max_len: 168, dropout: 0.1 }
    }

    /// Dimensions of the full-size configuration.
    pub fn full_size(vocab_size: usize) -> Self {
        Self { vocab_size, n_layers: 12, n_heads: 12, d_model: 768, d_ff: 3072, max_len: 168, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary too small".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Names of every tensor of a stack stored under `prefix`.
pub fn param_names(cfg: &TransformerConfig, prefix: &str) -> Vec<String> {
    let mut names = vec![format!("{prefix}.tok_emb"), format!("{prefix}.pos_emb")];
    for l in 0..cfg.n_layers {
        for p in [
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1.g", "ln1.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b",
            "ln2.g", "ln2.b",
        ] {
            names.push(format!("{prefix}.l{l}.{p}"));
        }
    }
    names
}

/// Adds freshly initialized stack parameters under `prefix`: embeddings
/// uniform(±0.1), weight matrices uniform(±1/√fan_in), zero biases, unit
/// layer-norm gains.
pub fn init_params(cfg: &TransformerConfig, prefix: &str, rng: &mut ChaCha8Rng, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let (d, f) = (cfg.d_model, cfg.d_ff);
    store.insert(format!("{prefix}.tok_emb"), Tensor::uniform(&[cfg.vocab_size, d], 0.1, rng));
    store.insert(format!("{prefix}.pos_emb"), Tensor::uniform(&[cfg.max_len, d], 0.1, rng));
    let lin = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
    };
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("{prefix}.l{l}.{s}");
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(n(w), lin(d, d, rng));
        }
        for b in ["bq", "bk", "bv", "bo", "ln1.b", "ln2.b", "ff2.b"] {
            store.insert(n(b), Tensor::zeros(&[d]));
        }
        store.insert(n("ff1.w"), lin(d, f, rng));
        store.insert(n("ff1.b"), Tensor::zeros(&[f]));
        store.insert(n("ff2.w"), lin(f, d, rng));
        store.insert(n("ln1.g"), Tensor::full(&[d], 1.0));
        store.insert(n("ln2.g"), Tensor::full(&[d], 1.0));
    }
    Ok(())
}

/// Where the latent vector enters the latent-conditioned decoder. All sites
/// are on by default; switching one off exists for diagnostics and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSites {
    pub input: bool,
    pub query: bool,
    pub key: bool,
    pub value: bool,
    pub top: bool,
}

impl LatentSites {
    pub const ALL: Self = Self { input: true, query: true, key: true, value: true, top: true };
}

struct Latent {
    z: Var,
    sites: LatentSites,
}

/// A stack bound to a parameter prefix. `dropout_rng` switches training mode
/// on; `None` is evaluation mode.
pub struct Stack<'a> {
    pub cfg: &'a TransformerConfig,
    pub prefix: &'a str,
}

impl<'a> Stack<'a> {
    pub fn new(cfg: &'a TransformerConfig, prefix: &'a str) -> Self {
        Self { cfg, prefix }
    }

    fn p(&self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        tape.param(store, &format!("{}.{name}", self.prefix))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Length { segment: "input".into(), len: 0, max: self.cfg.max_len });
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::Length { segment: "input".into(), len: tokens.len(), max: self.cfg.max_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..tape.value(x).len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn linear(&self, tape: &mut Tape, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.p(tape, store, w)?;
        let b = self.p(tape, store, b)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Top-layer hidden states `[T × d]`.
    fn hidden(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        causal: bool,
        latent: Option<&Latent>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = self.cfg;
        let t_len = tokens.len();
        let emb = self.p(tape, store, "tok_emb")?;
        let pos = self.p(tape, store, "pos_emb")?;
        let e = tape.gather_rows(emb, tokens)?;
        let pe = tape.slice_rows(pos, 0, t_len)?;
        let mut h = tape.add(e, pe)?;
        if let Some(lat) = latent.filter(|l| l.sites.input) {
            h = tape.add_row(h, lat.z)?;
        }
        h = self.dropout(tape, h, rng.as_deref_mut())?;

        // Padding keys are never attended; causal rows also skip the future.
        let mut mask = vec![false; t_len * t_len];
        for i in 0..t_len {
            for j in 0..t_len {
                mask[i * t_len + j] = tokens[j] != PAD && (!causal || j <= i);
            }
        }
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("l{l}.{s}");
            let mut q = self.linear(tape, store, h, &n("wq"), &n("bq"))?;
            let mut k = self.linear(tape, store, h, &n("wk"), &n("bk"))?;
            let mut v = self.linear(tape, store, h, &n("wv"), &n("bv"))?;
            if let Some(lat) = latent {
                if lat.sites.query {
                    q = tape.add_row(q, lat.z)?;
                }
                if lat.sites.key {
                    k = tape.add_row(k, lat.z)?;
                }
                if lat.sites.value {
                    v = tape.add_row(v, lat.z)?;
                }
            }
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, scale);
                let a = tape.softmax_masked(s, Some(&mask))?;
                heads.push(tape.matmul(a, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let att = self.linear(tape, store, cat, &n("wo"), &n("bo"))?;
            let att = self.dropout(tape, att, rng.as_deref_mut())?;
            let res = tape.add(att, h)?;
            let g1 = self.p(tape, store, &n("ln1.g"))?;
            let b1 = self.p(tape, store, &n("ln1.b"))?;
            let g = tape.layer_norm(res, g1, b1, LN_EPS)?;

            let f = self.linear(tape, store, g, &n("ff1.w"), &n("ff1.b"))?;
            let f = tape.gelu(f);
            let f = self.linear(tape, store, f, &n("ff2.w"), &n("ff2.b"))?;
            let f = self.dropout(tape, f, rng.as_deref_mut())?;
            let res = tape.add(f, g)?;
            let g2 = self.p(tape, store, &n("ln2.g"))?;
            let b2 = self.p(tape, store, &n("ln2.b"))?;
            h = tape.layer_norm(res, g2, b2, LN_EPS)?;
        }
        if let Some(lat) = latent.filter(|l| l.sites.top) {
            h = tape.add_row(h, lat.z)?;
        }
        Ok(h)
    }

    /// Bidirectional pass over a sequence ending in CLS; returns the pooled
    /// `[1 × d]` top-layer state at the last position.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if tokens.last() != Some(&CLS) {
            return Err(Error::Index("encoder input must end with the CLS token".into()));
        }
        let h = self.hidden(tape, store, tokens, false, None, rng)?;
        tape.slice_rows(h, tokens.len() - 1, 1)
    }

    /// Causal top-layer hidden states `[T × d]`.
    pub fn decode_hidden(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.hidden(tape, store, tokens, true, None, rng)
    }

    pub fn latent_decode_hidden(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        z: Var,
        sites: LatentSites,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let zw = tape.value(z).len();
        if zw != self.cfg.d_model {
            return Err(Error::Dimension { op: "latent width", lhs: vec![zw], rhs: vec![self.cfg.d_model] });
        }
        let lat = Latent { z, sites };
        self.hidden(tape, store, tokens, true, Some(&lat), rng)
    }

    /// Next-token logits for hidden rows via the tied embedding.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let emb = self.p(tape, store, "tok_emb")?;
        tape.matmul_nt(hidden, emb)
    }

    /// Per-position next-token logits `[T × V]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.decode_hidden(tape, store, tokens, rng)?;
        self.project(tape, store, h)
    }

    pub fn latent_decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        z: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.latent_decode_hidden(tape, store, tokens, z, LatentSites::ALL, rng)?;
        self.project(tape, store, h)
    }
}

/// Evaluation-mode pooled encoder vector.
pub fn encoder_forward(
    cfg: &TransformerConfig,
    prefix: &str,
    store: &ParamStore,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let v = Stack::new(cfg, prefix).encode(&mut tape, store, tokens, None)?;
    Ok(tape.value(v).data().to_vec())
}

/// Evaluation-mode causal logits `[T × V]`.
pub fn decoder_forward(cfg: &TransformerConfig, prefix: &str, store: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = Stack::new(cfg, prefix).decode(&mut tape, store, tokens, None)?;
    Ok(tape.value(v).clone())
}

pub fn latent_conditioned_decoder_forward(
    cfg: &TransformerConfig,
    prefix: &str,
    store: &ParamStore,
    tokens: &[usize],
    z: &[f64],
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let zv = tape.constant(Tensor::vector(z.to_vec()));
    let v = Stack::new(cfg, prefix).latent_decode(&mut tape, store, tokens, zv, None)?;
    Ok(tape.value(v).clone())
}
