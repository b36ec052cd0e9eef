//! Codebook quantization, the reconstruction objective with straight-through
//! routing, the empirical prior and the learned prior classifier.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{nearest_row, softmax, ParamStore, Tape, Tensor, Var};
use crate::text::{EventGroup, BOS, CLS, EOS, SEP};
use crate::transformer::{Stack, TransformerConfig};

pub const DEFAULT_BETA: f64 = 0.25;
pub const CODEBOOK_INIT_BOUND: f64 = 0.1;

pub const POSTERIOR: &str = "posterior";
pub const CODEBOOK: &str = "codebook";
pub const RECON: &str = "recon";
pub const PRIOR: &str = "prior";
pub const PRIOR_HEAD: &str = "prior_head.w_k";

/// `[x; dim; SEP; y; CLS]`
pub fn posterior_sequence(event: &[usize], dim: usize, inference: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(event.len() + inference.len() + 3);
    s.extend_from_slice(event);
    s.extend([dim, SEP]);
    s.extend_from_slice(inference);
    s.push(CLS);
    s
}

/// `[x; dim; CLS]`
pub fn prior_sequence(event: &[usize], dim: usize) -> Vec<usize> {
    let mut s = event.to_vec();
    s.extend([dim, CLS]);
    s
}

/// Decoder input `[x; dim; BOS; y]`, next-token targets and the mask that
/// restricts the loss to `y` and the closing EOS.
pub fn target_sequence(prefix: &[usize], inference: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let mut input = prefix.to_vec();
    input.push(BOS);
    input.extend_from_slice(inference);
    let start = prefix.len();
    let mut targets = vec![0; input.len()];
    let mut mask = vec![false; input.len()];
    for (i, &t) in inference.iter().chain(std::iter::once(&EOS)).enumerate() {
        targets[start + i] = t;
        mask[start + i] = true;
    }
    (input, targets, mask)
}

pub fn init_codebook(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if k < 2 {
        return Err(Error::Config(format!("codebook needs at least 2 rows, got {k}")));
    }
    Ok(Tensor::uniform(&[k, d], CODEBOOK_INIT_BOUND, rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorAssignment {
    pub index: usize,
    pub z: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn posterior_assign(codebook: &Tensor, h: &[f64]) -> Result<PosteriorAssignment> {
    if codebook.shape().len() != 2 || codebook.last_dim() != h.len() {
        return Err(Error::Dimension { op: "posterior_assign", lhs: codebook.shape().to_vec(), rhs: vec![h.len()] });
    }
    let index = nearest_row(codebook, h);
    Ok(PosteriorAssignment { index, z: codebook.row(index).to_vec(), h: h.to_vec() })
}

/// Quantized vector on the tape: returns the code index, `z'` as a row of the
/// codebook variable, and the straight-through input `h + sg(z' − h)`.
pub fn quantize(tape: &mut Tape, h: Var, codebook: Var) -> Result<(usize, Var, Var)> {
    let index = posterior_assign(tape.value(codebook), tape.value(h).data())?.index;
    let zq = tape.gather_rows(codebook, &[index])?;
    let diff = tape.sub(zq, h)?;
    let diff = tape.stop_gradient(diff);
    let st = tape.add(h, diff)?;
    Ok((index, zq, st))
}

#[derive(Clone, Copy, Debug)]
pub struct VqLoss {
    pub total: Var,
    pub codebook_term: Var,
    pub commitment: Var,
}

/// `recon_nll + ‖sg(h) − z'‖² + β‖h − sg(z')‖²`
pub fn vqvae_loss(tape: &mut Tape, h: Var, zq: Var, recon_nll: Var, beta: f64) -> Result<VqLoss> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let h_sg = tape.stop_gradient(h);
    let d1 = tape.sub(h_sg, zq)?;
    let codebook_term = tape.sum_sq(d1);
    let z_sg = tape.stop_gradient(zq);
    let d2 = tape.sub(h, z_sg)?;
    let c = tape.sum_sq(d2);
    let commitment = tape.scale(c, beta);
    let t = tape.add(recon_nll, codebook_term)?;
    let total = tape.add(t, commitment)?;
    Ok(VqLoss { total, codebook_term, commitment })
}

/// Code frequencies per group, counted in integers before the division.
pub fn empirical_prior(groups: &[EventGroup], assignments: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| {
            if g.members.is_empty() {
                return Err(Error::DegenerateBatch(format!("group {:?} has no members", g.key)));
            }
            let mut counts = vec![0u64; k];
            for &m in &g.members {
                let a = *assignments.get(m).ok_or_else(|| Error::Index(format!("example {m} has no assignment")))?;
                if a >= k {
                    return Err(Error::Index(format!("code {a} outside codebook of {k}")));
                }
                counts[a] += 1;
            }
            let n = g.members.len() as f64;
            Ok(counts.iter().map(|&c| c as f64 / n).collect())
        })
        .collect()
}

/// Prior logits `h·W_k` for `[x; dim; CLS]`.
pub fn prior_logits(
    tape: &mut Tape,
    cfg: &TransformerConfig,
    store: &ParamStore,
    tokens: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let h = Stack::new(cfg, PRIOR).encode(tape, store, tokens, rng)?;
    let w = tape.param(store, PRIOR_HEAD)?;
    tape.matmul(h, w)
}

pub fn prior_forward(cfg: &TransformerConfig, store: &ParamStore, tokens: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let l = prior_logits(&mut tape, cfg, store, tokens, None)?;
    Ok(softmax(tape.value(l).data()))
}

/// `KL(p_emp ‖ softmax(logits))` on the tape; entries with `p_emp = 0`
/// contribute nothing.
pub fn prior_loss(tape: &mut Tape, p_emp: &[f64], logits: Var) -> Result<Var> {
    if p_emp.len() != tape.value(logits).len() {
        return Err(Error::Dimension { op: "prior_loss", lhs: vec![p_emp.len()], rhs: tape.shape(logits).to_vec() });
    }
    let neg_entropy: f64 = p_emp.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let logq = tape.log_softmax(logits)?;
    let cross = tape.mul_const(logq, p_emp.to_vec())?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0);
    let c = tape.constant(Tensor::scalar(neg_entropy));
    tape.add(neg, c)
}

/// Plain `KL(p ‖ q)` with `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
}

pub fn sample_prior<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Result<usize> {
    let w = WeightedIndex::new(dist).map_err(|e| Error::Numeric(format!("prior distribution: {e}")))?;
    Ok(w.sample(rng))
}
