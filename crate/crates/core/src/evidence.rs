//! Evidence encoding, nearest-row selection and the selection reward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{nearest_row, ParamStore, Tape, Tensor, Var};
use crate::retrieval::EvidenceSet;
use crate::text::{Vocab, CLS, EMPTY};
use crate::transformer::{Stack, TransformerConfig};

pub const EVIDENCE: &str = "evidence";

/// Token ids of one evidence item as the generator sees it; the empty
/// placeholder becomes `[EMPTY]`.
pub fn evidence_tokens(vocab: &Vocab, item_tokens: &[String]) -> Vec<usize> {
    if item_tokens.is_empty() {
        vec![EMPTY]
    } else {
        vocab.encode(item_tokens)
    }
}

/// Encoder input: the evidence tokens followed by CLS.
pub fn evidence_sequence(tokens: &[usize]) -> Vec<usize> {
    let mut s = if tokens.is_empty() { vec![EMPTY] } else { tokens.to_vec() };
    s.push(CLS);
    s
}

/// Generator-side token ids for every item of `set`, placeholder last.
pub fn set_tokens(vocab: &Vocab, set: &EvidenceSet) -> Vec<Vec<usize>> {
    set.items().iter().map(|it| evidence_tokens(vocab, &it.tokens)).collect()
}

/// Pooled vector of one item on `tape`.
pub fn encode_item(
    tape: &mut Tape,
    cfg: &TransformerConfig,
    store: &ParamStore,
    tokens: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    Stack::new(cfg, EVIDENCE).encode(tape, store, &evidence_sequence(tokens), rng)
}

/// Context vectors `H_C`, one row per item in order (evaluation mode).
pub fn encode_evidence(cfg: &TransformerConfig, store: &ParamStore, items: &[Vec<usize>]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::DegenerateBatch("evidence set without items".into()));
    }
    let mut data = Vec::with_capacity(items.len() * cfg.d_model);
    for it in items {
        let mut tape = Tape::inference();
        let v = encode_item(&mut tape, cfg, store, it, None)?;
        data.extend_from_slice(tape.value(v).data());
    }
    Tensor::matrix(items.len(), cfg.d_model, data)
}

/// Row of `h_c` nearest to `z`; ties go to the lower index.
pub fn select_evidence(h_c: &Tensor, z: &[f64]) -> Result<usize> {
    if h_c.last_dim() != z.len() {
        return Err(Error::Dimension { op: "select_evidence", lhs: h_c.shape().to_vec(), rhs: vec![z.len()] });
    }
    Ok(nearest_row(h_c, z))
}

/// `+1` when the chosen item makes the gold inference strictly more likely
/// than the counter item, otherwise `−1`. Inputs are log-probabilities.
pub fn compute_reward(logp_chosen: f64, logp_counter: f64) -> f64 {
    if logp_chosen - logp_counter > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Uniform draw over item indices other than `chosen`; `None` when the set
/// has a single item.
pub fn draw_counter(n_items: usize, chosen: usize, rng: &mut impl Rng) -> Option<usize> {
    if n_items < 2 {
        return None;
    }
    let r = rng.gen_range(0..n_items - 1);
    Some(if r >= chosen { r + 1 } else { r })
}

/// `R·‖h_c − z‖²`
pub fn selection_term(tape: &mut Tape, h_c: Var, z: Var, reward: f64) -> Result<Var> {
    let d = tape.sub(h_c, z)?;
    let s = tape.sum_sq(d);
    Ok(tape.scale(s, reward))
}
