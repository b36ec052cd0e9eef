//! Evidence-conditioned decoder: input assembly, scoring and beam search.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, ParamStore, Tape, Var};
use crate::text::{BOS, EOS, MAX_EVENT_TOKENS, MAX_EVIDENCE_TOKENS, MAX_INFERENCE_TOKENS, SEP};
use crate::transformer::{Stack, TransformerConfig};

pub const GENERATOR: &str = "generator";
pub const DEFAULT_BEAM_WIDTH: usize = 10;
pub const MAX_DECODE_STEPS: usize = MAX_INFERENCE_TOKENS;

/// Evidence, event and dimension tag of one generation request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorInput {
    pub evidence: Vec<usize>,
    pub event: Vec<usize>,
    pub dimension: usize,
}

impl GeneratorInput {
    /// Checks every segment against its limit and the whole sequence, with
    /// room for a full-length target, against `max_len`.
    pub fn new(evidence: Vec<usize>, event: Vec<usize>, dimension: usize, max_len: usize) -> Result<Self> {
        for (segment, len, max) in
            [("evidence", evidence.len(), MAX_EVIDENCE_TOKENS), ("event", event.len(), MAX_EVENT_TOKENS)]
        {
            if len > max {
                return Err(Error::Length { segment: segment.into(), len, max });
            }
        }
        let input = Self { evidence, event, dimension };
        let need = input.prefix_len() + 1 + MAX_INFERENCE_TOKENS;
        if need > max_len {
            return Err(Error::Length { segment: "evidence + event + inference".into(), len: need, max: max_len });
        }
        Ok(input)
    }

    fn prefix_len(&self) -> usize {
        self.evidence.len() + self.event.len() + 2
    }

    /// `[c; SEP; x; dim]`
    pub fn prefix(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.prefix_len() + MAX_INFERENCE_TOKENS + 2);
        s.extend_from_slice(&self.evidence);
        s.push(SEP);
        s.extend_from_slice(&self.event);
        s.push(self.dimension);
        s
    }

    /// `[c; SEP; x; dim; BOS; y_<t]`
    pub fn sequence(&self, target_prefix: &[usize]) -> Vec<usize> {
        let mut s = self.prefix();
        s.push(BOS);
        s.extend_from_slice(target_prefix);
        s
    }
}

/// Mean NLL of `inference` followed by EOS on `tape`.
pub fn generator_nll(
    tape: &mut Tape,
    cfg: &TransformerConfig,
    store: &ParamStore,
    input: &GeneratorInput,
    inference: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let (logits, targets) = target_logits(tape, cfg, store, input, inference, rng)?;
    let mask = vec![true; targets.len()];
    tape.cross_entropy(logits, &targets, &mask)
}

/// Logits for the target rows only, and their targets (`y` then EOS).
fn target_logits(
    tape: &mut Tape,
    cfg: &TransformerConfig,
    store: &ParamStore,
    input: &GeneratorInput,
    inference: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<usize>)> {
    if inference.len() > MAX_INFERENCE_TOKENS {
        return Err(Error::Length { segment: "inference".into(), len: inference.len(), max: MAX_INFERENCE_TOKENS });
    }
    let stack = Stack::new(cfg, GENERATOR);
    let seq = input.sequence(inference);
    let h = stack.decode_hidden(tape, store, &seq, rng)?;
    let start = input.prefix_len();
    let rows = tape.slice_rows(h, start, inference.len() + 1)?;
    let logits = stack.project(tape, store, rows)?;
    let mut targets = inference.to_vec();
    targets.push(EOS);
    Ok((logits, targets))
}

/// Summed log-probability of `target`, which must end with EOS.
pub fn sequence_logprob(
    cfg: &TransformerConfig,
    store: &ParamStore,
    input: &GeneratorInput,
    target: &[usize],
) -> Result<f64> {
    let Some((&EOS, body)) = target.split_last() else {
        return Err(Error::Index("target sequence must end with EOS".into()));
    };
    let mut tape = Tape::inference();
    let (logits, targets) = target_logits(&mut tape, cfg, store, input, body, None)?;
    let lv = tape.value(logits);
    Ok(targets.iter().enumerate().map(|(i, &t)| log_softmax(lv.row(i))[t]).sum())
}

/// Source of next-token log-probabilities for a decoded prefix. Entries of
/// `-inf` are never expanded.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Scores continuations with the generator, never proposing reserved tokens
/// other than EOS.
pub struct GeneratorScorer<'a> {
    pub cfg: &'a TransformerConfig,
    pub store: &'a ParamStore,
    pub input: &'a GeneratorInput,
    pub banned: Vec<usize>,
}

impl StepScorer for GeneratorScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let stack = Stack::new(self.cfg, GENERATOR);
        let seq = self.input.sequence(prefix);
        let h = stack.decode_hidden(&mut tape, self.store, &seq, None)?;
        let last = tape.slice_rows(h, seq.len() - 1, 1)?;
        let logits = stack.project(&mut tape, self.store, last)?;
        let mut lp = log_softmax(tape.value(logits).data());
        for &b in &self.banned {
            lp[b] = f64::NEG_INFINITY;
        }
        Ok(lp)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthNorm {
    None,
    #[default]
    Mean,
}

impl LengthNorm {
    pub fn score(self, logprob: f64, len: usize) -> f64 {
        match self {
            LengthNorm::None => logprob,
            LengthNorm::Mean => logprob / len.max(1) as f64,
        }
    }
}

impl std::str::FromStr for LengthNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LengthNorm::None),
            "mean" => Ok(LengthNorm::Mean),
            _ => Err(Error::Config(format!("length norm must be none or mean, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Decoded tokens; finished hypotheses end with EOS.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the closing EOS.
    pub fn body(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, body)) if self.finished => body,
            _ => &self.tokens,
        }
    }
}

fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `width` best expansions per step; expansions ending in `eos`
/// leave the beam as finished hypotheses. Returns the best `width` finished
/// hypotheses, or the surviving unfinished ones if none finished.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    width: usize,
    max_steps: usize,
    eos: usize,
    norm: LengthNorm,
) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis { tokens: Vec::new(), logprob: 0.0, score: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_steps {
        let mut cands = Vec::new();
        for h in &alive {
            let lp = scorer.next_log_probs(&h.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                if !l.is_finite() {
                    return Err(Error::Numeric("beam search log-probability".into()));
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let logprob = h.logprob + l;
                cands.push(Hypothesis {
                    score: norm.score(logprob, tokens.len()),
                    tokens,
                    logprob,
                    finished: tok == eos,
                });
            }
        }
        cands.sort_by(rank_order);
        cands.truncate(width);
        alive.clear();
        for c in cands {
            if c.finished {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    let mut out = if finished.is_empty() { alive } else { finished };
    out.sort_by(rank_order);
    out.truncate(width);
    Ok(out)
}
