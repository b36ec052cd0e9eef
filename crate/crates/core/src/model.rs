//! All networks of one run bound to a vocabulary and configuration, with
//! checkpoint conversion and candidate generation.

use std::collections::{BTreeMap, HashSet};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evidence::{encode_evidence, select_evidence, set_tokens, EVIDENCE};
use crate::generator::{beam_search, GeneratorInput, GeneratorScorer, GENERATOR};
use crate::numerics::{AdamState, ParamStore, Tape, Tensor};
use crate::retrieval::{EvidenceSet, InvertedIndex, Retriever};
use crate::text::{record_tokens, tokenize, Example, Record, Vocab, EMPTY, EOS, MAX_EVENT_TOKENS};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::{Ablation, Config};
use crate::transformer::{self, Stack, TransformerConfig};
use crate::vqvae::{
    self, posterior_assign, posterior_sequence, prior_sequence, PosteriorAssignment, CODEBOOK, POSTERIOR, PRIOR,
    PRIOR_HEAD, RECON,
};

pub const VOCAB_META: &str = "vocab";

/// Vocabulary over the training records and, when given, every indexed
/// paragraph so evidence tokens are representable.
pub fn build_vocab(records: &[Record], corpus: Option<&InvertedIndex>, min_count: usize) -> Vocab {
    let mut seqs = record_tokens(records);
    if let Some(index) = corpus {
        seqs.extend(index.docs().iter().map(|d| d.tokens.clone()));
    }
    Vocab::build(seqs.iter(), min_count)
}

/// Parameter prefixes owned by each stage.
pub fn stage_prefixes(stage: u8) -> &'static [&'static str] {
    match stage {
        1 => &[POSTERIOR, CODEBOOK, RECON],
        2 => &[PRIOR, "prior_head"],
        3 => &[EVIDENCE, GENERATOR],
        _ => &[],
    }
}

/// Whether `name` belongs to one of `prefixes` (dot-delimited, or exact).
pub fn has_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name == *p || (name.starts_with(p) && name.as_bytes().get(p.len()) == Some(&b'.')))
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocab,
    pub tcfg: TransformerConfig,
    pub params: ParamStore,
    pub prior_table: BTreeMap<String, Vec<f64>>,
}

/// One generated inference with the code and evidence that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub rank: usize,
    pub score: f64,
    pub logprob: f64,
    pub z_index: usize,
    /// Corpus doc id of the evidence, `None` for the empty placeholder.
    pub evidence_doc: Option<usize>,
    pub tokens: Vec<usize>,
    pub text: String,
    pub finished: bool,
}

impl Model {
    pub fn new(config: Config, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let tcfg = config.model.transformer(vocab.len());
        tcfg.validate()?;
        Ok(Self { config, vocab, tcfg, params: ParamStore::new(), prior_table: BTreeMap::new() })
    }

    /// Replaces the configuration of a loaded model. Architecture settings
    /// must match the parameters; dropout may change.
    pub fn set_config(&mut self, config: Config) -> Result<()> {
        let mut arch = config.model.clone();
        arch.dropout = self.config.model.dropout;
        if arch != self.config.model {
            let ours = self.config.to_text();
            let diff: Vec<String> = config
                .to_text()
                .lines()
                .filter(|l| {
                    l.starts_with("model.") && !l.starts_with("model.dropout") && !ours.lines().any(|o| o == *l)
                })
                .map(str::to_string)
                .collect();
            return Err(Error::Config(format!("model settings differ from the checkpoint: {}", diff.join(", "))));
        }
        config.validate()?;
        self.tcfg = config.model.transformer(self.vocab.len());
        self.tcfg.validate()?;
        self.config = config;
        Ok(())
    }

    /// Fresh parameters for everything `stage` trains.
    pub fn init_stage(&mut self, stage: u8, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.tcfg.d_model;
        let k = self.config.model.codebook_size;
        match stage {
            1 => {
                transformer::init_params(&self.tcfg, POSTERIOR, rng, &mut self.params)?;
                self.params.insert(CODEBOOK, vqvae::init_codebook(k, d, rng)?);
                transformer::init_params(&self.tcfg, RECON, rng, &mut self.params)?;
            }
            2 => {
                transformer::init_params(&self.tcfg, PRIOR, rng, &mut self.params)?;
                self.params.insert(PRIOR_HEAD, Tensor::uniform(&[d, k], 1.0 / (d as f64).sqrt(), rng));
            }
            3 => {
                // The evidence encoder starts as a copy of the trained posterior
                // encoder so paragraph encodings begin in the codebook's space.
                for name in transformer::param_names(&self.tcfg, POSTERIOR) {
                    let t = self
                        .params
                        .get(&name)
                        .ok_or_else(|| Error::StageOrder(format!("stage 3 needs stage-1 tensor {name}")))?
                        .clone();
                    self.params.insert(format!("{EVIDENCE}{}", &name[POSTERIOR.len()..]), t);
                }
                transformer::init_params(&self.tcfg, GENERATOR, rng, &mut self.params)?;
            }
            _ => return Err(Error::StageOrder(format!("no stage {stage}"))),
        }
        Ok(())
    }

    /// Expected tensor shapes for stages `1..=stage`.
    pub fn expected_shapes(&self, stage: u8) -> Vec<(String, Vec<usize>)> {
        let (d, f, v, t) = (self.tcfg.d_model, self.tcfg.d_ff, self.tcfg.vocab_size, self.tcfg.max_len);
        let stack = |prefix: &str| -> Vec<(String, Vec<usize>)> {
            transformer::param_names(&self.tcfg, prefix)
                .into_iter()
                .map(|n| {
                    let suffix = n.rsplit('.').next().unwrap_or("");
                    let shape = if n.ends_with(".tok_emb") {
                        vec![v, d]
                    } else if n.ends_with(".pos_emb") {
                        vec![t, d]
                    } else if n.ends_with(".ff1.w") {
                        vec![d, f]
                    } else if n.ends_with(".ff1.b") {
                        vec![f]
                    } else if n.ends_with(".ff2.w") {
                        vec![f, d]
                    } else if suffix.starts_with('w') {
                        vec![d, d]
                    } else {
                        vec![d]
                    };
                    (n, shape)
                })
                .collect()
        };
        let mut out = Vec::new();
        if stage >= 1 {
            out.extend(stack(POSTERIOR));
            out.push((CODEBOOK.to_string(), vec![self.config.model.codebook_size, d]));
            out.extend(stack(RECON));
        }
        if stage >= 2 {
            out.extend(stack(PRIOR));
            out.push((PRIOR_HEAD.to_string(), vec![d, self.config.model.codebook_size]));
        }
        if stage >= 3 {
            out.extend(stack(EVIDENCE));
            out.extend(stack(GENERATOR));
        }
        out
    }

    pub fn check_shapes(&self, stage: u8) -> Result<()> {
        for (name, shape) in self.expected_shapes(stage) {
            match self.params.get(&name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => return Err(Error::Checkpoint(format!("tensor {name} is not finite"))),
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, stage: u8, step: u64, adam: Option<&AdamState>) -> Checkpoint {
        let mut tensors: BTreeMap<String, Tensor> = self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut meta = BTreeMap::new();
        meta.insert(VOCAB_META.to_string(), self.vocab.to_text());
        if let Some(a) = adam {
            meta.insert("adam.step".into(), a.step.to_string());
            for (name, m) in &a.m {
                tensors.insert(format!("adam.m/{name}"), Tensor::vector(m.clone()));
            }
            for (name, v) in &a.v {
                tensors.insert(format!("adam.v/{name}"), Tensor::vector(v.clone()));
            }
        }
        Checkpoint {
            stage,
            config: self.config.to_text(),
            seed: self.config.train.seed,
            step,
            meta,
            tensors,
            prior_table: self.prior_table.clone(),
        }
    }

    /// Rebuilds the model, validating every tensor against the configured
    /// shapes, and returns the optimizer state stored alongside it.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, AdamState)> {
        let config = Config::parse(&ckpt.config)?;
        let vocab_text =
            ckpt.meta.get(VOCAB_META).ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))?;
        let vocab = Vocab::from_text(vocab_text)?;
        let mut model = Self::new(config, vocab)?;
        let mut adam = AdamState::default();
        for (name, t) in &ckpt.tensors {
            if let Some(p) = name.strip_prefix("adam.m/") {
                adam.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                adam.v.insert(p.to_string(), t.data().to_vec());
            } else {
                model.params.insert(name.clone(), t.clone());
            }
        }
        if let Some(s) = ckpt.meta.get("adam.step") {
            adam.step = s.parse().map_err(|_| Error::Checkpoint(format!("bad adam.step {s:?}")))?;
        }
        model.check_shapes(ckpt.stage)?;
        model.prior_table = ckpt.prior_table.clone();
        Ok((model, adam))
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(CODEBOOK).expect("stage-1 parameters present")
    }

    pub fn posterior_h(&self, ex: &Example) -> Result<Vec<f64>> {
        transformer::encoder_forward(
            &self.tcfg,
            POSTERIOR,
            &self.params,
            &posterior_sequence(&ex.event, ex.dimension, &ex.inference),
        )
    }

    pub fn assign(&self, ex: &Example) -> Result<PosteriorAssignment> {
        posterior_assign(self.codebook(), &self.posterior_h(ex)?)
    }

    pub fn assign_all(&self, examples: &[Example]) -> Result<Vec<usize>> {
        examples.iter().map(|e| Ok(self.assign(e)?.index)).collect()
    }

    pub fn prior(&self, event: &[usize], dim: usize) -> Result<Vec<f64>> {
        vqvae::prior_forward(&self.tcfg, &self.params, &prior_sequence(event, dim))
    }

    pub fn encode_event(&self, event_raw: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(&tokenize(event_raw));
        ids.truncate(MAX_EVENT_TOKENS);
        ids
    }

    pub fn context_vectors(&self, items: &[Vec<usize>]) -> Result<Tensor> {
        encode_evidence(&self.tcfg, &self.params, items)
    }

    pub fn generator_input(&self, evidence: Vec<usize>, event: Vec<usize>, dim: usize) -> Result<GeneratorInput> {
        GeneratorInput::new(evidence, event, dim, self.tcfg.max_len)
    }

    /// Reserved ids other than EOS never appear in generated text.
    pub fn banned_tokens(&self) -> Vec<usize> {
        (0..self.vocab.first_word_id()).filter(|&t| t != EOS).collect()
    }

    /// Evidence position used for latent `z` under the configured ablation.
    pub fn pick_evidence(&self, set: &EvidenceSet, h_c: Option<&Tensor>, z: &[f64]) -> Result<usize> {
        match self.config.train.ablation {
            Ablation::Full => select_evidence(h_c.expect("context vectors for full mode"), z),
            Ablation::NoEvidence => Ok(set.empty_position()),
            Ablation::Top1Evidence => Ok(0),
        }
    }

    /// Samples codes from the prior, picks evidence per code, runs one beam
    /// per distinct evidence item and returns the pooled top candidates,
    /// deduplicated by surface text.
    pub fn generate(
        &self,
        retriever: &mut Retriever,
        event_raw: &str,
        dim_tag: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Candidate>> {
        let gen = &self.config.generate;
        let dim = self.vocab.dimension_id(dim_tag)?;
        let event = self.encode_event(event_raw);
        let dist = self.prior(&event, dim)?;
        let mut codes = Vec::new();
        for _ in 0..gen.samples {
            let c = vqvae::sample_prior(&dist, rng)?;
            if !codes.contains(&c) {
                codes.push(c);
            }
        }
        let set = match self.config.train.ablation {
            Ablation::NoEvidence => EvidenceSet::only_empty(),
            _ => retriever.search(event_raw, self.config.retrieval.k)?,
        };
        let items = set_tokens(&self.vocab, &set);
        let h_c = match self.config.train.ablation {
            Ablation::Full => Some(self.context_vectors(&items)?),
            _ => None,
        };
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for &code in &codes {
            let c = self.pick_evidence(&set, h_c.as_ref(), self.codebook().row(code))?;
            if !pairs.iter().any(|&(_, pc)| pc == c) {
                pairs.push((code, c));
            }
        }
        let banned = self.banned_tokens();
        let mut pool = Vec::new();
        for (code, c) in pairs {
            let evidence = if set.items()[c].is_empty_placeholder() { vec![EMPTY] } else { items[c].clone() };
            let input = self.generator_input(evidence, event.clone(), dim)?;
            let mut scorer =
                GeneratorScorer { cfg: &self.tcfg, store: &self.params, input: &input, banned: banned.clone() };
            for h in beam_search(&mut scorer, gen.beams, gen.max_steps, EOS, gen.length_norm)? {
                let text = self.vocab.detokenize(h.body());
                pool.push(Candidate {
                    rank: 0,
                    score: h.score,
                    logprob: h.logprob,
                    z_index: code,
                    evidence_doc: set.items()[c].doc,
                    tokens: h.tokens.clone(),
                    text,
                    finished: h.finished,
                });
            }
        }
        pool.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.text.cmp(&b.text))
        });
        let mut seen = HashSet::new();
        pool.retain(|c| seen.insert(c.text.clone()));
        pool.truncate(gen.beams);
        for (i, c) in pool.iter_mut().enumerate() {
            c.rank = i + 1;
        }
        Ok(pool)
    }

    /// Pooled evidence encodings on an inference tape, for diagnostics.
    pub fn evidence_vector(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let v = crate::evidence::encode_item(&mut tape, &self.tcfg, &self.params, tokens, None)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn stack(&self, prefix: &'static str) -> Stack<'_> {
        Stack::new(&self.tcfg, prefix)
    }
}
