//! The three training stages and their shared optimization loop.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::Ablation;
use crate::error::{Error, Result};
use crate::evidence::{compute_reward, draw_counter, encode_item, selection_term, set_tokens};
use crate::generator::{generator_nll, sequence_logprob};
use crate::model::{has_prefix, stage_prefixes, Model};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::retrieval::{EvidenceSet, Retriever};
use crate::text::{Dataset, Example, EOS};
use crate::vqvae::{
    empirical_prior, kl_divergence, posterior_sequence, prior_logits, prior_loss, prior_sequence, quantize,
    target_sequence, vqvae_loss, CODEBOOK, POSTERIOR, RECON,
};

/// Inputs shared by every stage.
pub struct StageRun<'a> {
    pub train: &'a Dataset,
    pub dev: Option<&'a Dataset>,
    /// Checkpoint written at every evaluation and at the end.
    pub out: &'a Path,
    /// Continue from `out` if it holds a checkpoint of this stage.
    pub resume: bool,
    /// Save and return before running this step, as if interrupted.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub stage: u8,
    pub start_step: u64,
    pub end_step: u64,
    /// Mean training loss of every step run in this invocation.
    pub losses: Vec<f64>,
    pub dev_history: Vec<(u64, f64)>,
    pub stopped_early: bool,
    pub interrupted: bool,
    pub metrics: BTreeMap<String, f64>,
    pub code_counts: Vec<usize>,
}

/// Stream of the step-level RNG; every draw of a step comes from here.
pub fn step_rng(seed: u64, stage: u8, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((stage as u64) << 56) | step);
    r
}

/// Items of the batch at `step`: consecutive slices of a per-epoch
/// permutation, so the schedule depends only on (seed, stage, step).
pub fn batch_indices(n: usize, batch: usize, step: u64, seed: u64, stage: u8) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch) as u64;
    let epoch = step / per_epoch;
    let b = (step % per_epoch) as usize;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((stage as u64) << 56) | (1 << 48) | epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    perm[b * batch..((b + 1) * batch).min(n)].to_vec()
}

struct LoopState {
    step: u64,
    adam: AdamState,
    best_dev: f64,
    bad_evals: u64,
    done: bool,
}

fn save(model: &Model, stage: u8, st: &LoopState, out: &Path) -> Result<()> {
    let mut ck = model.to_checkpoint(stage, st.step, Some(&st.adam));
    ck.meta.insert("best_dev".into(), st.best_dev.to_bits().to_string());
    ck.meta.insert("bad_evals".into(), st.bad_evals.to_string());
    ck.meta.insert("done".into(), (st.done as u8).to_string());
    ck.save(out)
}

fn meta_u64(ck: &Checkpoint, key: &str) -> Result<u64> {
    ck.meta.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {key}")))
}

fn resume_state(model: &mut Model, stage: u8, run: &StageRun<'_>) -> Result<Option<LoopState>> {
    if !run.resume || !run.out.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(run.out)?;
    if ck.stage != stage {
        return Err(Error::StageOrder(format!(
            "{} holds a stage-{} checkpoint, cannot resume stage {stage}",
            run.out.display(),
            ck.stage
        )));
    }
    let (m, adam) = Model::from_checkpoint(&ck)?;
    if m.config != model.config {
        log::warn!("event=resume_config_mismatch using=checkpoint");
    }
    *model = m;
    log::info!("event=resume stage={stage} step={}", ck.step);
    Ok(Some(LoopState {
        step: ck.step,
        adam,
        best_dev: f64::from_bits(meta_u64(&ck, "best_dev")?),
        bad_evals: meta_u64(&ck, "bad_evals")?,
        done: meta_u64(&ck, "done")? == 1,
    }))
}

type StepFn<'s> = dyn FnMut(&Model, &[usize], &mut ChaCha8Rng) -> Result<(f64, BTreeMap<String, Tensor>)> + 's;
type DevFn<'s> = dyn FnMut(&Model) -> Result<f64> + 's;
/// Dev-set codes and empirical prior rows.
type DevTargets = (Vec<Vec<usize>>, Vec<Vec<f64>>);

#[allow(clippy::too_many_arguments)]
fn run_loop(
    model: &mut Model,
    stage: u8,
    max_steps: u64,
    n_items: usize,
    run: &StageRun<'_>,
    state: Option<LoopState>,
    step_fn: &mut StepFn<'_>,
    dev_fn: &mut Option<Box<DevFn<'_>>>,
    report: &mut StageReport,
) -> Result<()> {
    if n_items == 0 {
        return Err(Error::DegenerateBatch(format!("stage {stage} has no training items")));
    }
    let tc = model.config.train.clone();
    let adam_cfg = AdamConfig { lr: tc.lr, ..AdamConfig::default() };
    let mut st = state.unwrap_or(LoopState {
        step: 0,
        adam: AdamState::default(),
        best_dev: f64::INFINITY,
        bad_evals: 0,
        done: false,
    });
    report.stage = stage;
    report.start_step = st.step;
    let mut last_finite: Option<(u64, f64)> = None;
    while !st.done && st.step < max_steps {
        if run.stop_at == Some(st.step) {
            save(model, stage, &st, run.out)?;
            report.end_step = st.step;
            report.interrupted = true;
            return Ok(());
        }
        let idx = batch_indices(n_items, tc.batch_size, st.step, tc.seed, stage);
        let mut rng = step_rng(tc.seed, stage, st.step);
        let diverged = |msg: String| Error::Diverged {
            step: st.step,
            msg: match last_finite {
                Some((s, l)) => format!("{msg}; last finite loss {l} at step {s}"),
                None => format!("{msg}; no finite step yet"),
            },
        };
        let (loss, grads) = match step_fn(model, &idx, &mut rng) {
            Err(Error::Numeric(what)) => return Err(diverged(format!("non-finite value in {what}"))),
            r => r?,
        };
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        if cfg!(debug_assertions) {
            let frozen: Vec<&str> = (1..stage).flat_map(|s| stage_prefixes(s).iter().copied()).collect();
            assert!(grads.keys().all(|k| !has_prefix(k, &frozen)), "gradient reached a frozen tensor in stage {stage}");
        }
        adam_step(&mut model.params, &grads, &mut st.adam, &adam_cfg).map_err(|e| diverged(e.to_string()))?;
        last_finite = Some((st.step, loss));
        log::debug!("stage={stage} step={} loss={loss}", st.step);
        report.losses.push(loss);
        st.step += 1;
        if st.step.is_multiple_of(tc.eval_every) || st.step == max_steps {
            if let Some(f) = dev_fn.as_mut() {
                let d = f(model)?;
                report.dev_history.push((st.step, d));
                log::info!("stage={stage} step={} train_loss={loss} dev_loss={d}", st.step);
                if d < st.best_dev {
                    st.best_dev = d;
                    st.bad_evals = 0;
                } else {
                    st.bad_evals += 1;
                    if tc.patience > 0 && st.bad_evals >= tc.patience {
                        st.done = true;
                        report.stopped_early = true;
                        log::info!("stage={stage} event=early_stop step={}", st.step);
                    }
                }
            } else {
                log::info!("stage={stage} step={} train_loss={loss}", st.step);
            }
            if !st.done && st.step < max_steps {
                save(model, stage, &st, run.out)?;
            }
        }
    }
    st.done = true;
    report.end_step = st.step;
    save(model, stage, &st, run.out)
}

fn add_into(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        None => Ok(v),
        Some(a) => tape.add(a, v),
    }
}

fn finish_mean(tape: &mut Tape, total: Option<Var>, n: usize) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let total = total.ok_or_else(|| Error::DegenerateBatch("empty batch".into()))?;
    let mean = tape.scale(total, 1.0 / n as f64);
    let loss = tape.value(mean).item();
    let grads = tape.backward(mean)?;
    Ok((loss, grads.into_params()))
}

fn recon_prefix(ex: &Example) -> Vec<usize> {
    let mut p = ex.event.clone();
    p.push(ex.dimension);
    p
}

/// Reconstruction NLL of `ex` decoded from its quantized code (evaluation
/// mode).
pub fn recon_nll(model: &Model, ex: &Example) -> Result<f64> {
    let a = model.assign(ex)?;
    let mut tape = Tape::inference();
    let z = tape.constant(Tensor::vector(a.z));
    let (input, targets, mask) = target_sequence(&recon_prefix(ex), &ex.inference);
    let logits = model.stack(RECON).latent_decode(&mut tape, &model.params, &input, z, None)?;
    let nll = tape.cross_entropy(logits, &targets, &mask)?;
    Ok(tape.value(nll).item())
}

fn mean_of(xs: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in xs {
        s += x?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

pub fn train_vqvae(model: &mut Model, run: &StageRun<'_>) -> Result<StageReport> {
    if run.train.is_empty() {
        return Err(Error::DegenerateBatch("training set is empty".into()));
    }
    let mut report = StageReport::default();
    let state = resume_state(model, 1, run)?;
    if state.is_none() {
        model.params = Default::default();
        model.prior_table.clear();
        let mut rng = step_rng(model.config.train.seed, 1, u64::MAX >> 8);
        model.init_stage(1, &mut rng)?;
        if let Some(dev) = run.dev {
            report
                .metrics
                .insert("dev_recon_nll_initial".into(), mean_of(dev.examples.iter().map(|e| recon_nll(model, e)))?);
        }
    }
    let train = run.train;
    let beta = model.config.train.beta;
    let mut step_fn = |m: &Model, idx: &[usize], rng: &mut ChaCha8Rng| {
        let mut tape = Tape::new();
        let mut total = None;
        for &i in idx {
            let ex = &train.examples[i];
            let h = m.stack(POSTERIOR).encode(
                &mut tape,
                &m.params,
                &posterior_sequence(&ex.event, ex.dimension, &ex.inference),
                Some(&mut *rng),
            )?;
            let cb = tape.param(&m.params, CODEBOOK)?;
            let (_, zq, st) = quantize(&mut tape, h, cb)?;
            let (input, targets, mask) = target_sequence(&recon_prefix(ex), &ex.inference);
            let logits = m.stack(RECON).latent_decode(&mut tape, &m.params, &input, st, Some(&mut *rng))?;
            let nll = tape.cross_entropy(logits, &targets, &mask)?;
            let l = vqvae_loss(&mut tape, h, zq, nll, beta)?;
            total = Some(add_into(&mut tape, total, l.total)?);
        }
        finish_mean(&mut tape, total, idx.len())
    };
    let mut dev_fn: Option<Box<DevFn<'_>>> = run
        .dev
        .map(|dev| Box::new(move |m: &Model| mean_of(dev.examples.iter().map(|e| recon_nll(m, e)))) as Box<DevFn<'_>>);
    let steps = model.config.train.vqvae_steps;
    run_loop(model, 1, steps, train.len(), run, state, &mut step_fn, &mut dev_fn, &mut report)?;
    if !report.interrupted {
        let assignments = model.assign_all(&train.examples)?;
        let mut counts = vec![0usize; model.config.model.codebook_size];
        for a in assignments {
            counts[a] += 1;
        }
        let used = counts.iter().filter(|&&c| c > 0).count();
        report.metrics.insert("utilization".into(), used as f64 / counts.len() as f64);
        report.metrics.insert("codes_used".into(), used as f64);
        if let Some(&(_, d)) = report.dev_history.last() {
            report.metrics.insert("dev_recon_nll".into(), d);
        }
        log::info!("stage=1 event=done step={} codes_used={used} counts={:?}", report.end_step, counts);
        report.code_counts = counts;
    }
    Ok(report)
}

fn require_stage(model: &Model, stage: u8, needed_by: u8) -> Result<()> {
    model
        .check_shapes(stage)
        .map_err(|e| Error::StageOrder(format!("stage {needed_by} requires stage-{stage} parameters ({e})")))
}

pub fn fit_prior(model: &mut Model, run: &StageRun<'_>) -> Result<StageReport> {
    require_stage(model, 1, 2)?;
    let mut report = StageReport::default();
    let state = resume_state(model, 2, run)?;
    let k = model.config.model.codebook_size;
    let train = run.train;
    if state.is_none() {
        let assignments = model.assign_all(&train.examples)?;
        let table = empirical_prior(&train.groups, &assignments, k)?;
        model.prior_table = train.groups.iter().map(|g| g.key.clone()).zip(table).collect();
        for (name, _) in model.expected_shapes(3) {
            if has_prefix(&name, stage_prefixes(2)) || has_prefix(&name, stage_prefixes(3)) {
                model.params.remove(&name);
            }
        }
        let mut rng = step_rng(model.config.train.seed, 2, u64::MAX >> 8);
        model.init_stage(2, &mut rng)?;
    }
    let targets: Vec<Vec<f64>> = train
        .groups
        .iter()
        .map(|g| {
            model
                .prior_table
                .get(&g.key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("no empirical prior for {:?}", g.key)))
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<Vec<usize>> = train
        .groups
        .iter()
        .map(|g| {
            let ex = &train.examples[g.members[0]];
            prior_sequence(&ex.event, ex.dimension)
        })
        .collect();
    let dev_targets: Option<DevTargets> = match run.dev {
        Some(dev) => {
            let a = model.assign_all(&dev.examples)?;
            let t = empirical_prior(&dev.groups, &a, k)?;
            let inp = dev
                .groups
                .iter()
                .map(|g| {
                    let ex = &dev.examples[g.members[0]];
                    prior_sequence(&ex.event, ex.dimension)
                })
                .collect();
            Some((inp, t))
        }
        None => None,
    };
    let mut step_fn = |m: &Model, idx: &[usize], rng: &mut ChaCha8Rng| {
        let mut tape = Tape::new();
        let mut total = None;
        for &g in idx {
            let logits = prior_logits(&mut tape, &m.tcfg, &m.params, &inputs[g], Some(&mut *rng))?;
            let l = prior_loss(&mut tape, &targets[g], logits)?;
            total = Some(add_into(&mut tape, total, l)?);
        }
        finish_mean(&mut tape, total, idx.len())
    };
    let mut dev_fn: Option<Box<DevFn<'_>>> = dev_targets.as_ref().map(|(inp, t)| {
        Box::new(move |m: &Model| {
            mean_of(inp.iter().zip(t).map(|(i, p)| {
                let q = crate::vqvae::prior_forward(&m.tcfg, &m.params, i)?;
                Ok(kl_divergence(p, &q))
            }))
        }) as Box<DevFn<'_>>
    });
    let steps = model.config.train.prior_steps;
    run_loop(model, 2, steps, inputs.len(), run, state, &mut step_fn, &mut dev_fn, &mut report)?;
    if !report.interrupted {
        let kl = mean_of(inputs.iter().zip(&targets).map(|(i, p)| {
            let q = crate::vqvae::prior_forward(&model.tcfg, &model.params, i)?;
            Ok(kl_divergence(p, &q))
        }))?;
        report.metrics.insert("train_kl".into(), kl);
        log::info!("stage=2 event=done step={} train_kl={kl}", report.end_step);
    }
    Ok(report)
}

/// Evidence items (generator token ids) and the set for every event.
pub struct EvidenceCache {
    pub sets: HashMap<String, (EvidenceSet, Vec<Vec<usize>>)>,
}

impl EvidenceCache {
    pub fn build(model: &Model, retriever: &mut Retriever, datasets: &[&Dataset]) -> Result<Self> {
        let mut sets = HashMap::new();
        for ds in datasets {
            for g in &ds.groups {
                if !sets.contains_key(&g.event_raw) {
                    let set = retriever.search(&g.event_raw, model.config.retrieval.k)?;
                    let items = set_tokens(&model.vocab, &set);
                    sets.insert(g.event_raw.clone(), (set, items));
                }
            }
        }
        Ok(Self { sets })
    }

    pub fn get(&self, event: &str) -> &(EvidenceSet, Vec<Vec<usize>>) {
        &self.sets[event]
    }
}

/// Selected evidence for `ex` using its posterior code: returns the item
/// position and the corpus doc id (`None` for the placeholder).
pub fn selected_evidence(model: &Model, cache: &EvidenceCache, ex: &Example) -> Result<(usize, Option<usize>)> {
    let (set, items) = cache.get(&ex.event_raw);
    let z = model.assign(ex)?.z;
    let h_c = match model.config.train.ablation {
        Ablation::Full => Some(model.context_vectors(items)?),
        _ => None,
    };
    let c = model.pick_evidence(set, h_c.as_ref(), &z)?;
    Ok((c, set.items()[c].doc))
}

/// Mean generator NLL over `ds` with evidence chosen by posterior codes.
pub fn decoder_dev_loss(model: &Model, cache: &EvidenceCache, ds: &Dataset) -> Result<f64> {
    let mut ctx: HashMap<&str, Tensor> = HashMap::new();
    mean_of(ds.examples.iter().map(|ex| {
        let (set, items) = cache.get(&ex.event_raw);
        let z = model.assign(ex)?.z;
        let h_c = match model.config.train.ablation {
            Ablation::Full => {
                if !ctx.contains_key(ex.event_raw.as_str()) {
                    ctx.insert(&ex.event_raw, model.context_vectors(items)?);
                }
                ctx.get(ex.event_raw.as_str())
            }
            _ => None,
        };
        let c = model.pick_evidence(set, h_c, &z)?;
        let input = model.generator_input(items[c].clone(), ex.event.clone(), ex.dimension)?;
        let mut tape = Tape::inference();
        let nll = generator_nll(&mut tape, &model.tcfg, &model.params, &input, &ex.inference, None)?;
        Ok(tape.value(nll).item())
    }))
}

pub fn train_decoder(model: &mut Model, run: &StageRun<'_>, retriever: &mut Retriever) -> Result<StageReport> {
    require_stage(model, 1, 3)?;
    require_stage(model, 2, 3)?;
    let mut report = StageReport::default();
    let state = resume_state(model, 3, run)?;
    if state.is_none() {
        for (name, _) in model.expected_shapes(3) {
            if has_prefix(&name, stage_prefixes(3)) {
                model.params.remove(&name);
            }
        }
        let mut rng = step_rng(model.config.train.seed, 3, u64::MAX >> 8);
        model.init_stage(3, &mut rng)?;
    }
    let train = run.train;
    let mut datasets = vec![train];
    datasets.extend(run.dev);
    let cache = EvidenceCache::build(model, retriever, &datasets)?;
    let codes = model.assign_all(&train.examples)?;
    let ablation = model.config.train.ablation;
    let frozen: Vec<&str> = [1u8, 2].iter().flat_map(|&s| stage_prefixes(s).iter().copied()).collect();
    let mut rewards = (0usize, 0usize);

    let mut step_fn = |m: &Model, idx: &[usize], rng: &mut ChaCha8Rng| {
        let mut tape = Tape::new();
        for p in &frozen {
            tape.freeze_prefix(*p);
        }
        let mut total = None;
        for &i in idx {
            let ex = &train.examples[i];
            let (set, items) = cache.get(&ex.event_raw);
            let code = codes[i];
            // Selection runs on training-mode encodings of every item, and
            // the chosen item's vector is the one the selection term moves.
            let encoded = if ablation == Ablation::Full {
                let hs = items
                    .iter()
                    .map(|it| encode_item(&mut tape, &m.tcfg, &m.params, it, Some(&mut *rng)))
                    .collect::<Result<Vec<Var>>>()?;
                let rows = hs.iter().flat_map(|&h| tape.value(h).data().to_vec()).collect();
                Some((hs, Tensor::matrix(items.len(), m.tcfg.d_model, rows)?))
            } else {
                None
            };
            let chosen = m.pick_evidence(set, encoded.as_ref().map(|e| &e.1), m.codebook().row(code))?;
            let input = m.generator_input(items[chosen].clone(), ex.event.clone(), ex.dimension)?;
            let mut loss = generator_nll(&mut tape, &m.tcfg, &m.params, &input, &ex.inference, Some(&mut *rng))?;
            if let Some((hs, _)) = &encoded {
                if let Some(counter) = draw_counter(set.len(), chosen, rng) {
                    let mut target = ex.inference.clone();
                    target.push(EOS);
                    let lp_chosen = sequence_logprob(&m.tcfg, &m.params, &input, &target)?;
                    let counter_input = m.generator_input(items[counter].clone(), ex.event.clone(), ex.dimension)?;
                    let lp_counter = sequence_logprob(&m.tcfg, &m.params, &counter_input, &target)?;
                    let r = compute_reward(lp_chosen, lp_counter);
                    if r > 0.0 {
                        rewards.0 += 1;
                    } else {
                        rewards.1 += 1;
                    }
                    let cb = tape.param(&m.params, CODEBOOK)?;
                    let z = tape.gather_rows(cb, &[code])?;
                    let sel = selection_term(&mut tape, hs[chosen], z, r)?;
                    loss = tape.add(loss, sel)?;
                }
            }
            total = Some(add_into(&mut tape, total, loss)?);
        }
        finish_mean(&mut tape, total, idx.len())
    };
    let cache_ref = &cache;
    let mut dev_fn: Option<Box<DevFn<'_>>> =
        run.dev.map(|dev| Box::new(move |m: &Model| decoder_dev_loss(m, cache_ref, dev)) as Box<DevFn<'_>>);
    let steps = model.config.train.decoder_steps;
    run_loop(model, 3, steps, train.len(), run, state, &mut step_fn, &mut dev_fn, &mut report)?;
    let n = rewards.0 + rewards.1;
    if n > 0 {
        report.metrics.insert("positive_reward_rate".into(), rewards.0 as f64 / n as f64);
    }
    if !report.interrupted {
        log::info!("stage=3 event=done step={} ablation={ablation}", report.end_step);
    }
    Ok(report)
}
