use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use eviq_core::eval::{codebook_report, evaluate as eval_dataset};
use eviq_core::model::{build_vocab, Model};
use eviq_core::retrieval::{InvertedIndex, Retriever};
use eviq_core::text::{generate_toy, read_records, write_toy_dataset, Dataset, ToyConfig, Vocab};
use eviq_core::trainer::{
    file_hash, fit_prior as fit_prior_stage, step_rng, train_decoder as train_decoder_stage,
    train_vqvae as train_vqvae_stage, Checkpoint, Config, StageReport, StageRun,
};
use eviq_core::Error;

use crate::{ConfigArgs, TrainArgs};

/// Stream id of the generation RNG, distinct from the three training stages.
pub const GENERATE_STREAM: u8 = 4;

pub const STAGE_FILES: [&str; 3] = ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt"];

/// Applies the config file, then `--set` overrides, then `--seed` on top of
/// `base`, and logs the result.
pub fn resolve_config(args: &ConfigArgs, mut base: Config) -> Result<Config> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        base.apply_text(&text, &path.display().to_string())?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        base.set(k.trim(), v).map_err(|e| {
            Error::Config(format!("--set {kv}: {}", e.to_string().trim_start_matches("config error: ")))
        })?;
    }
    if let Some(seed) = args.seed {
        base.train.seed = seed;
    }
    base.validate()?;
    for line in base.to_text().lines() {
        log::info!("event=config {}", line.replace(" = ", "="));
    }
    Ok(base)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// A checkpoint path, or the latest stage checkpoint inside a run directory.
pub fn checkpoint_path(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    STAGE_FILES
        .iter()
        .rev()
        .map(|f| path.join(f))
        .find(|p| p.exists())
        .with_context(|| format!("no stage checkpoint in {}", path.display()))
}

pub fn load_model(args: &ConfigArgs, ckpt: &Path) -> Result<Model> {
    let path = checkpoint_path(ckpt)?;
    let ck = Checkpoint::load(&path)?;
    let (mut model, _) = Model::from_checkpoint(&ck)?;
    let cfg = resolve_config(args, model.config.clone())?;
    model.set_config(cfg)?;
    log::info!("event=loaded path={} stage={} step={}", path.display(), ck.stage, ck.step);
    Ok(model)
}

pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Dataset> {
    let records = read_records(path)?;
    Ok(Dataset::from_records(&records, vocab)?)
}

pub fn load_retriever(index: &Path) -> Result<Retriever> {
    Ok(Retriever::from_env(InvertedIndex::load(index)?))
}

fn log_report(r: &StageReport) {
    log::info!(
        "stage={} event=report start_step={} end_step={} stopped_early={} interrupted={} last_loss={}",
        r.stage,
        r.start_step,
        r.end_step,
        r.stopped_early,
        r.interrupted,
        r.losses.last().copied().unwrap_or(f64::NAN)
    );
    for (k, v) in &r.metrics {
        log::info!("stage={} event=metric {k}={v}", r.stage);
    }
}

pub fn build_index(args: &ConfigArgs, corpus: &Path, out: &Path) -> Result<()> {
    resolve_config(args, Config::default())?;
    let index = InvertedIndex::build(corpus)?;
    ensure_parent(out)?;
    index.save(out)?;
    log::info!(
        "event=index_built docs={} terms={} hash={}",
        index.num_docs(),
        index.terms().count(),
        index.content_hash()
    );
    Ok(())
}

/// Prints `score<TAB>doc_id<TAB>text` per retrieved paragraph. The empty
/// placeholder carries neither score nor id and is not printed.
pub fn retrieve(args: &ConfigArgs, index: &Path, event: &str, k: Option<usize>) -> Result<()> {
    let cfg = resolve_config(args, Config::default())?;
    let mut retriever = load_retriever(index)?;
    let set = retriever.search(event, k.unwrap_or(cfg.retrieval.k))?;
    for (doc, score) in set.ranked() {
        let text = retriever.index().doc(doc).map_or("", |d| d.text.as_str());
        println!("{score}\t{doc}\t{text}");
    }
    log::info!("event=retrieved hits={}", set.retrieved().len());
    Ok(())
}

pub fn make_toy_data(
    args: &ConfigArgs,
    out: &Path,
    events: usize,
    clusters: usize,
    aspects: usize,
    dimensions: usize,
    distractors: usize,
) -> Result<()> {
    let cfg = resolve_config(args, Config::default())?;
    let mut tc = ToyConfig::new(cfg.train.seed, events, clusters);
    tc.aspects = aspects;
    tc.dimensions = dimensions;
    tc.distractors = distractors;
    let toy = generate_toy(&tc)?;
    write_toy_dataset(&toy, out)?;
    log::info!(
        "event=toy_written dir={} train={} dev={} test={} paragraphs={}",
        out.display(),
        toy.train.len(),
        toy.dev.len(),
        toy.test.len(),
        toy.corpus.len()
    );
    Ok(())
}

fn dev_set(train: &TrainArgs, vocab: &Vocab) -> Result<Option<Dataset>> {
    train.dev.as_deref().map(|p| load_dataset(p, vocab)).transpose()
}

fn finish(report: StageReport, out: &Path) -> Result<()> {
    log_report(&report);
    if report.interrupted {
        bail!("stage {} interrupted at step {}", report.stage, report.end_step);
    }
    log::info!("stage={} event=saved path={} hash={}", report.stage, out.display(), file_hash(out)?);
    Ok(())
}

pub fn train_vqvae(args: &ConfigArgs, train: &TrainArgs, index: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(args, Config::default())?;
    let records = read_records(&train.data)?;
    let vocab = if train.resume && train.out.exists() {
        Model::from_checkpoint(&Checkpoint::load(&train.out)?)?.0.vocab
    } else {
        let index = index.map(InvertedIndex::load).transpose()?;
        build_vocab(&records, index.as_ref(), cfg.train.min_count)
    };
    let data = Dataset::from_records(&records, &vocab)?;
    let dev = dev_set(train, &vocab)?;
    let mut model = Model::new(cfg, vocab)?;
    ensure_parent(&train.out)?;
    let report = train_vqvae_stage(
        &mut model,
        &StageRun { train: &data, dev: dev.as_ref(), out: &train.out, resume: train.resume, stop_at: None },
    )?;
    log::info!("stage=1 event=code_counts counts={:?}", report.code_counts);
    finish(report, &train.out)
}

pub fn fit_prior(args: &ConfigArgs, train: &TrainArgs, ckpt: &Path) -> Result<()> {
    let mut model = load_model(args, ckpt)?;
    let data = load_dataset(&train.data, &model.vocab)?;
    let dev = dev_set(train, &model.vocab)?;
    ensure_parent(&train.out)?;
    let report = fit_prior_stage(
        &mut model,
        &StageRun { train: &data, dev: dev.as_ref(), out: &train.out, resume: train.resume, stop_at: None },
    )?;
    finish(report, &train.out)
}

pub fn train_decoder(args: &ConfigArgs, train: &TrainArgs, ckpt: &Path, index: &Path) -> Result<()> {
    let mut model = load_model(args, ckpt)?;
    let data = load_dataset(&train.data, &model.vocab)?;
    let dev = dev_set(train, &model.vocab)?;
    let mut retriever = load_retriever(index)?;
    ensure_parent(&train.out)?;
    let report = train_decoder_stage(
        &mut model,
        &StageRun { train: &data, dev: dev.as_ref(), out: &train.out, resume: train.resume, stop_at: None },
        &mut retriever,
    )?;
    finish(report, &train.out)
}

/// Prints `rank<TAB>score<TAB>z_index<TAB>evidence_id<TAB>text`; the empty
/// placeholder's evidence id is `-`.
pub fn generate(args: &ConfigArgs, ckpt: &Path, index: &Path, event: &str, dimension: &str) -> Result<()> {
    let model = load_model(args, ckpt)?;
    let mut retriever = load_retriever(index)?;
    let mut rng = step_rng(model.config.train.seed, GENERATE_STREAM, 0);
    for c in model.generate(&mut retriever, event, dimension, &mut rng)? {
        let doc = c.evidence_doc.map_or("-".to_string(), |d| d.to_string());
        println!("{}\t{}\t{}\t{doc}\t{}", c.rank, c.score, c.z_index, c.text);
    }
    Ok(())
}

pub fn evaluate(args: &ConfigArgs, data: &Path, ckpt: &Path, index: &Path, out: &Path) -> Result<()> {
    let path = checkpoint_path(ckpt)?;
    let model = load_model(args, &path)?;
    let dataset = load_dataset(data, &model.vocab)?;
    let mut retriever = load_retriever(index)?;
    let mut rng = step_rng(model.config.train.seed, GENERATE_STREAM, 0);
    let mut report = eval_dataset(&model, &mut retriever, &dataset, &mut rng)?;
    report.checkpoints.insert("decoder".into(), file_hash(&path)?);
    report.checkpoints.insert("index".into(), retriever.index_hash().to_string());
    ensure_parent(out)?;
    fs::write(out, report.to_text()).with_context(|| format!("writing {}", out.display()))?;
    log::info!(
        "event=evaluated groups={} bleu2={} dist1={} dist2={} out={}",
        report.groups,
        report.bleu2_overall,
        report.dist1,
        report.dist2,
        out.display()
    );
    Ok(())
}

pub fn inspect_codebook(args: &ConfigArgs, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_model(args, ckpt)?;
    let dataset = load_dataset(data, &model.vocab)?;
    let report = codebook_report(&model, &dataset)?;
    ensure_parent(out)?;
    fs::write(out, report.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
    let used = report.assigned.iter().filter(|&&n| n > 0).count();
    log::info!("event=codebook_written codes_used={used} out={}", out.display());
    Ok(())
}
