//! End-to-end runner. Each stage records its inputs and output hashes in
//! `manifest.json`; a stage is skipped when nothing upstream ran in this
//! invocation, its inputs are unchanged and its outputs still hash to the
//! recorded values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use eviq_core::eval::{codebook_report, evaluate};
use eviq_core::model::{build_vocab, Model};
use eviq_core::retrieval::{InvertedIndex, Retriever};
use eviq_core::text::{read_records, Dataset};
use eviq_core::trainer::{file_hash, fit_prior, step_rng, train_decoder, train_vqvae, Checkpoint, Config, StageRun};

use crate::commands::{load_dataset, resolve_config, GENERATE_STREAM, STAGE_FILES};
use crate::ConfigArgs;

pub const MANIFEST: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.bin";
pub const REPORT_FILE: &str = "report.txt";
pub const CODEBOOK_FILE: &str = "codebook.jsonl";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    fn load(path: &Path) -> Manifest {
        fs::read_to_string(path).ok().and_then(|t| serde_json::from_str(&t).ok()).unwrap_or_default()
    }

    fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
    }
}

struct Runner {
    out: PathBuf,
    manifest: Manifest,
    upstream_ran: bool,
}

impl Runner {
    fn up_to_date(&self, stage: &str, inputs: &BTreeMap<String, String>) -> bool {
        if self.upstream_ran {
            return false;
        }
        let Some(entry) = self.manifest.stages.get(stage) else {
            return false;
        };
        &entry.inputs == inputs
            && entry.outputs.iter().all(|(f, h)| file_hash(&self.out.join(f)).is_ok_and(|cur| &cur == h))
    }

    /// Runs `body` unless the stage is up to date, then records its outputs.
    fn stage(
        &mut self,
        name: &str,
        inputs: BTreeMap<String, String>,
        outputs: &[&str],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        if self.up_to_date(name, &inputs) {
            log::info!("event=stage_skipped stage={name}");
            return Ok(());
        }
        log::info!("event=stage_start stage={name}");
        self.manifest.stages.remove(name);
        body().with_context(|| format!("stage {name} failed"))?;
        let mut entry = StageEntry { inputs, outputs: BTreeMap::new() };
        for f in outputs {
            entry.outputs.insert(f.to_string(), file_hash(&self.out.join(f))?);
        }
        self.manifest.stages.insert(name.to_string(), entry);
        self.manifest.save(&self.out.join(MANIFEST))?;
        self.upstream_ran = true;
        log::info!("event=stage_done stage={name}");
        Ok(())
    }

    fn hash_of(&self, file: &str) -> Result<String> {
        Ok(file_hash(&self.out.join(file))?)
    }
}

fn inputs(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn fresh(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).with_context(|| format!("removing stale {}", path.display()))?;
    }
    Ok(())
}

fn load_stage(path: &Path, cfg: &Config) -> Result<Model> {
    let (mut model, _) = Model::from_checkpoint(&Checkpoint::load(path)?)?;
    model.set_config(cfg.clone())?;
    Ok(model)
}

pub fn run_all(args: &ConfigArgs, data: &Path, out: &Path, eval_split: &str) -> Result<()> {
    if !matches!(eval_split, "dev" | "test") {
        return Err(eviq_core::Error::Config(format!("--eval-split must be dev or test, got {eval_split:?}")).into());
    }
    let cfg = resolve_config(args, Config::default())?;
    let train_path = data.join("train.jsonl");
    let dev_path = data.join("dev.jsonl");
    let eval_path = data.join(format!("{eval_split}.jsonl"));
    let corpus_path = data.join("corpus.txt");
    for p in [&train_path, &dev_path, &eval_path, &corpus_path] {
        if !p.exists() {
            bail!("missing input {}", p.display());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut r = Runner { out: out.to_path_buf(), manifest: Manifest::load(&out.join(MANIFEST)), upstream_ran: false };
    let config_text = cfg.to_text();
    let train_hash = file_hash(&train_path)?;
    let dev_hash = file_hash(&dev_path)?;

    let index_out = out.join(INDEX_FILE);
    r.stage("build-index", inputs(&[("corpus", file_hash(&corpus_path)?)]), &[INDEX_FILE], || {
        let index = InvertedIndex::build(&corpus_path)?;
        index.save(&index_out)?;
        log::info!("event=index_built docs={} hash={}", index.num_docs(), index.content_hash());
        Ok(())
    })?;

    let [s1, s2, s3] = STAGE_FILES.map(|f| out.join(f));
    let base = [("config", config_text.clone()), ("train", train_hash.clone()), ("dev", dev_hash.clone())];
    let with = |extra: &[(&str, String)]| {
        let mut m = inputs(&base);
        m.extend(inputs(extra));
        m
    };
    let in1 = with(&[("index", r.hash_of(INDEX_FILE)?)]);
    r.stage("train-vqvae", in1, &[STAGE_FILES[0]], || {
        fresh(&s1)?;
        let records = read_records(&train_path)?;
        let index = InvertedIndex::load(&index_out)?;
        let vocab = build_vocab(&records, Some(&index), cfg.train.min_count);
        let train = Dataset::from_records(&records, &vocab)?;
        let dev = load_dataset(&dev_path, &vocab)?;
        let mut model = Model::new(cfg.clone(), vocab)?;
        let rep = train_vqvae(&mut model, &run(&train, &dev, &s1))?;
        log::info!("stage=1 event=code_counts counts={:?}", rep.code_counts);
        Ok(())
    })?;

    let in2 = with(&[("stage1", r.hash_of(STAGE_FILES[0])?)]);
    r.stage("fit-prior", in2, &[STAGE_FILES[1]], || {
        fresh(&s2)?;
        let mut model = load_stage(&s1, &cfg)?;
        let (train, dev) = (load_dataset(&train_path, &model.vocab)?, load_dataset(&dev_path, &model.vocab)?);
        fit_prior(&mut model, &run(&train, &dev, &s2))?;
        Ok(())
    })?;

    let in3 = with(&[("stage2", r.hash_of(STAGE_FILES[1])?), ("index", r.hash_of(INDEX_FILE)?)]);
    r.stage("train-decoder", in3, &[STAGE_FILES[2]], || {
        fresh(&s3)?;
        let mut model = load_stage(&s2, &cfg)?;
        let (train, dev) = (load_dataset(&train_path, &model.vocab)?, load_dataset(&dev_path, &model.vocab)?);
        let mut retriever = Retriever::from_env(InvertedIndex::load(&index_out)?);
        train_decoder(&mut model, &run(&train, &dev, &s3), &mut retriever)?;
        Ok(())
    })?;

    let in4 = with(&[
        ("stage3", r.hash_of(STAGE_FILES[2])?),
        ("index", r.hash_of(INDEX_FILE)?),
        ("eval_data", file_hash(&eval_path)?),
    ]);
    r.stage("evaluate", in4, &[REPORT_FILE, CODEBOOK_FILE], || {
        let model = load_stage(&s3, &cfg)?;
        let eval_data = load_dataset(&eval_path, &model.vocab)?;
        let mut retriever = Retriever::from_env(InvertedIndex::load(&index_out)?);
        let mut rng = step_rng(cfg.train.seed, GENERATE_STREAM, 0);
        let mut report = evaluate(&model, &mut retriever, &eval_data, &mut rng)?;
        for (i, f) in STAGE_FILES.iter().enumerate() {
            report.checkpoints.insert(format!("stage{}", i + 1), file_hash(&out.join(f))?);
        }
        report.checkpoints.insert("index".into(), retriever.index_hash().to_string());
        fs::write(out.join(REPORT_FILE), report.to_text())?;
        let train = load_dataset(&train_path, &model.vocab)?;
        fs::write(out.join(CODEBOOK_FILE), codebook_report(&model, &train)?.to_jsonl())?;
        log::info!(
            "event=evaluated split={eval_split} groups={} bleu2={} dist1={} dist2={}",
            report.groups,
            report.bleu2_overall,
            report.dist1,
            report.dist2
        );
        Ok(())
    })?;
    log::info!("event=run_all_done out={}", out.display());
    Ok(())
}

fn run<'a>(train: &'a Dataset, dev: &'a Dataset, out: &'a Path) -> StageRun<'a> {
    StageRun { train, dev: Some(dev), out, resume: false, stop_at: None }
}
