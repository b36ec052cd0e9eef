use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eviq_core::eval::EvalReport;

const TINY: &str = "\
model.d_model = 8
model.n_layers = 1
model.n_heads = 2
model.d_ff = 16
model.codebook_size = 4
train.lr = 0.003
train.batch_size = 8
train.vqvae_steps = 10
train.prior_steps = 10
train.decoder_steps = 10
train.eval_every = 5
retrieval.k = 2
generate.beams = 2
generate.samples = 2
generate.max_steps = 6
";

fn eviq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eviq"))
        .args(args)
        .env("RUST_LOG", "info")
        .env_remove("EVIQ_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The resolved configuration echoed as `event=config key=value` log lines.
fn logged_config(o: &Output) -> BTreeMap<String, String> {
    stderr(o)
        .lines()
        .filter_map(|l| l.split_once("event=config ").map(|(_, kv)| kv))
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn num(cfg: &BTreeMap<String, String>, key: &str) -> f64 {
    cfg[key].parse().unwrap()
}

fn corpus(dir: &Path) -> String {
    let p = dir.join("corpus.txt");
    fs::write(&p, "the old river stone\nriver lamp by the garden\nviolin market\n").unwrap();
    p.display().to_string()
}

#[test]
fn defaults_without_file_or_flags() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("index.bin");
    let o = eviq(&["build-index", "--corpus", &corpus(dir.path()), "--out", index.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = logged_config(&o);
    assert_eq!(num(&cfg, "train.beta"), 0.25);
    assert_eq!(num(&cfg, "train.lr"), 5e-5);
    assert_eq!(num(&cfg, "train.batch_size"), 64.0);
    assert_eq!(num(&cfg, "retrieval.k"), 45.0);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "train.lr = 0.01\ntrain.beta = 0.5\ntrain.seed = 3\n").unwrap();
    let index = dir.path().join("index.bin");
    let corpus = corpus(dir.path());
    let base =
        ["build-index", "--corpus", &corpus, "--out", index.to_str().unwrap(), "--config", conf.to_str().unwrap()];

    let o = eviq(&base);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = logged_config(&o);
    assert_eq!(num(&cfg, "train.lr"), 0.01);
    assert_eq!(num(&cfg, "train.beta"), 0.5);

    let mut args = base.to_vec();
    args.extend(["--set", "train.lr=0.02", "--seed", "9"]);
    let cfg = logged_config(&eviq(&args));
    assert_eq!(num(&cfg, "train.lr"), 0.02);
    assert_eq!(num(&cfg, "train.beta"), 0.5);
    assert_eq!(num(&cfg, "train.seed"), 9.0);
}

#[test]
fn unknown_keys_and_bad_values_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "train.lr = 0.01\ntrain.foo = 1\n").unwrap();
    let index = dir.path().join("index.bin");
    let corpus = corpus(dir.path());
    let out = index.to_str().unwrap();

    let o = eviq(&["build-index", "--corpus", &corpus, "--out", out, "--config", conf.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("train.foo") && msg.contains("bad.conf") && msg.contains('2'), "{msg}");

    let o = eviq(&["build-index", "--corpus", &corpus, "--out", out, "--set", "train.foo=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.foo"));

    let o = eviq(&["build-index", "--corpus", &corpus, "--out", out, "--set", "train.lr=fast"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"));

    assert_eq!(eviq(&["build-index", "--bogus"]).status.code(), Some(2));
    assert!(!index.exists());
}

#[test]
fn retrieve_prints_tab_separated_hits() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("index.bin");
    let index = index.to_str().unwrap();
    assert!(eviq(&["build-index", "--corpus", &corpus(dir.path()), "--out", index]).status.success());
    let o = eviq(&["retrieve", "--index", index, "--event", "PersonX finds the river", "--k", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout.clone()).unwrap();
    let rows: Vec<Vec<&str>> = stdout.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    // both mention the river once; the shorter paragraph wins
    assert_eq!(rows[0][1..], ["0", "the old river stone"]);
    assert_eq!(rows[1][1..], ["1", "river lamp by the garden"]);
    let scores: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(scores[0] > scores[1] && scores[1] > 0.0);
    assert!(stderr(&o).contains("event=retrieved hits=2"));
}

fn stage_events(o: &Output) -> (Vec<String>, Vec<String>) {
    let log = stderr(o);
    let grab = |event: &str| {
        log.lines()
            .filter_map(|l| l.split_once(&format!("event={event} stage=")).map(|(_, s)| s.trim().to_string()))
            .collect::<Vec<_>>()
    };
    (grab("stage_start"), grab("stage_skipped"))
}

#[test]
fn run_all_skips_completed_stages_and_reruns_after_deletion() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let conf = dir.path().join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let o =
        eviq(&["make-toy-data", "--out", data.to_str().unwrap(), "--events", "30", "--clusters", "2", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let args = [
        "run-all",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        conf.to_str().unwrap(),
    ];
    let all = ["build-index", "train-vqvae", "fit-prior", "train-decoder", "evaluate"].map(String::from);

    let o = eviq(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stage_events(&o), (all.to_vec(), vec![]));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    let parsed = EvalReport::parse(&report).unwrap();
    assert!(parsed.groups > 0);
    assert!(parsed.checkpoints.contains_key("stage3"));
    let codebook = fs::read_to_string(out.join("codebook.jsonl")).unwrap();
    for line in codebook.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["code_index"].is_u64() && v["count"].is_u64());
    }

    let o = eviq(&args);
    assert!(o.status.success());
    assert_eq!(stage_events(&o), (vec![], all.to_vec()));
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), report);

    fs::remove_file(out.join("stage2.ckpt")).unwrap();
    let o = eviq(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stage_events(&o), (all[2..].to_vec(), all[..2].to_vec()));
    // Same seed and inputs, so the regenerated report is identical.
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), report);

    fs::write(data.join("train.jsonl"), "{not json\n").unwrap();
    let o = eviq(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage train-vqvae failed"), "{}", stderr(&o));
}

#[test]
fn toy_data_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = eviq(&["make-toy-data", "--out", d.to_str().unwrap(), "--events", "20", "--seed", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["train.jsonl", "corpus.txt", "planted.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}
