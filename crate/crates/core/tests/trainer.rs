mod common;

use std::path::Path;

use eviq_core::model::{build_vocab, Model};
use eviq_core::numerics::Tensor;
use eviq_core::retrieval::Retriever;
use eviq_core::text::{Dataset, Record};
use eviq_core::trainer::{fit_prior, train_decoder, train_vqvae, Checkpoint, Config, StageReport, StageRun};
use eviq_core::transformer::param_names;
use eviq_core::vqvae::{CODEBOOK, DEFAULT_BETA, POSTERIOR};
use eviq_core::Error;

use common::{model_for, tiny_config, toy, Toy};

fn run<'a>(t: &'a Toy, out: &'a Path, resume: bool, stop_at: Option<u64>) -> StageRun<'a> {
    StageRun { train: &t.train, dev: Some(&t.dev), out, resume, stop_at }
}

/// Runs all three stages into `dir` and returns the reports.
fn pipeline(t: &Toy, cfg: Config, dir: &Path) -> (Model, [StageReport; 3]) {
    let mut m = model_for(t, cfg);
    let r1 = train_vqvae(&mut m, &run(t, &dir.join("s1"), false, None)).unwrap();
    let r2 = fit_prior(&mut m, &run(t, &dir.join("s2"), false, None)).unwrap();
    let mut retriever = Retriever::new(t.index.clone(), None);
    let r3 = train_decoder(&mut m, &run(t, &dir.join("s3"), false, None), &mut retriever).unwrap();
    (m, [r1, r2, r3])
}

#[test]
fn reruns_are_bit_identical() {
    let t = toy(3, 30);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, ra) = pipeline(&t, tiny_config(), a.path());
    let (mb, rb) = pipeline(&t, tiny_config(), b.path());
    for (x, y) in ra.iter().zip(&rb) {
        let bits = |r: &StageReport| r.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
        assert_eq!(x.dev_history, y.dev_history);
        assert_eq!(x.metrics, y.metrics);
    }
    assert_eq!(ma.params, mb.params);
    for s in ["s1", "s2", "s3"] {
        assert_eq!(std::fs::read(a.path().join(s)).unwrap(), std::fs::read(b.path().join(s)).unwrap());
    }
}

#[test]
fn resumed_stages_match_uninterrupted_ones() {
    let t = toy(4, 30);
    let full = tempfile::tempdir().unwrap();
    let (m_full, reports) = pipeline(&t, tiny_config(), full.path());

    let dir = tempfile::tempdir().unwrap();
    let mut m = model_for(&t, tiny_config());
    let mut retriever = Retriever::new(t.index.clone(), None);
    let stop = 7;
    for stage in 1..=3u8 {
        let out = dir.path().join(format!("s{stage}"));
        let go = |m: &mut Model, r: &StageRun<'_>, retriever: &mut Retriever| match stage {
            1 => train_vqvae(m, r),
            2 => fit_prior(m, r),
            _ => train_decoder(m, r, retriever),
        };
        let first = go(&mut m, &run(&t, &out, false, Some(stop)), &mut retriever).unwrap();
        assert!(first.interrupted);
        assert_eq!(first.end_step, stop);
        // A fresh process would start from a model holding only the earlier stages.
        let mut resumed_model = m.clone();
        let rest = go(&mut resumed_model, &run(&t, &out, true, None), &mut retriever).unwrap();
        assert_eq!(rest.start_step, stop);
        let want = &reports[stage as usize - 1].losses;
        let got: Vec<f64> = first.losses.iter().chain(&rest.losses).copied().collect();
        assert_eq!(
            got.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            want.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            "stage {stage}"
        );
        m = resumed_model;
    }
    assert_eq!(m.params, m_full.params);
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let t = toy(5, 24);
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = pipeline(&t, tiny_config(), dir.path());
    let path = dir.path().join("s3");
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let (loaded, _) = Model::from_checkpoint(&ck).unwrap();
    assert_eq!(loaded.params, m.params);
    assert_eq!(loaded.prior_table, m.prior_table);
    assert_eq!(loaded.vocab, m.vocab);
    assert_eq!(loaded.config, m.config);
    let again = dir.path().join("again");
    loaded.to_checkpoint(ck.stage, ck.step, None).save(&again).unwrap();
    let model_tensors = |c: &Checkpoint| {
        c.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adam."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(model_tensors(&Checkpoint::load(&again).unwrap()), model_tensors(&ck));

    for at in [bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 3]).is_err());
}

#[test]
fn mismatched_tensor_shape_is_named() {
    let t = toy(5, 24);
    let mut m = model_for(&t, tiny_config());
    let dir = tempfile::tempdir().unwrap();
    train_vqvae(&mut m, &run(&t, &dir.path().join("s1"), false, None)).unwrap();
    let mut ck = Checkpoint::load(&dir.path().join("s1")).unwrap();
    ck.tensors.insert(CODEBOOK.into(), Tensor::zeros(&[3, 8]));
    let err = Model::from_checkpoint(&ck).unwrap_err();
    assert!(err.to_string().contains(CODEBOOK), "{err}");
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let t = toy(5, 24);
    let dir = tempfile::tempdir().unwrap();
    let mut m = model_for(&t, tiny_config());
    let mut retriever = Retriever::new(t.index.clone(), None);
    let e = fit_prior(&mut m, &run(&t, &dir.path().join("s2"), false, None)).unwrap_err();
    assert!(matches!(e, Error::StageOrder(_)), "{e}");
    let e = train_decoder(&mut m, &run(&t, &dir.path().join("s3"), false, None), &mut retriever).unwrap_err();
    assert!(matches!(e, Error::StageOrder(_)), "{e}");
    train_vqvae(&mut m, &run(&t, &dir.path().join("s1"), false, None)).unwrap();
    let e = train_decoder(&mut m, &run(&t, &dir.path().join("s3"), false, None), &mut retriever).unwrap_err();
    assert!(matches!(e, Error::StageOrder(_)), "{e}");
    // Resuming a stage from another stage's checkpoint is refused as well.
    std::fs::copy(dir.path().join("s1"), dir.path().join("s2")).unwrap();
    let e = fit_prior(&mut m, &run(&t, &dir.path().join("s2"), true, None)).unwrap_err();
    assert!(matches!(e, Error::StageOrder(_)), "{e}");
}

#[test]
fn later_stages_leave_stage_one_untouched() {
    let t = toy(6, 24);
    let dir = tempfile::tempdir().unwrap();
    let mut m = model_for(&t, tiny_config());
    let r1 = train_vqvae(&mut m, &run(&t, &dir.path().join("s1"), false, None)).unwrap();
    let frozen: Vec<String> = std::iter::once(CODEBOOK.to_string()).chain(param_names(&m.tcfg, POSTERIOR)).collect();
    let snapshot: Vec<Tensor> = frozen.iter().map(|n| m.params.get(n).unwrap().clone()).collect();
    let same = |m: &Model| {
        frozen
            .iter()
            .zip(&snapshot)
            .all(|(n, s)| m.params.get(n).unwrap().data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
    };
    fit_prior(&mut m, &run(&t, &dir.path().join("s2"), false, None)).unwrap();
    assert!(same(&m));
    for row in m.prior_table.values() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut retriever = Retriever::new(t.index.clone(), None);
    let r3 = train_decoder(&mut m, &run(&t, &dir.path().join("s3"), false, None), &mut retriever).unwrap();
    assert!(same(&m));
    assert!(r3.losses.iter().all(|l| l.is_finite()));
    assert_eq!(r1.code_counts.iter().sum::<usize>(), t.train.len());
}

#[test]
fn stage_one_lowers_dev_reconstruction() {
    let t = toy(7, 40);
    let mut cfg = tiny_config();
    cfg.train.vqvae_steps = 60;
    let mut m = model_for(&t, cfg);
    let dir = tempfile::tempdir().unwrap();
    let r = train_vqvae(&mut m, &run(&t, &dir.path().join("s1"), false, None)).unwrap();
    assert!(r.metrics["dev_recon_nll"] < r.metrics["dev_recon_nll_initial"], "{:?}", r.metrics);
}

#[test]
fn beta_defaults_to_a_quarter() {
    assert_eq!(DEFAULT_BETA, 0.25);
    let c = Config::default();
    assert_eq!(c.train.beta, 0.25);
    assert_eq!(c.train.lr, 5e-5);
    assert_eq!(c.train.batch_size, 64);
}

#[test]
fn prior_fits_three_events() {
    let records: Vec<Record> = [
        ("alex paints the fence", ["to be helpful", "to finish a chore", "to please dad"]),
        ("alex loses the keys", ["to find them", "to call a locksmith", "to retrace steps"]),
        ("alex bakes a cake", ["to celebrate", "to share dessert", "to practice baking"]),
    ]
    .iter()
    .map(|(e, infs)| Record {
        event: e.to_string(),
        dimension: "xIntent".into(),
        inferences: infs.iter().map(|s| s.to_string()).collect(),
    })
    .collect();
    let vocab = build_vocab(&records, None, 1);
    let ds = Dataset::from_records(&records, &vocab).unwrap();
    let mut cfg = tiny_config();
    cfg.train.vqvae_steps = 50;
    cfg.train.prior_steps = 5000;
    cfg.train.lr = 1e-2;
    cfg.train.eval_every = 500;
    let mut m = Model::new(cfg, vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = |out: &'static str| StageRun {
        train: &ds,
        dev: None,
        out: Box::leak(dir.path().join(out).into_boxed_path()),
        resume: false,
        stop_at: None,
    };
    train_vqvae(&mut m, &r("s1")).unwrap();
    let rep = fit_prior(&mut m, &r("s2")).unwrap();
    assert!(rep.metrics["train_kl"] < 1e-3, "{:?}", rep.metrics);
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let t = toy(9, 24);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    // One Adam step moves every weight by about 1e300, which overflows the
    // next forward pass.
    cfg.train.lr = 1e300;
    let mut m = model_for(&t, cfg);
    let e = train_vqvae(&mut m, &run(&t, &dir.path().join("s1"), false, None)).unwrap_err();
    match e {
        Error::Diverged { step, msg } => {
            assert!(step >= 1);
            assert!(msg.contains("last finite loss"), "{msg}");
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn poisoned_parameters_are_rejected_between_stages() {
    let t = toy(9, 24);
    let dir = tempfile::tempdir().unwrap();
    let mut m = model_for(&t, tiny_config());
    train_vqvae(&mut m, &run(&t, &dir.path().join("s1"), false, None)).unwrap();
    m.params.get_mut(CODEBOOK).unwrap().data_mut()[0] = f64::NAN;
    let e = fit_prior(&mut m, &run(&t, &dir.path().join("s2"), false, None)).unwrap_err();
    assert!(e.to_string().contains(CODEBOOK), "{e}");
}
