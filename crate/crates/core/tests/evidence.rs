mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eviq_core::evidence::{encode_evidence, encode_item, select_evidence, selection_term, set_tokens, EVIDENCE};
use eviq_core::generator::{generator_nll, GENERATOR};
use eviq_core::model::Model;
use eviq_core::numerics::gradcheck::check_params;
use eviq_core::numerics::{Tape, Tensor};
use eviq_core::retrieval::{search_topk, EvidenceSet};
use eviq_core::text::EMPTY;
use eviq_core::trainer::Ablation;
use eviq_core::transformer::param_names;
use eviq_core::vqvae::CODEBOOK;

use common::{model_for, tiny_config, toy, Toy};

fn stage3_model() -> (Toy, Model) {
    let t = toy(6, 24);
    let mut m = model_for(&t, tiny_config());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in 1..=3 {
        m.init_stage(s, &mut rng).unwrap();
    }
    (t, m)
}

fn brute_argmin(rows: &Tensor, z: &[f64]) -> usize {
    (0..rows.rows())
        .map(|j| (j, rows.row(j).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
        .fold((0, f64::INFINITY), |best, (j, d)| if d < best.1 { (j, d) } else { best })
        .0
}

#[test]
fn one_row_per_item_with_placeholder_encoded() {
    let (t, m) = stage3_model();
    let set = search_topk(&t.index, &t.train.examples[0].event_raw, 2);
    let items = set_tokens(&m.vocab, &set);
    assert_eq!(items.last().unwrap(), &vec![EMPTY]);
    let h = encode_evidence(&m.tcfg, &m.params, &items).unwrap();
    assert_eq!(h.shape(), &[set.len(), m.tcfg.d_model]);
    assert!(h.is_finite());
}

#[test]
fn identical_paragraphs_encode_identically() {
    let (_, m) = stage3_model();
    let p = vec![m.vocab.first_word_id() + 3, m.vocab.first_word_id() + 5];
    let h = encode_evidence(&m.tcfg, &m.params, &[p.clone(), vec![EMPTY], p]).unwrap();
    assert_eq!(h.row(0), h.row(2));
    assert_ne!(h.row(0), h.row(1));
}

#[test]
fn selection_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..1000 {
        let n = rng.gen_range(1..12);
        let d = rng.gen_range(1..7);
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if case % 4 == 0 && n > 1 {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let row: Vec<f64> = data[a * d..(a + 1) * d].to_vec();
            data[b * d..(b + 1) * d].copy_from_slice(&row);
        }
        let h = Tensor::matrix(n, d, data).unwrap();
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(select_evidence(&h, &z).unwrap(), brute_argmin(&h, &z), "case {case}");
        let j = rng.gen_range(0..n);
        let on_row = select_evidence(&h, h.row(j)).unwrap();
        assert_eq!(h.row(on_row), h.row(j));
        assert!(on_row <= j);
    }
    assert!(select_evidence(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(), &[0.0; 2]).is_err());
}

#[test]
fn placeholder_only_set_picks_the_placeholder() {
    let (_, m) = stage3_model();
    let set = EvidenceSet::only_empty();
    let items = set_tokens(&m.vocab, &set);
    let h = m.context_vectors(&items).unwrap();
    let z = m.codebook().row(1).to_vec();
    assert_eq!(m.pick_evidence(&set, Some(&h), &z).unwrap(), 0);
}

#[test]
fn ablations_pick_fixed_positions() {
    let (t, mut m) = stage3_model();
    let set = search_topk(&t.index, &t.train.examples[0].event_raw, 2);
    assert!(set.len() > 1);
    let z = m.codebook().row(0).to_vec();
    m.config.train.ablation = Ablation::NoEvidence;
    assert_eq!(m.pick_evidence(&set, None, &z).unwrap(), set.len() - 1);
    m.config.train.ablation = Ablation::Top1Evidence;
    assert_eq!(m.pick_evidence(&set, None, &z).unwrap(), 0);
}

proptest! {
    #[test]
    fn permuting_other_rows_keeps_the_selection(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (rng.gen_range(2..10), 3);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = Tensor::matrix(n, d, rows.concat()).unwrap();
        let sel = select_evidence(&h, &z).unwrap();
        let mut others: Vec<usize> = (0..n).filter(|&i| i != sel).collect();
        others.shuffle(&mut rng);
        let mut order = others;
        let pos = rng.gen_range(0..n);
        order.insert(pos, sel);
        let permuted: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
        let hp = Tensor::matrix(n, d, permuted).unwrap();
        prop_assert_eq!(select_evidence(&hp, &z).unwrap(), pos);
    }
}

#[test]
fn selection_term_never_reaches_a_frozen_codebook() {
    let (t, m) = stage3_model();
    let item = set_tokens(&m.vocab, &search_topk(&t.index, &t.train.examples[0].event_raw, 2))[0].clone();
    for reward in [1.0, -1.0] {
        let mut tape = Tape::new();
        tape.freeze_prefix(CODEBOOK);
        let h = encode_item(&mut tape, &m.tcfg, &m.params, &item, None).unwrap();
        let cb = tape.param(&m.params, CODEBOOK).unwrap();
        let z = tape.gather_rows(cb, &[2]).unwrap();
        let term = selection_term(&mut tape, h, z, reward).unwrap();
        let g = tape.backward(term).unwrap();
        assert!(!g.params().contains_key(CODEBOOK));
        assert!(g.get_or_zero(&tape, cb).iter().all(|&v| v == 0.0));
        assert!(g.params().keys().any(|k| k.starts_with(EVIDENCE)));

        // Descent along −∂/∂h moves toward z for R = +1 and away for R = −1.
        let dh = g.get_or_zero(&tape, h);
        let diff: Vec<f64> = tape.value(h).data().iter().zip(tape.value(z).data()).map(|(a, b)| a - b).collect();
        let inner: f64 = dh.iter().zip(&diff).map(|(a, b)| a * b).sum();
        assert!(inner * reward > 0.0, "reward {reward} inner {inner}");
    }
}

#[test]
fn evidence_encoder_gradient_matches_finite_differences() {
    let (t, m) = stage3_model();
    let set = search_topk(&t.index, &t.train.examples[1].event_raw, 2);
    let items = set_tokens(&m.vocab, &set);
    let target = Tensor::uniform(&[items.len(), m.tcfg.d_model], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let names = param_names(&m.tcfg, EVIDENCE);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let checks = check_params(&m.params, &refs, 10, |tape, s| {
        let mut total = None;
        for (i, it) in items.iter().enumerate() {
            let h = encode_item(tape, &m.tcfg, s, it, None)?;
            let c = tape.constant(Tensor::matrix(1, m.tcfg.d_model, target.row(i).to_vec())?);
            let d = tape.sub(h, c)?;
            let l = tape.sum_sq(d);
            total = Some(match total {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    for ch in &checks {
        assert!(ch.passes(1e-4), "{ch:?}");
    }
}

#[test]
fn stage3_objective_matches_finite_differences() {
    let (t, m) = stage3_model();
    let ex = &t.train.examples[2];
    let set = search_topk(&t.index, &ex.event_raw, 2);
    let items = set_tokens(&m.vocab, &set);
    let code = m.assign(ex).unwrap().index;
    let h_c = m.context_vectors(&items).unwrap();
    let chosen = select_evidence(&h_c, m.codebook().row(code)).unwrap();
    let input = m.generator_input(items[chosen].clone(), ex.event.clone(), ex.dimension).unwrap();
    let mut names = param_names(&m.tcfg, EVIDENCE);
    names.extend(param_names(&m.tcfg, GENERATOR));
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    for reward in [1.0, -1.0] {
        let checks = check_params(&m.params, &refs, 8, |tape, s| {
            tape.freeze_prefix(CODEBOOK);
            let nll = generator_nll(tape, &m.tcfg, s, &input, &ex.inference, None)?;
            let h = encode_item(tape, &m.tcfg, s, &items[chosen], None)?;
            let cb = tape.param(s, CODEBOOK)?;
            let z = tape.gather_rows(cb, &[code])?;
            let sel = selection_term(tape, h, z, reward)?;
            tape.add(nll, sel)
        })
        .unwrap();
        for ch in &checks {
            assert!(ch.passes(1e-4), "reward {reward}: {ch:?}");
        }
    }
}
