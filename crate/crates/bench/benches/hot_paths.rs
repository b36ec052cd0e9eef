use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use eviq_bench::{stack_params, synthetic_corpus};
use eviq_core::eval::bleu2;
use eviq_core::generator::{beam_search, GeneratorInput, GeneratorScorer, LengthNorm, GENERATOR};
use eviq_core::numerics::Tape;
use eviq_core::retrieval::{search_topk, InvertedIndex};
use eviq_core::text::{CLS, EOS};
use eviq_core::transformer::Stack;

fn retrieval(c: &mut Criterion) {
    let corpus = synthetic_corpus(2000, 1);
    c.bench_function("index_build_2000", |b| b.iter(|| InvertedIndex::from_paragraphs(black_box(&corpus)).unwrap()));
    let index = InvertedIndex::from_paragraphs(&corpus).unwrap();
    c.bench_function("bm25_top45", |b| b.iter(|| search_topk(&index, black_box("w1 w17 w250 w499"), 45)));
}

fn transformer(c: &mut Criterion) {
    let (cfg, store) = stack_params("enc", 600, 32, 1);
    let mut tokens: Vec<usize> = (20..60).collect();
    tokens.push(CLS);
    c.bench_function("encode_forward_backward_d32_t41", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let h = Stack::new(&cfg, "enc").encode(&mut tape, &store, &tokens, None).unwrap();
            let loss = tape.sum(h);
            tape.backward(loss).unwrap()
        })
    });
}

fn decoding(c: &mut Criterion) {
    let (cfg, store) = stack_params(GENERATOR, 200, 32, 1);
    let input = GeneratorInput::new((30..50).collect(), (60..66).collect(), 7, cfg.max_len).unwrap();
    c.bench_function("beam10_8_steps", |b| {
        b.iter(|| {
            let mut scorer = GeneratorScorer { cfg: &cfg, store: &store, input: &input, banned: vec![] };
            beam_search(&mut scorer, 10, 8, EOS, LengthNorm::Mean).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let words = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let cand = words("to have fun at the party with friends");
    let refs = vec![words("to have fun at the party"), words("to sing at the party with friends")];
    c.bench_function("bleu2_two_refs", |b| b.iter(|| bleu2(black_box(&cand), black_box(&refs))));
}

criterion_group!(benches, retrieval, transformer, decoding, metrics);
criterion_main!(benches);
