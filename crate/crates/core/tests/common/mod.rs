#![allow(dead_code)]

use eviq_core::model::{build_vocab, Model};
use eviq_core::retrieval::InvertedIndex;
use eviq_core::text::{generate_toy, Dataset, ToyConfig, ToyDataset};
use eviq_core::trainer::Config;

/// A model small enough for finite differences and short training runs.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.model.d_model = 8;
    c.model.n_layers = 1;
    c.model.n_heads = 2;
    c.model.d_ff = 16;
    c.model.codebook_size = 4;
    c.model.dropout = 0.0;
    c.train.lr = 3e-3;
    c.train.batch_size = 8;
    c.train.vqvae_steps = 20;
    c.train.prior_steps = 20;
    c.train.decoder_steps = 20;
    c.train.eval_every = 10;
    c.train.patience = 0;
    c.retrieval.k = 2;
    c
}

pub struct Toy {
    pub toy: ToyDataset,
    pub index: InvertedIndex,
    pub train: Dataset,
    pub dev: Dataset,
}

pub fn toy(seed: u64, events: usize) -> Toy {
    let mut tc = ToyConfig::new(seed, events, 2);
    tc.aspects = 1;
    tc.dimensions = 1;
    tc.distractors = 1;
    let toy = generate_toy(&tc).unwrap();
    let index = InvertedIndex::from_paragraphs(&toy.corpus).unwrap();
    let vocab = build_vocab(&toy.train, Some(&index), 1);
    let train = Dataset::from_records(&toy.train, &vocab).unwrap();
    let dev = Dataset::from_records(&toy.dev, &vocab).unwrap();
    Toy { toy, index, train, dev }
}

pub fn model_for(t: &Toy, cfg: Config) -> Model {
    let vocab = build_vocab(&t.toy.train, Some(&t.index), 1);
    Model::new(cfg, vocab).unwrap()
}
