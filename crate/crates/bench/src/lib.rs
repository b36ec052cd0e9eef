//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eviq_core::numerics::ParamStore;
use eviq_core::transformer::{init_params, TransformerConfig};

/// `n` paragraphs of 20 words drawn from a 500-word vocabulary.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..20).map(|_| format!("w{}", rng.gen_range(0..500))).collect::<Vec<_>>().join(" ")).collect()
}

/// A transformer stack of the given width with freshly initialized weights.
pub fn stack_params(prefix: &str, vocab: usize, d: usize, layers: usize) -> (TransformerConfig, ParamStore) {
    let cfg = TransformerConfig {
        vocab_size: vocab,
        n_layers: layers,
        n_heads: 2,
        d_model: d,
        d_ff: 2 * d,
        max_len: 168,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    init_params(&cfg, prefix, &mut ChaCha8Rng::seed_from_u64(0), &mut store).expect("valid config");
    (cfg, store)
}
