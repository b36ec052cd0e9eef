//! Tokenization, vocabulary, dataset loading and synthetic data.

pub mod dataset;
pub mod stopwords;
pub mod tokenize;
pub mod toy;
pub mod vocab;

pub use dataset::{
    group_key, load_dataset, parse_records, read_records, record_tokens, Dataset, EventGroup, Example, Record,
    MAX_EVENT_TOKENS, MAX_EVIDENCE_TOKENS, MAX_INFERENCE_TOKENS,
};
pub use stopwords::{content_tokens, is_stopword, STOPWORDS_VERSION};
pub use tokenize::tokenize;
pub use toy::{generate_toy, make_toy_dataset, write_toy_dataset, PlantedEvent, Split, ToyConfig, ToyDataset};
pub use vocab::{Vocab, BOS, CLS, DIMENSIONS, EMPTY, EOS, PAD, SEP, UNK};
