//! BM25 evidence retrieval over a paragraph corpus.

pub mod cache;
pub mod index;
pub mod search;

pub use cache::{Retriever, CACHE_DIR_ENV};
pub use index::{Doc, InvertedIndex, Posting, INDEX_FORMAT_VERSION};
pub use search::{
    bm25_score, event_query, idf, rank, search_topk, EvidenceItem, EvidenceSet, BM25_B, BM25_K1, DEFAULT_K,
};
