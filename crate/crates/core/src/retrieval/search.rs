use std::cmp::Ordering;

use super::index::InvertedIndex;
use crate::text::{content_tokens, tokenize, MAX_EVIDENCE_TOKENS};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_K: usize = 45;

pub fn idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// Event text minus stop words and punctuation. Repeated terms are kept and
/// each occurrence contributes to the score.
pub fn event_query(event: &str) -> Vec<String> {
    content_tokens(&tokenize(event))
}

fn term_weight(index: &InvertedIndex, tf: u32, doc: usize) -> f64 {
    let tf = tf as f64;
    let norm = 1.0 - BM25_B + BM25_B * index.doc_len(doc) as f64 / index.avg_doc_len();
    tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
}

pub fn bm25_score(index: &InvertedIndex, query: &[String], doc: usize) -> f64 {
    let mut score = 0.0;
    for term in query {
        let list = index.postings(term);
        if let Ok(pos) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
            score += idf(index.num_docs(), list.len()) * term_weight(index, list[pos].tf, doc);
        }
    }
    score
}

/// One retrieved paragraph, or the empty placeholder when `doc` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceItem {
    pub doc: Option<usize>,
    pub score: Option<f64>,
    /// Paragraph tokens truncated to the evidence limit; empty for the
    /// placeholder.
    pub tokens: Vec<String>,
}

impl EvidenceItem {
    pub fn empty() -> Self {
        Self { doc: None, score: None, tokens: Vec::new() }
    }

    pub fn is_empty_placeholder(&self) -> bool {
        self.doc.is_none()
    }
}

/// Retrieved paragraphs in rank order, always followed by the empty
/// placeholder.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceSet {
    items: Vec<EvidenceItem>,
}

impl EvidenceSet {
    pub fn from_ranked(index: &InvertedIndex, ranked: &[(usize, f64)]) -> Self {
        let mut items: Vec<EvidenceItem> = ranked
            .iter()
            .map(|&(doc, score)| {
                let toks = &index.doc(doc).expect("ranked doc exists").tokens;
                EvidenceItem {
                    doc: Some(doc),
                    score: Some(score),
                    tokens: toks[..toks.len().min(MAX_EVIDENCE_TOKENS)].to_vec(),
                }
            })
            .collect();
        items.push(EvidenceItem::empty());
        Self { items }
    }

    pub fn only_empty() -> Self {
        Self { items: vec![EvidenceItem::empty()] }
    }

    pub fn items(&self) -> &[EvidenceItem] {
        &self.items
    }

    /// Retrieved paragraphs without the placeholder.
    pub fn retrieved(&self) -> &[EvidenceItem] {
        &self.items[..self.items.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn empty_position(&self) -> usize {
        self.items.len() - 1
    }

    pub fn ranked(&self) -> Vec<(usize, f64)> {
        self.retrieved().iter().map(|it| (it.doc.unwrap(), it.score.unwrap())).collect()
    }
}

/// Documents with positive score, best first, ties by ascending doc id.
pub fn rank(index: &InvertedIndex, query: &[String], k: usize) -> Vec<(usize, f64)> {
    if k == 0 || query.is_empty() {
        return Vec::new();
    }
    // Accumulate term by term in query order so the sums match bm25_score.
    let mut scores = vec![0.0; index.num_docs()];
    let mut touched = Vec::new();
    for term in query {
        let list = index.postings(term);
        if list.is_empty() {
            continue;
        }
        let w = idf(index.num_docs(), list.len());
        for p in list {
            let d = p.doc as usize;
            if scores[d] == 0.0 {
                touched.push(d);
            }
            scores[d] += w * term_weight(index, p.tf, d);
        }
    }
    touched.sort_unstable();
    touched.dedup();
    let mut hits: Vec<(usize, f64)> = touched.into_iter().map(|d| (d, scores[d])).filter(|&(_, s)| s > 0.0).collect();
    hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    hits.truncate(k);
    hits
}

pub fn search_topk(index: &InvertedIndex, event: &str, k: usize) -> EvidenceSet {
    let query = event_query(event);
    EvidenceSet::from_ranked(index, &rank(index, &query, k))
}
