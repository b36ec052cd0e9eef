//! Automatic metrics and the per-code token report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::retrieval::Retriever;
use crate::text::{content_tokens, tokenize, Dataset};

pub const TOP_CANDIDATES: usize = 10;
pub const REPORT_VERSION: u32 = 1;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Clipped matches and total n-grams of `cand` against the per-n-gram
/// maximum count over all references.
fn clipped(cand: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let counts = ngram_counts(cand, n);
    let matched = counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Sentence BLEU-2 with uniform weights. The bigram precision gets add-one
/// smoothing only when it has no match; the brevity penalty uses the
/// reference length closest to the candidate's, the shorter one on ties.
pub fn bleu2(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let (m1, n1) = clipped(cand, refs, 1);
    if m1 == 0 {
        return 0.0;
    }
    let p1 = m1 as f64 / n1 as f64;
    let (m2, n2) = clipped(cand, refs, 2);
    let p2 = if m2 == 0 { 1.0 / (n2 + 1) as f64 } else { m2 as f64 / n2 as f64 };
    let c = cand.len();
    let r = refs.iter().map(Vec::len).min_by_key(|&l| (l.abs_diff(c), l)).expect("refs is nonempty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (0.5 * p1.ln() + 0.5 * p2.ln()).exp()
}

/// Mean sentence BLEU-2 over the candidates.
pub fn bleu2_topk(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if cands.is_empty() || refs.is_empty() {
        return Err(Error::Config("BLEU needs at least one candidate and one reference".into()));
    }
    Ok(cands.iter().map(|c| bleu2(c, refs)).sum::<f64>() / cands.len() as f64)
}

/// Number of distinct n-grams across all generations.
pub fn dist_n(generations: &[Vec<String>], n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    generations.iter().flat_map(|g| g.windows(n)).collect::<HashSet<_>>().len()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodeRow {
    pub code_index: usize,
    /// `None` marks a code with no assigned examples.
    pub token: Option<String>,
    pub count: usize,
}

/// Inference content-token frequencies per code, sorted by count (descending)
/// then token.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CodebookReport {
    pub assigned: Vec<usize>,
    pub tables: Vec<Vec<(String, usize)>>,
}

impl CodebookReport {
    pub fn from_assignments(dataset: &Dataset, codes: &[usize], k: usize) -> Self {
        let mut assigned = vec![0; k];
        let mut freq: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); k];
        for (ex, &code) in dataset.examples.iter().zip(codes) {
            assigned[code] += 1;
            for t in content_tokens(&tokenize(&ex.inference_raw)) {
                *freq[code].entry(t).or_insert(0) += 1;
            }
        }
        let tables = freq
            .into_iter()
            .map(|m| {
                let mut rows: Vec<_> = m.into_iter().collect();
                rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                rows
            })
            .collect();
        Self { assigned, tables }
    }

    pub fn rows(&self) -> Vec<CodeRow> {
        let mut out = Vec::new();
        for (code_index, table) in self.tables.iter().enumerate() {
            if table.is_empty() {
                out.push(CodeRow { code_index, token: None, count: 0 });
            }
            for (t, c) in table {
                out.push(CodeRow { code_index, token: Some(t.clone()), count: *c });
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.rows().iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
    }
}

pub fn codebook_report(model: &Model, dataset: &Dataset) -> Result<CodebookReport> {
    let codes = model.assign_all(&dataset.examples)?;
    Ok(CodebookReport::from_assignments(dataset, &codes, model.config.model.codebook_size))
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub groups: usize,
    pub bleu2_by_dimension: BTreeMap<String, f64>,
    pub bleu2_overall: f64,
    pub dist1: usize,
    pub dist2: usize,
    pub checkpoints: BTreeMap<String, String>,
    /// Resolved configuration as `key = value` text.
    pub config: String,
}

impl EvalReport {
    /// Builds the report from per-group BLEU scores keyed by dimension tag.
    pub fn from_scores(scores: &[(String, f64)], generations: &[Vec<String>]) -> Self {
        let mut by_dim: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (dim, s) in scores {
            let e = by_dim.entry(dim.clone()).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
        let bleu2_by_dimension: BTreeMap<String, f64> =
            by_dim.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect();
        let bleu2_overall = if bleu2_by_dimension.is_empty() {
            0.0
        } else {
            bleu2_by_dimension.values().sum::<f64>() / bleu2_by_dimension.len() as f64
        };
        Self {
            groups: scores.len(),
            bleu2_by_dimension,
            bleu2_overall,
            dist1: dist_n(generations, 1),
            dist2: dist_n(generations, 2),
            ..Default::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "report_version = {REPORT_VERSION}").unwrap();
        writeln!(s, "groups = {}", self.groups).unwrap();
        writeln!(s, "bleu2.overall = {}", self.bleu2_overall).unwrap();
        for (d, v) in &self.bleu2_by_dimension {
            writeln!(s, "bleu2.{d} = {v}").unwrap();
        }
        writeln!(s, "dist1 = {}", self.dist1).unwrap();
        writeln!(s, "dist2 = {}", self.dist2).unwrap();
        for (name, hash) in &self.checkpoints {
            writeln!(s, "checkpoint.{name} = {hash}").unwrap();
        }
        for line in self.config.lines().filter(|l| !l.trim().is_empty()) {
            writeln!(s, "config.{}", line.trim()).unwrap();
        }
        s
    }

    /// Parses text written by [`EvalReport::to_text`] and checks that the
    /// overall score is the mean of the per-dimension scores.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse { path: "<report>".into(), line, msg };
        let mut r = EvalReport::default();
        let mut seen_version = false;
        let mut config = String::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let (k, v) =
                line.split_once(" = ").ok_or_else(|| bad(n, format!("expected `key = value`, got {line:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(n, format!("{k}: not a number: {v:?}")));
            let count = |v: &str| v.parse::<usize>().map_err(|_| bad(n, format!("{k}: not a count: {v:?}")));
            match k {
                "report_version" => {
                    if v != REPORT_VERSION.to_string() {
                        return Err(bad(n, format!("unsupported report version {v}")));
                    }
                    seen_version = true;
                }
                "groups" => r.groups = count(v)?,
                "bleu2.overall" => r.bleu2_overall = num(v)?,
                "dist1" => r.dist1 = count(v)?,
                "dist2" => r.dist2 = count(v)?,
                _ => {
                    if let Some(d) = k.strip_prefix("bleu2.") {
                        r.bleu2_by_dimension.insert(d.to_string(), num(v)?);
                    } else if let Some(c) = k.strip_prefix("checkpoint.") {
                        r.checkpoints.insert(c.to_string(), v.to_string());
                    } else if let Some(c) = k.strip_prefix("config.") {
                        writeln!(config, "{c} = {v}").unwrap();
                    } else {
                        return Err(bad(n, format!("unknown key {k:?}")));
                    }
                }
            }
        }
        if !seen_version {
            return Err(bad(0, "missing report_version".into()));
        }
        r.config = config;
        if !r.bleu2_by_dimension.is_empty() {
            let mean = r.bleu2_by_dimension.values().sum::<f64>() / r.bleu2_by_dimension.len() as f64;
            if (mean - r.bleu2_overall).abs() > 1e-12 {
                return Err(bad(0, format!("overall {} is not the dimension mean {mean}", r.bleu2_overall)));
            }
        }
        Ok(r)
    }
}

/// Generates the top candidates for every (event, dimension) group and scores
/// them against the group's gold inferences.
pub fn evaluate(
    model: &Model,
    retriever: &mut Retriever,
    dataset: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(dataset.groups.len());
    let mut generations = Vec::new();
    for g in &dataset.groups {
        let refs: Vec<Vec<String>> = g.members.iter().map(|&i| tokenize(&dataset.examples[i].inference_raw)).collect();
        let cands: Vec<Vec<String>> = model
            .generate(retriever, &g.event_raw, &g.dimension, rng)?
            .into_iter()
            .take(TOP_CANDIDATES)
            .map(|c| tokenize(&c.text))
            .collect();
        let s = if cands.is_empty() { 0.0 } else { bleu2_topk(&cands, &refs)? };
        scores.push((g.dimension.clone(), s));
        generations.extend(cands);
    }
    let mut report = EvalReport::from_scores(&scores, &generations);
    report.config = model.config.to_text();
    Ok(report)
}
