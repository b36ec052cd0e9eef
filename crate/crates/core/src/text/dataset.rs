use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const MAX_EVENT_TOKENS: usize = 64;
pub const MAX_INFERENCE_TOKENS: usize = 32;
pub const MAX_EVIDENCE_TOKENS: usize = 64;

/// One JSON-lines record: an event, a dimension tag and its gold inferences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub event: String,
    pub dimension: String,
    pub inferences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub event: Vec<usize>,
    pub dimension: usize,
    pub inference: Vec<usize>,
    pub event_raw: String,
    pub inference_raw: String,
    /// Index into [`Dataset::groups`].
    pub group: usize,
}

/// All examples sharing one (event, dimension) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventGroup {
    pub key: String,
    pub event_raw: String,
    pub dimension: String,
    pub members: Vec<usize>,
}

impl EventGroup {
    pub fn count(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub groups: Vec<EventGroup>,
}

pub fn group_key(event: &str, dimension: &str) -> String {
    format!("{}\t{}", tokenize(event).join(" "), dimension)
}

/// Parses and validates a JSON-lines dataset file.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_records(&text, path)
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if !super::vocab::DIMENSIONS.contains(&rec.dimension.as_str()) {
            return Err(Error::UnknownDimension { tag: rec.dimension, valid: super::vocab::DIMENSIONS.join(", ") });
        }
        if tokenize(&rec.event).is_empty() {
            return Err(parse_err("event is empty".into()));
        }
        if rec.inferences.iter().any(|s| tokenize(s).is_empty()) {
            return Err(parse_err("empty inference".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Token streams (events and inferences) for vocabulary construction.
pub fn record_tokens(records: &[Record]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for r in records {
        out.push(tokenize(&r.event));
        out.extend(r.inferences.iter().map(|s| tokenize(s)));
    }
    out
}

impl Dataset {
    /// One example per (event, dimension, inference) triple, grouped by
    /// (event, dimension) in order of first appearance.
    pub fn from_records(records: &[Record], vocab: &Vocab) -> Result<Self> {
        let mut ds = Dataset::default();
        let mut index: HashMap<String, usize> = HashMap::new();
        for r in records {
            let dimension = vocab.dimension_id(&r.dimension)?;
            let key = group_key(&r.event, &r.dimension);
            let g = *index.entry(key.clone()).or_insert_with(|| {
                ds.groups.push(EventGroup {
                    key,
                    event_raw: r.event.clone(),
                    dimension: r.dimension.clone(),
                    members: Vec::new(),
                });
                ds.groups.len() - 1
            });
            let mut event = vocab.encode(&tokenize(&r.event));
            event.truncate(MAX_EVENT_TOKENS);
            for inf in &r.inferences {
                let mut inference = vocab.encode(&tokenize(inf));
                inference.truncate(MAX_INFERENCE_TOKENS);
                ds.groups[g].members.push(ds.examples.len());
                ds.examples.push(Example {
                    event: event.clone(),
                    dimension,
                    inference,
                    event_raw: r.event.clone(),
                    inference_raw: inf.clone(),
                    group: g,
                });
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn mean_group_size(&self) -> f64 {
        self.examples.len() as f64 / self.groups.len().max(1) as f64
    }
}

pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Dataset> {
    Dataset::from_records(&read_records(path)?, vocab)
}
