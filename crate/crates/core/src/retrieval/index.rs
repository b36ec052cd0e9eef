use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{tokenize, STOPWORDS_VERSION};

const MAGIC: &[u8; 8] = b"EVIQIDX\0";
pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Doc {
    pub text: String,
    pub tokens: Vec<String>,
}

/// One posting: document id and term frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Immutable inverted index over corpus lines. Postings include stop words;
/// queries drop them before lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    docs: Vec<Doc>,
    postings: BTreeMap<String, Vec<Posting>>,
    avg_len: f64,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl InvertedIndex {
    /// One document per non-blank line.
    pub fn from_corpus_text(text: &str) -> Result<Self> {
        let paragraphs: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::from_paragraphs(&paragraphs)
    }

    pub fn from_paragraphs<S: AsRef<str>>(paragraphs: &[S]) -> Result<Self> {
        if paragraphs.is_empty() {
            return Err(Error::Index("corpus has no paragraphs".into()));
        }
        if paragraphs.len() > u32::MAX as usize {
            return Err(Error::Index("corpus too large for 32-bit doc ids".into()));
        }
        let docs: Vec<Doc> =
            paragraphs.iter().map(|p| Doc { text: p.as_ref().to_string(), tokens: tokenize(p.as_ref()) }).collect();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (id, doc) in docs.iter().enumerate() {
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &doc.tokens {
                *tf.entry(t.as_str()).or_insert(0) += 1;
            }
            for (term, n) in tf {
                postings.entry(term.to_string()).or_default().push(Posting { doc: id as u32, tf: n });
            }
        }
        let total: usize = docs.iter().map(|d| d.tokens.len()).sum();
        let avg_len = total as f64 / docs.len() as f64;
        Ok(Self { docs, postings, avg_len })
    }

    pub fn build(corpus: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(corpus).map_err(|e| Error::io(format!("reading corpus {}", corpus.display()), e))?;
        Self::from_corpus_text(&text)
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn doc(&self, id: usize) -> Option<&Doc> {
        self.docs.get(id)
    }

    pub fn docs(&self) -> &[Doc] {
        &self.docs
    }

    pub fn doc_len(&self, id: usize) -> usize {
        self.docs[id].tokens.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&STOPWORDS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.docs.len() as u64).to_le_bytes());
        for d in &self.docs {
            put_str(&mut out, &d.text);
            out.extend_from_slice(&(d.tokens.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.avg_len.to_bits().to_le_bytes());
        out.extend_from_slice(&(self.postings.len() as u64).to_le_bytes());
        for (term, list) in &self.postings {
            put_str(&mut out, term);
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Index("not an index file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::Index(format!("index format version {version}, expected {INDEX_FORMAT_VERSION}")));
        }
        let sw = r.u32()?;
        if sw != STOPWORDS_VERSION {
            return Err(Error::Index(format!(
                "index built with stop-word list v{sw}, this build uses v{STOPWORDS_VERSION}"
            )));
        }
        let n_docs = r.u64()? as usize;
        let mut docs = Vec::with_capacity(n_docs.min(1 << 20));
        for id in 0..n_docs {
            let text = r.string()?;
            let len = r.u32()? as usize;
            let tokens = tokenize(&text);
            if tokens.len() != len {
                return Err(Error::Index(format!("doc {id}: stored length {len} != {}", tokens.len())));
            }
            docs.push(Doc { text, tokens });
        }
        if docs.is_empty() {
            return Err(Error::Index("index holds no documents".into()));
        }
        let avg_len = f64::from_bits(r.u64()?);
        let n_terms = r.u64()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = r.string()?;
            let n = r.u32()? as usize;
            let mut list = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let doc = r.u32()?;
                let tf = r.u32()?;
                if doc as usize >= docs.len() {
                    return Err(Error::Index(format!("posting for {term:?} names missing doc {doc}")));
                }
                list.push(Posting { doc, tf });
            }
            postings.insert(term, list);
        }
        if r.pos != bytes.len() {
            return Err(Error::Index("trailing bytes after index".into()));
        }
        Ok(Self { docs, postings, avg_len })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing index {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading index {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Index("index file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Index("invalid UTF-8 in index".into()))
    }
}
