//! Passage corpus, inverted index and Okapi BM25 retrieval.
//!
//! The index is immutable once built and can be shared across threads for
//! concurrent retrieval. Ranking ties are broken by ascending document id so
//! that results never depend on the order in which documents were ingested.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, BufRead, Read, Write};

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

/// Magic header of the persisted index. The trailing byte is the format version.
pub const INDEX_MAGIC: &[u8; 8] = b"DSLRIDX1";

/// A titled retrieval unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageDoc {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
}

impl PassageDoc {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("duplicate document id: {0}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid document {id:?}: {reason}")]
    InvalidDoc { id: String, reason: &'static str },
    #[error("not an index file (bad magic header)")]
    BadMagic,
    #[error("unsupported index format version {found:?}, expected {expected:?}")]
    UnsupportedVersion { found: char, expected: char },
    #[error("corrupt index file: {0}")]
    Corrupt(&'static str),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Okapi BM25 free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`; strictly positive for `df <= N`.
pub fn idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Contribution of a single query term occurring `tf` times in a document.
pub fn term_weight(idf: f64, tf: u32, doc_len: u32, avg_doc_len: f64, params: Bm25Params) -> f64 {
    if tf == 0 {
        return 0.0;
    }
    let tf = tf as f64;
    let norm = 1.0 - params.b + params.b * doc_len as f64 / avg_doc_len;
    idf * (tf * (params.k1 + 1.0)) / (tf + params.k1 * norm)
}

/// Text analysis shared by indexing, querying and the lexical scorer.
///
/// Lowercases, treats every non-alphanumeric character as a separator (a `.`
/// or `,` between two digits stays inside the token, so `3.5` survives), and
/// optionally applies the English Snowball stemmer. No stopwords.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Analyzer {
    pub stem: bool,
}

impl Analyzer {
    pub fn analyze(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        let mut tokens = Vec::new();
        let mut current = String::new();
        for (i, &c) in chars.iter().enumerate() {
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
                continue;
            }
            let between_digits = (c == '.' || c == ',')
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if between_digits && !current.is_empty() {
                current.push(c);
            } else if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
        if self.stem {
            let stemmer = Stemmer::create(Algorithm::English);
            for token in &mut tokens {
                *token = stemmer.stem(token).into_owned();
            }
        }
        tokens
    }

    /// Query-side analysis: tokens deduplicated, first occurrence order kept.
    pub fn query_terms(&self, query: &str) -> Vec<String> {
        let mut seen = HashSet::new();
        self.analyze(query)
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .collect()
    }
}

/// Analyze with the default (non-stemming) analyzer.
pub fn analyze(text: &str) -> Vec<String> {
    Analyzer::default().analyze(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub doc: PassageDoc,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub n_requested: usize,
}

impl RetrievalResult {
    pub fn docs(&self) -> impl Iterator<Item = &PassageDoc> {
        self.hits.iter().map(|h| &h.doc)
    }

    /// Keep only the first `n` hits.
    pub fn truncated(mut self, n: usize) -> Self {
        self.hits.truncate(n);
        self
    }
}

/// Sort `(doc, score)` pairs by score descending, ties by ascending doc id.
pub(crate) fn rank_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc.id.cmp(&b.doc.id))
    });
}

/// Immutable inverted index over a passage corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    params: Bm25Params,
    analyzer: Analyzer,
    docs: Vec<PassageDoc>,
    doc_lengths: Vec<u32>,
    total_len: u64,
    postings: BTreeMap<String, Vec<Posting>>,
}

/// Build an index with default BM25 parameters and analyzer.
pub fn build_index<I>(docs: I) -> Result<CorpusIndex, IndexError>
where
    I: IntoIterator<Item = PassageDoc>,
{
    CorpusIndex::build(docs, Bm25Params::default(), Analyzer::default())
}

impl CorpusIndex {
    pub fn build<I>(docs: I, params: Bm25Params, analyzer: Analyzer) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = PassageDoc>,
    {
        let mut seen = HashSet::new();
        let mut index = CorpusIndex {
            params,
            analyzer,
            docs: Vec::new(),
            doc_lengths: Vec::new(),
            total_len: 0,
            postings: BTreeMap::new(),
        };
        for doc in docs {
            if doc.id.is_empty() {
                return Err(IndexError::InvalidDoc {
                    id: doc.id,
                    reason: "empty id",
                });
            }
            if doc.title.is_empty() && doc.text.is_empty() {
                return Err(IndexError::InvalidDoc {
                    id: doc.id,
                    reason: "title and text both empty",
                });
            }
            if !seen.insert(doc.id.clone()) {
                return Err(IndexError::DuplicateId(doc.id));
            }
            let ordinal = u32::try_from(index.docs.len())
                .map_err(|_| IndexError::Corrupt("too many documents"))?;
            let mut tokens = analyzer.analyze(&doc.title);
            tokens.extend(analyzer.analyze(&doc.text));
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                index
                    .postings
                    .entry(term)
                    .or_default()
                    .push(Posting { ordinal, tf: count });
            }
            let len = tokens.len() as u32;
            index.doc_lengths.push(len);
            index.total_len += u64::from(len);
            index.docs.push(doc);
        }
        if index.docs.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        Ok(index)
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.docs.is_empty() {
            return 0.0;
        }
        self.total_len as f64 / self.docs.len() as f64
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn analyzer(&self) -> Analyzer {
        self.analyzer
    }

    pub fn doc(&self, ordinal: usize) -> Option<&PassageDoc> {
        self.docs.get(ordinal)
    }

    pub fn docs(&self) -> &[PassageDoc] {
        &self.docs
    }

    pub fn doc_len(&self, ordinal: usize) -> Option<u32> {
        self.doc_lengths.get(ordinal).copied()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &[Posting])> {
        self.postings.iter().map(|(t, p)| (t.as_str(), p.as_slice()))
    }

    fn tf(&self, term: &str, ordinal: u32) -> u32 {
        let list = self.postings(term);
        list.binary_search_by_key(&ordinal, |p| p.ordinal)
            .map(|i| list[i].tf)
            .unwrap_or(0)
    }

    /// BM25 score of one document. Panics if `ordinal` is out of range.
    pub fn bm25_score(&self, query: &str, ordinal: usize) -> f64 {
        let doc_len = self.doc_lengths[ordinal];
        let avg = self.avg_doc_len();
        let mut score = 0.0;
        for term in self.analyzer.query_terms(query) {
            let tf = self.tf(&term, ordinal as u32);
            if tf == 0 {
                continue;
            }
            let idf = idf(self.doc_count(), self.postings(&term).len());
            score += term_weight(idf, tf, doc_len, avg, self.params);
        }
        score
    }

    /// Top-`n` documents by BM25. Only documents sharing at least one query
    /// term are returned.
    pub fn retrieve(&self, query_id: &str, query: &str, n: usize) -> RetrievalResult {
        let avg = self.avg_doc_len();
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        // Term-at-a-time in query order keeps the floating point summation
        // order identical to `bm25_score`.
        for term in self.analyzer.query_terms(query) {
            let list = self.postings(&term);
            if list.is_empty() {
                continue;
            }
            let idf = idf(self.doc_count(), list.len());
            for p in list {
                let w = term_weight(
                    idf,
                    p.tf,
                    self.doc_lengths[p.ordinal as usize],
                    avg,
                    self.params,
                );
                *acc.entry(p.ordinal).or_insert(0.0) += w;
            }
        }
        let mut hits: Vec<Hit> = acc
            .into_iter()
            .map(|(ord, score)| Hit {
                doc: self.docs[ord as usize].clone(),
                score,
            })
            .collect();
        rank_hits(&mut hits);
        hits.truncate(n);
        RetrievalResult {
            query_id: query_id.to_string(),
            hits,
            n_requested: n,
        }
    }

    /// Serialize to the versioned binary format. Output is byte-identical for
    /// identical input streams.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        w.write_all(&[u8::from(self.analyzer.stem)])?;
        write_u32(&mut w, self.docs.len() as u32)?;
        for (doc, len) in self.docs.iter().zip(&self.doc_lengths) {
            write_str(&mut w, &doc.id)?;
            write_str(&mut w, &doc.title)?;
            write_str(&mut w, &doc.text)?;
            write_u32(&mut w, *len)?;
        }
        write_u32(&mut w, self.postings.len() as u32)?;
        for (term, list) in &self.postings {
            write_str(&mut w, term)?;
            write_u32(&mut w, list.len() as u32)?;
            for p in list {
                write_u32(&mut w, p.ordinal)?;
                write_u32(&mut w, p.tf)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| IndexError::BadMagic)?;
        if magic[..7] != INDEX_MAGIC[..7] {
            return Err(IndexError::BadMagic);
        }
        if magic[7] != INDEX_MAGIC[7] {
            return Err(IndexError::UnsupportedVersion {
                found: magic[7] as char,
                expected: INDEX_MAGIC[7] as char,
            });
        }
        let k1 = f64::from_le_bytes(read_array(&mut r)?);
        let b = f64::from_le_bytes(read_array(&mut r)?);
        let stem = match read_array::<1, _>(&mut r)?[0] {
            0 => false,
            1 => true,
            _ => return Err(IndexError::Corrupt("analyzer flag")),
        };
        let n_docs = read_u32(&mut r)? as usize;
        let mut docs = Vec::with_capacity(n_docs.min(1 << 20));
        let mut doc_lengths = Vec::with_capacity(n_docs.min(1 << 20));
        let mut total_len = 0u64;
        for _ in 0..n_docs {
            let id = read_str(&mut r)?;
            let title = read_str(&mut r)?;
            let text = read_str(&mut r)?;
            let len = read_u32(&mut r)?;
            total_len += u64::from(len);
            docs.push(PassageDoc { id, title, text });
            doc_lengths.push(len);
        }
        let n_terms = read_u32(&mut r)? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = read_str(&mut r)?;
            let n = read_u32(&mut r)? as usize;
            let mut list = Vec::with_capacity(n.min(n_docs));
            for _ in 0..n {
                let ordinal = read_u32(&mut r)?;
                let tf = read_u32(&mut r)?;
                if ordinal as usize >= n_docs {
                    return Err(IndexError::Corrupt("posting ordinal out of range"));
                }
                if list.last().is_some_and(|p: &Posting| p.ordinal >= ordinal) {
                    return Err(IndexError::Corrupt("postings not sorted"));
                }
                list.push(Posting { ordinal, tf });
            }
            postings.insert(term, list);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(IndexError::Corrupt("trailing bytes"));
        }
        Ok(CorpusIndex {
            params: Bm25Params { k1, b },
            analyzer: Analyzer { stem },
            docs,
            doc_lengths,
            total_len,
            postings,
        })
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], IndexError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| IndexError::Corrupt("unexpected end of file"))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IndexError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, IndexError> {
    let len = read_u32(r)? as usize;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(IndexError::Corrupt("unexpected end of file"));
    }
    String::from_utf8(buf).map_err(|_| IndexError::Corrupt("invalid utf-8"))
}

/// Read a JSON-lines corpus (`{"id", "title", "text"}` per line). Blank lines
/// are skipped; errors carry the 1-based line number.
pub fn read_corpus_jsonl<R: BufRead>(reader: R) -> Result<Vec<PassageDoc>, IndexError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: PassageDoc =
            serde_json::from_str(&line).map_err(|e| IndexError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        docs.push(doc);
    }
    Ok(docs)
}
