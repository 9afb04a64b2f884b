//! Relevance scoring over `(query, candidate)` pairs.
//!
//! Backends: a native lexical BM25 scorer, a client for the `/score` HTTP
//! protocol, and deterministic mocks for tests. Everything downstream
//! consumes only the [`ScoreVector`], never the backend identity.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::corpus::{idf, term_weight, Analyzer, Bm25Params};
use crate::remote::{JsonClient, RemoteError, RetryPolicy};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Passage,
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub title: String,
    pub text: String,
}

impl Candidate {
    pub fn new(title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            text: text.into(),
        }
    }

    /// `title + ". " + text`, or whichever part is non-empty.
    pub fn presented(&self) -> String {
        match (self.title.is_empty(), self.text.is_empty()) {
            (false, false) => format!("{}. {}", self.title, self.text),
            (true, _) => self.text.clone(),
            (false, true) => self.title.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub scorer_id: String,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("remote scorer unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("malformed scorer response: {0}")]
    RemoteMalformed(String),
    #[error("scorer timed out after {0} ms")]
    Timeout(u64),
    #[error("no candidates to score")]
    EmptyCandidates,
    #[error("candidate {0} has neither title nor text")]
    InvalidCandidate(usize),
    #[error("no mock score for query {query:?} and candidate {text:?}")]
    MissingScore { query: String, text: String },
    #[error("invalid scorer config: {0}")]
    Config(String),
}

impl From<RemoteError> for ScoreError {
    fn from(e: RemoteError) -> Self {
        match e {
            RemoteError::Unavailable(m) => ScoreError::RemoteUnavailable(m),
            RemoteError::Timeout(ms) => ScoreError::Timeout(ms),
            RemoteError::Malformed(m) => ScoreError::RemoteMalformed(m),
            RemoteError::Rejected { status, message } => {
                ScoreError::RemoteMalformed(format!("request rejected ({status}): {message}"))
            }
        }
    }
}

pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;

    fn score(
        &self,
        query: &str,
        candidates: &[Candidate],
        granularity: Granularity,
    ) -> Result<ScoreVector, ScoreError>;

    /// True when each score depends only on its own `(query, candidate)`
    /// pair, so the candidate list may be split into batches.
    fn is_pointwise(&self) -> bool {
        true
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, q: &str, c: &[Candidate], g: Granularity) -> Result<ScoreVector, ScoreError> {
        (**self).score(q, c, g)
    }
    fn is_pointwise(&self) -> bool {
        (**self).is_pointwise()
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn score(&self, q: &str, c: &[Candidate], g: Granularity) -> Result<ScoreVector, ScoreError> {
        (**self).score(q, c, g)
    }
    fn is_pointwise(&self) -> bool {
        (**self).is_pointwise()
    }
}

fn validate_candidates(candidates: &[Candidate]) -> Result<(), ScoreError> {
    if candidates.is_empty() {
        return Err(ScoreError::EmptyCandidates);
    }
    match candidates
        .iter()
        .position(|c| c.title.is_empty() && c.text.is_empty())
    {
        Some(i) => Err(ScoreError::InvalidCandidate(i)),
        None => Ok(()),
    }
}

fn check_vector(expected: usize, v: &ScoreVector) -> Result<(), ScoreError> {
    if v.scores.len() != expected {
        return Err(ScoreError::RemoteMalformed(format!(
            "expected {expected} scores, got {}",
            v.scores.len()
        )));
    }
    if let Some(i) = v.scores.iter().position(|s| !s.is_finite()) {
        return Err(ScoreError::RemoteMalformed(format!(
            "score {i} is not finite"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub max_batch: usize,
    pub concurrency_limit: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            max_batch: 64,
            concurrency_limit: 1,
        }
    }
}

/// Score `candidates`, splitting pointwise backends into chunks of at most
/// `max_batch` with up to `concurrency_limit` chunks in flight. The result is
/// reassembled in submission order and is identical to a single call.
pub fn score_batched<S: Scorer + ?Sized>(
    scorer: &S,
    query: &str,
    candidates: &[Candidate],
    granularity: Granularity,
    batch: BatchConfig,
) -> Result<ScoreVector, ScoreError> {
    validate_candidates(candidates)?;
    let max_batch = batch.max_batch.max(1);
    if !scorer.is_pointwise() || candidates.len() <= max_batch {
        let v = scorer.score(query, candidates, granularity)?;
        check_vector(candidates.len(), &v)?;
        return Ok(v);
    }
    let chunks: Vec<&[Candidate]> = candidates.chunks(max_batch).collect();
    let mut parts: Vec<Option<Result<ScoreVector, ScoreError>>> = vec![None; chunks.len()];
    for wave in (0..chunks.len()).collect::<Vec<_>>().chunks(batch.concurrency_limit.max(1)) {
        if wave.len() == 1 {
            let i = wave[0];
            parts[i] = Some(scorer.score(query, chunks[i], granularity));
            continue;
        }
        let results: Vec<(usize, Result<ScoreVector, ScoreError>)> = thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&i| {
                    let chunk = chunks[i];
                    s.spawn(move || (i, scorer.score(query, chunk, granularity)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scorer thread panicked"))
                .collect()
        });
        for (i, r) in results {
            parts[i] = Some(r);
        }
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut scorer_id = scorer.id().to_string();
    for (chunk, part) in chunks.iter().zip(parts) {
        let v = part.expect("every chunk scored")?;
        check_vector(chunk.len(), &v)?;
        scorer_id = v.scorer_id;
        scores.extend(v.scores);
    }
    Ok(ScoreVector {
        scores,
        scorer_id,
        granularity,
    })
}

/// BM25 over the submitted candidate list: document frequencies and average
/// length are computed from the candidates themselves.
#[derive(Debug, Clone, Default)]
pub struct LexicalScorer {
    pub params: Bm25Params,
    pub analyzer: Analyzer,
}

impl LexicalScorer {
    pub fn new(params: Bm25Params, analyzer: Analyzer) -> Self {
        Self { params, analyzer }
    }
}

impl Scorer for LexicalScorer {
    fn id(&self) -> &str {
        "lexical-bm25"
    }

    fn score(
        &self,
        query: &str,
        candidates: &[Candidate],
        granularity: Granularity,
    ) -> Result<ScoreVector, ScoreError> {
        validate_candidates(candidates)?;
        let docs: Vec<Vec<String>> = candidates
            .iter()
            .map(|c| self.analyzer.analyze(&c.presented()))
            .collect();
        let n = docs.len();
        let total: usize = docs.iter().map(Vec::len).sum();
        let avg = total as f64 / n as f64;
        let terms = self.analyzer.query_terms(query);
        let tfs: Vec<HashMap<&str, u32>> = docs
            .iter()
            .map(|d| {
                let mut m = HashMap::new();
                for t in d {
                    *m.entry(t.as_str()).or_insert(0) += 1;
                }
                m
            })
            .collect();
        let idfs: Vec<f64> = terms
            .iter()
            .map(|t| idf(n, tfs.iter().filter(|m| m.contains_key(t.as_str())).count()))
            .collect();
        let scores = tfs
            .iter()
            .zip(&docs)
            .map(|(tf, d)| {
                let mut s = 0.0;
                for (t, w) in terms.iter().zip(&idfs) {
                    let f = tf.get(t.as_str()).copied().unwrap_or(0);
                    if f > 0 {
                        s += term_weight(*w, f, d.len() as u32, avg, self.params);
                    }
                }
                s
            })
            .collect();
        Ok(ScoreVector {
            scores,
            scorer_id: self.id().to_string(),
            granularity,
        })
    }

    fn is_pointwise(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum MockEntry {
    Score { query: String, text: String, score: f64 },
    Fail { query: String, fail: bool },
    Default { default: f64 },
}

/// Table-driven scorer keyed on `(query, candidate text)`. A query of `*`
/// matches any query. Queries listed in `failing_queries` fail with
/// `RemoteUnavailable`, for fault-injection tests.
#[derive(Debug, Clone, Default)]
pub struct MockScorer {
    id: String,
    table: HashMap<(String, String), f64>,
    default: Option<f64>,
    failing_queries: HashSet<String>,
}

impl MockScorer {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn with_score(mut self, query: &str, text: &str, score: f64) -> Self {
        self.insert(query, text, score);
        self
    }

    pub fn with_default(mut self, score: f64) -> Self {
        self.default = Some(score);
        self
    }

    pub fn failing_on(mut self, query: &str) -> Self {
        self.failing_queries.insert(query.to_string());
        self
    }

    pub fn insert(&mut self, query: &str, text: &str, score: f64) {
        self.table
            .insert((query.to_string(), text.to_string()), score);
    }

    /// JSON-lines, one of `{"query", "text", "score"}`,
    /// `{"query", "fail": true}` or `{"default"}`.
    pub fn from_jsonl<R: BufRead>(id: &str, reader: R) -> Result<Self, String> {
        let mut m = MockScorer::new(id);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let e: MockEntry =
                serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
            match e {
                MockEntry::Score { query, text, score } => m.insert(&query, &text, score),
                MockEntry::Fail { query, fail: true } => {
                    m.failing_queries.insert(query);
                }
                MockEntry::Fail { .. } => {}
                MockEntry::Default { default } => m.default = Some(default),
            }
        }
        Ok(m)
    }

    fn lookup(&self, query: &str, text: &str) -> Option<f64> {
        self.table
            .get(&(query.to_string(), text.to_string()))
            .or_else(|| self.table.get(&("*".to_string(), text.to_string())))
            .copied()
            .or(self.default)
    }
}

impl Scorer for MockScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(
        &self,
        query: &str,
        candidates: &[Candidate],
        granularity: Granularity,
    ) -> Result<ScoreVector, ScoreError> {
        validate_candidates(candidates)?;
        if self.failing_queries.contains(query) {
            return Err(ScoreError::RemoteUnavailable(format!(
                "injected failure for query {query:?}"
            )));
        }
        let scores = candidates
            .iter()
            .map(|c| {
                self.lookup(query, &c.text)
                    .ok_or_else(|| ScoreError::MissingScore {
                        query: query.to_string(),
                        text: c.text.clone(),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(ScoreVector {
            scores,
            scorer_id: self.id.clone(),
            granularity,
        })
    }
}

/// Deterministic pseudo-random scores, uniform on `[0, 1)`, derived from a
/// hash of `(seed, query, presented candidate)`.
#[derive(Debug, Clone)]
pub struct UniformMockScorer {
    pub seed: u64,
}

impl UniformMockScorer {
    pub fn value(&self, query: &str, candidate: &Candidate) -> f64 {
        let key = format!("{query}\u{1f}{}", candidate.presented());
        (derive_seed(self.seed, &key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl Scorer for UniformMockScorer {
    fn id(&self) -> &str {
        "mock-uniform"
    }

    fn score(
        &self,
        query: &str,
        candidates: &[Candidate],
        granularity: Granularity,
    ) -> Result<ScoreVector, ScoreError> {
        validate_candidates(candidates)?;
        Ok(ScoreVector {
            scores: candidates.iter().map(|c| self.value(query, c)).collect(),
            scorer_id: self.id().to_string(),
            granularity,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct ScoreRequest<'a> {
    pub query: &'a str,
    pub candidates: &'a [Candidate],
    pub granularity: Granularity,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<f64>,
    pub scorer_id: String,
}

/// Client for `POST /score`. Title and text are sent as separate fields; the
/// service applies the same title presentation rule as the local backends.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    id: String,
    client: JsonClient,
}

impl RemoteScorer {
    pub fn new(endpoint: &str, timeout_ms: u64) -> Self {
        Self::with_retry(endpoint, timeout_ms, RetryPolicy::default())
    }

    pub fn with_retry(endpoint: &str, timeout_ms: u64, retry: RetryPolicy) -> Self {
        let client = JsonClient::new(endpoint, timeout_ms, retry);
        Self {
            id: format!("remote:{}", client.base()),
            client,
        }
    }
}

impl Scorer for RemoteScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(
        &self,
        query: &str,
        candidates: &[Candidate],
        granularity: Granularity,
    ) -> Result<ScoreVector, ScoreError> {
        validate_candidates(candidates)?;
        let resp: ScoreResponse = self.client.post(
            "/score",
            &ScoreRequest {
                query,
                candidates,
                granularity,
            },
        )?;
        let v = ScoreVector {
            scores: resp.scores,
            scorer_id: resp.scorer_id,
            granularity,
        };
        check_vector(candidates.len(), &v)?;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    LexicalBm25,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_batch: usize,
    pub concurrency_limit: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::LexicalBm25,
            endpoint: None,
            timeout_ms: 30_000,
            max_batch: 64,
            concurrency_limit: 4,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        match (self.kind, &self.endpoint) {
            (ScorerKind::Remote, None) => {
                return Err(ScoreError::Config("remote scorer requires an endpoint".into()))
            }
            (ScorerKind::LexicalBm25, Some(_)) => {
                return Err(ScoreError::Config(
                    "endpoint is only valid for the remote scorer".into(),
                ))
            }
            _ => {}
        }
        if self.max_batch == 0 {
            return Err(ScoreError::Config("max_batch must be at least 1".into()));
        }
        if self.concurrency_limit == 0 {
            return Err(ScoreError::Config("concurrency_limit must be at least 1".into()));
        }
        Ok(())
    }

    pub fn batch(&self) -> BatchConfig {
        BatchConfig {
            max_batch: self.max_batch,
            concurrency_limit: self.concurrency_limit,
        }
    }

    pub fn build(&self, params: Bm25Params, analyzer: Analyzer) -> Result<Box<dyn Scorer>, ScoreError> {
        self.validate()?;
        Ok(match self.kind {
            ScorerKind::LexicalBm25 => Box::new(LexicalScorer::new(params, analyzer)),
            ScorerKind::Remote => Box::new(RemoteScorer::new(
                self.endpoint.as_deref().expect("validated"),
                self.timeout_ms,
            )),
        })
    }
}
