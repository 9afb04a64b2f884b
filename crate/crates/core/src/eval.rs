//! End-to-end evaluation: retrieve, refine, prompt, generate, score.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusIndex;
use crate::reader::{render_qa_prompt, sha256_hex, Generator};
use crate::refine::{rerank_passages, Mode, RefineConfig, RefineError, RefinedContext, Refiner};
use crate::score::{BatchConfig, Scorer};
use crate::segment::Segmenter;
use crate::tokens::TokenCounter;

pub const NORMALIZATION: &str = "unicode-lowercase, non-alphanumeric to space, collapse whitespace";

/// Lowercase, turn every non-alphanumeric character into a space, collapse
/// runs of whitespace.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Answers that normalize to nothing never match.
fn contains_any(haystack: &str, answers: &[String]) -> bool {
    let haystack = normalize(haystack);
    answers.iter().any(|a| {
        let a = normalize(a);
        !a.is_empty() && haystack.contains(&a)
    })
}

pub fn accuracy_contains(prediction: &str, answers: &[String]) -> bool {
    contains_any(prediction, answers)
}

pub fn hit_rate(context: &RefinedContext, answers: &[String]) -> bool {
    contains_any(&context.rendered, answers)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// JSON-lines `{"id","question","answers":[...]}`; blank lines are skipped.
pub fn read_dataset_jsonl<R: BufRead>(reader: R) -> Result<Vec<QaExample>, DatasetError> {
    let mut out: Vec<QaExample> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::Malformed { line: i + 1, message };
        let ex: QaExample = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if ex.id.is_empty() {
            return Err(bad("empty id".into()));
        }
        if ex.question.trim().is_empty() {
            return Err(bad("empty question".into()));
        }
        if ex.answers.is_empty() {
            return Err(bad("no answers".into()));
        }
        if !seen.insert(ex.id.clone()) {
            return Err(DatasetError::DuplicateId(ex.id));
        }
        out.push(ex);
    }
    Ok(out)
}

/// Timing source. Stopwatches start at zero.
pub trait Clock: Send + Sync {
    fn stopwatch(&self) -> Box<dyn Stopwatch>;
}

pub trait Stopwatch {
    fn elapsed_ms(&mut self) -> f64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

struct InstantWatch(Instant);

impl Stopwatch for InstantWatch {
    fn elapsed_ms(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1000.0
    }
}

impl Clock for SystemClock {
    fn stopwatch(&self) -> Box<dyn Stopwatch> {
        Box::new(InstantWatch(Instant::now()))
    }
}

/// Deterministic clock: the k-th reading of a stopwatch is `k * step_ms`.
#[derive(Debug, Clone, Copy)]
pub struct StepClock {
    pub step_ms: f64,
}

struct StepWatch {
    step: f64,
    reads: u64,
}

impl Stopwatch for StepWatch {
    fn elapsed_ms(&mut self) -> f64 {
        self.reads += 1;
        self.reads as f64 * self.step
    }
}

impl Clock for StepClock {
    fn stopwatch(&self) -> Box<dyn Stopwatch> {
        Box::new(StepWatch {
            step: self.step_ms,
            reads: 0,
        })
    }
}

pub const STAGES: [&str; 5] = ["retrieve", "decompose", "score", "reconstruct", "generate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub mode: Mode,
    pub prediction: String,
    pub correct: bool,
    pub hit: bool,
    pub context_tokens: usize,
    pub e2e_latency_ms: f64,
    pub breakdown: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub accuracy: f64,
    pub hit_rate: f64,
    pub avg_tokens: f64,
    pub avg_e2e_ms: f64,
    /// Queries that completed; the averages are over exactly these.
    pub n_queries: usize,
    pub n_errors: usize,
    pub config_fingerprint: String,
    pub normalization: String,
}

impl RunReport {
    /// Aggregate over the successful records, in the given order.
    pub fn from_records(records: &[EvalRecord], config_fingerprint: String) -> Self {
        let ok: Vec<&EvalRecord> = records.iter().filter(|r| !r.is_error()).collect();
        let n = ok.len();
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        Self {
            accuracy: mean(&|r| f64::from(u8::from(r.correct))),
            hit_rate: mean(&|r| f64::from(u8::from(r.hit))),
            avg_tokens: mean(&|r| r.context_tokens as f64),
            avg_e2e_ms: mean(&|r| r.e2e_latency_ms),
            n_queries: n,
            n_errors: records.len() - n,
            config_fingerprint,
            normalization: NORMALIZATION.into(),
        }
    }

    pub fn failure_rate(&self) -> f64 {
        let total = self.n_queries + self.n_errors;
        if total == 0 {
            0.0
        } else {
            self.n_errors as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub refine: RefineConfig,
    /// Retrieve this many passages and rerank them down to
    /// `refine.top_n_docs` with the scorer before refining.
    #[serde(default)]
    pub rerank_candidates: Option<usize>,
    pub batch: BatchConfig,
    pub workers: usize,
    pub scorer_id: String,
    pub reader_id: String,
    /// Free-form provenance (input paths, tokenizer, ...) folded into the
    /// fingerprint.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl EvalConfig {
    pub fn new(refine: RefineConfig) -> Self {
        Self {
            refine,
            rerank_candidates: None,
            batch: BatchConfig::default(),
            workers: 1,
            scorer_id: String::new(),
            reader_id: String::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.refine.validate()?;
        if self.workers == 0 {
            return Err(EvalError::Config("workers must be at least 1".into()));
        }
        if let Some(n) = self.rerank_candidates {
            if n < self.refine.top_n_docs {
                return Err(EvalError::Config(format!(
                    "rerank_candidates ({n}) is below top_n_docs ({})",
                    self.refine.top_n_docs
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

/// SHA-256 of the value's JSON serialization. Struct fields serialize in
/// declaration order and maps are sorted, so the encoding is stable.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<RefineError> for EvalError {
    fn from(e: RefineError) -> Self {
        EvalError::Config(e.to_string())
    }
}

pub struct Pipeline<'a> {
    pub index: &'a CorpusIndex,
    pub scorer: &'a dyn Scorer,
    pub reader: &'a dyn Generator,
    pub counter: &'a dyn TokenCounter,
    pub segmenter: &'a Segmenter,
    pub clock: &'a dyn Clock,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub record: EvalRecord,
    pub context: Option<RefinedContext>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub outcomes: Vec<QueryOutcome>,
}

impl RunOutput {
    pub fn records(&self) -> impl Iterator<Item = &EvalRecord> {
        self.outcomes.iter().map(|o| &o.record)
    }
}

/// Apply `f` to every item with up to `workers` threads; results keep input
/// order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Run every example through the pipeline. Per-query failures become error
/// records; only configuration errors abort.
pub fn run(pipeline: &Pipeline<'_>, config: &EvalConfig, examples: &[QaExample]) -> Result<RunOutput, EvalError> {
    config.validate()?;
    let outcomes = parallel_map(examples, config.workers, |ex| run_query(pipeline, config, ex));
    let records: Vec<EvalRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    Ok(RunOutput {
        report: RunReport::from_records(&records, config.fingerprint()),
        outcomes,
    })
}

pub fn run_query(pipeline: &Pipeline<'_>, config: &EvalConfig, ex: &QaExample) -> QueryOutcome {
    let mut watch = pipeline.clock.stopwatch();
    let mut breakdown = BTreeMap::new();
    let mut last = 0.0;
    let mut mark = |stage: &str, watch: &mut Box<dyn Stopwatch>| {
        let now = watch.elapsed_ms();
        breakdown.insert(stage.to_string(), now - last);
        last = now;
        now
    };
    let refiner = Refiner::new(pipeline.scorer, pipeline.counter, pipeline.segmenter).with_batch(config.batch);
    let rc = &config.refine;

    let result = (|| -> Result<(RefinedContext, String), String> {
        let docs = match config.rerank_candidates {
            Some(n) => {
                let docs = pipeline.index.retrieve(&ex.id, &ex.question, n);
                rerank_passages(&ex.question, &docs, pipeline.scorer, rc.top_n_docs, config.batch)
                    .map_err(|e| e.to_string())?
            }
            None => pipeline.index.retrieve(&ex.id, &ex.question, rc.top_n_docs),
        };
        mark("retrieve", &mut watch);
        let set = refiner.decompose(&docs, rc);
        mark("decompose", &mut watch);
        let scored = refiner.score(&ex.question, &set, rc).map_err(|e| e.to_string())?;
        mark("score", &mut watch);
        let ctx = refiner
            .finish(&docs, &set, scored.as_deref(), rc)
            .map_err(|e| e.to_string())?;
        mark("reconstruct", &mut watch);
        let prompt = render_qa_prompt(&ctx.rendered, &ex.question);
        let answer = pipeline
            .reader
            .generate(&prompt)
            .map_err(|e| format!("reader: {e}"))?;
        Ok((ctx, answer.text))
    })();
    let e2e = mark("generate", &mut watch);

    match result {
        Ok((ctx, prediction)) => QueryOutcome {
            record: EvalRecord {
                query_id: ex.id.clone(),
                mode: rc.mode,
                correct: accuracy_contains(&prediction, &ex.answers),
                hit: hit_rate(&ctx, &ex.answers),
                context_tokens: ctx.token_count,
                prediction,
                e2e_latency_ms: e2e,
                breakdown,
                error: None,
            },
            context: Some(ctx),
        },
        Err(error) => QueryOutcome {
            record: EvalRecord {
                query_id: ex.id.clone(),
                mode: rc.mode,
                prediction: String::new(),
                correct: false,
                hit: false,
                context_tokens: 0,
                e2e_latency_ms: e2e,
                breakdown,
                error: Some(error),
            },
            context: None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_index, PassageDoc};
    use crate::reader::MockReader;
    use crate::score::MockScorer;
    use crate::tokens::WhitespaceTokenizer;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The answer is: Oxygen!"), "the answer is oxygen");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("U.S.A."), "u s a");
        assert_eq!(normalize("  ÉCOLE\tNormale "), "école normale");
    }

    #[test]
    fn containment() {
        assert!(accuracy_contains("Oxygen is the most abundant", &s(&["Oxygen"])));
        assert!(accuracy_contains("Oxygen", &s(&["Oxygen"])));
        assert!(!accuracy_contains("Nitrogen", &s(&["Oxygen"])));
        assert!(accuracy_contains("Nitrogen", &s(&["Oxygen", "nitrogen."])));
        assert!(!accuracy_contains("anything", &s(&["!!"])));
    }

    #[test]
    fn dataset_loading() {
        let ok = "{\"id\":\"q1\",\"question\":\"a?\",\"answers\":[\"x\"]}\n\n{\"id\":\"q2\",\"question\":\"b?\",\"answers\":[\"y\",\"z\"]}\n";
        let ds = read_dataset_jsonl(ok.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[1].answers, ["y", "z"]);
        let bad = "{\"id\":\"q1\",\"question\":\"a?\",\"answers\":[\"x\"]}\n{\"id\":\"q2\",\"question\":\"b?\",\"answers\":[]}\n";
        match read_dataset_jsonl(bad.as_bytes()) {
            Err(DatasetError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_dataset_jsonl("{\"id\":\"q\",\"question\":\"a\",\"answers\":[\"x\"]}\n{\"id\":\"q\",\"question\":\"a\",\"answers\":[\"x\"]}".as_bytes()),
            Err(DatasetError::DuplicateId(_))
        ));
    }

    #[test]
    fn step_clock_is_deterministic() {
        let c = StepClock { step_ms: 2.5 };
        let mut w = c.stopwatch();
        assert_eq!(w.elapsed_ms(), 2.5);
        assert_eq!(w.elapsed_ms(), 5.0);
        assert_eq!(c.stopwatch().elapsed_ms(), 2.5);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..100).collect();
        assert_eq!(parallel_map(&items, 8, |x| x * 2), parallel_map(&items, 1, |x| x * 2));
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = EvalConfig::new(RefineConfig::dslr(0.5));
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.refine.threshold = f64::NEG_INFINITY;
        let mut c = a.clone();
        c.refine.threshold = f64::INFINITY;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(b.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    fn fixture() -> (CorpusIndex, Vec<QaExample>) {
        let index = build_index(vec![
            PassageDoc::new("d1", "Oxygen", "Oxygen is the most abundant element in the human body. It is a gas."),
            PassageDoc::new("d2", "Grace and Frankie", "The show premiered in 2015. The first season has 13 episodes."),
        ])
        .unwrap();
        let ex = vec![
            QaExample { id: "q1".into(), question: "most abundant element human body".into(), answers: s(&["Oxygen"]) },
            QaExample { id: "q2".into(), question: "Grace and Frankie first season episodes".into(), answers: s(&["13"]) },
        ];
        (index, ex)
    }

    #[test]
    fn run_aggregates_records() {
        let (index, ex) = fixture();
        let scorer = MockScorer::new("m").with_default(1.0);
        let reader = MockReader::default().with_rule("13 episodes", "13").with_default("Oxygen");
        let seg = Segmenter::default();
        let p = Pipeline {
            index: &index,
            scorer: &scorer,
            reader: &reader,
            counter: &WhitespaceTokenizer,
            segmenter: &seg,
            clock: &StepClock { step_ms: 1.0 },
        };
        let out = run(&p, &EvalConfig::new(RefineConfig::dslr(0.5)), &ex).unwrap();
        assert_eq!(out.report.n_queries, 2);
        assert_eq!(out.report.accuracy, 1.0);
        assert_eq!(out.report.hit_rate, 1.0);
        let r = &out.outcomes[0].record;
        assert_eq!(r.e2e_latency_ms, 5.0);
        assert_eq!(r.breakdown.len(), 5);
        assert!(r.breakdown.values().all(|&v| v == 1.0));
        let tokens: f64 = out.records().map(|r| r.context_tokens as f64).sum::<f64>() / 2.0;
        assert_eq!(out.report.avg_tokens, tokens);
    }

    #[test]
    fn scorer_failure_is_recorded_not_fatal() {
        let (index, ex) = fixture();
        let scorer = MockScorer::new("m").with_default(1.0).failing_on(&ex[0].question);
        let reader = MockReader::default().with_default("13");
        let seg = Segmenter::default();
        let p = Pipeline {
            index: &index,
            scorer: &scorer,
            reader: &reader,
            counter: &WhitespaceTokenizer,
            segmenter: &seg,
            clock: &SystemClock,
        };
        let out = run(&p, &EvalConfig::new(RefineConfig::dslr(0.5)), &ex).unwrap();
        assert_eq!((out.report.n_queries, out.report.n_errors), (1, 1));
        assert!(out.outcomes[0].record.error.is_some());
        assert_eq!(out.report.accuracy, 1.0);
        assert_eq!(out.report.failure_rate(), 0.5);
    }

    #[test]
    fn bad_config_aborts() {
        let (index, ex) = fixture();
        let scorer = MockScorer::new("m");
        let reader = MockReader::default();
        let seg = Segmenter::default();
        let p = Pipeline {
            index: &index,
            scorer: &scorer,
            reader: &reader,
            counter: &WhitespaceTokenizer,
            segmenter: &seg,
            clock: &SystemClock,
        };
        let cfg = EvalConfig::new(RefineConfig { mode: Mode::Random, ..Default::default() });
        assert!(run(&p, &cfg, &ex).is_err());
    }

    fn brute_contains(hay: &str, needle: &str) -> bool {
        let (h, n): (Vec<char>, Vec<char>) = (hay.chars().collect(), needle.chars().collect());
        !n.is_empty() && (0..=h.len().saturating_sub(n.len())).any(|i| h.len() >= n.len() && h[i..i + n.len()] == n[..])
    }

    proptest! {
        #[test]
        fn containment_matches_brute_force(
            pred in "[a-cA-C .,!]{0,12}",
            answers in prop::collection::vec("[a-cA-C .]{0,4}", 1..4),
        ) {
            let expected = answers.iter().any(|a| brute_contains(&normalize(&pred), &normalize(a)));
            prop_assert_eq!(accuracy_contains(&pred, &answers), expected);
        }
    }
}
