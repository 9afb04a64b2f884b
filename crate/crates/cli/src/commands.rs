use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use dslr_core::calibrate::{
    score_histogram, score_pool, sweep, CalibrationParams, Dataset, ThresholdSpec,
};
use dslr_core::corpus::{read_corpus_jsonl, Analyzer, Bm25Params, CorpusIndex, RetrievalResult};
use dslr_core::eval::{self, read_dataset_jsonl, Clock, EvalConfig, Pipeline, QaExample, RunOutput, StepClock, SystemClock};
use dslr_core::reader::{sha256_hex, Generator, MockReader, ReaderConfig, RemoteReader};
use dslr_core::refine::{rerank_passages, Mode, RefineConfig, Refiner};
use dslr_core::score::{BatchConfig, LexicalScorer, MockScorer, RemoteScorer, Scorer};
use dslr_core::segment::Segmenter;
use dslr_core::tokens::{RemoteTokenizer, TokenCounter, WhitespaceTokenizer};
use serde::Serialize;

use crate::error::CliError;
use crate::settings::{parse_percentiles, ScorerChoice, Settings};

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| input_err(path, e))
}

fn digest(path: &Path) -> Result<String, CliError> {
    fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(|e| input_err(path, e))
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Input(format!("stdout: {e}"))),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `<out>.config.toml` next to the primary output.
pub fn write_effective_config(s: &Settings, command: &str) -> Result<(), CliError> {
    if let Some(out) = &s.out {
        let text = format!("# dslr {command}\n{}", s.to_toml());
        write_out(Some(&with_suffix(out, ".config.toml")), text.as_bytes())?;
    }
    Ok(())
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))
}

// ---- input loading ----

fn bm25_params(s: &Settings) -> Bm25Params {
    let d = Bm25Params::default();
    Bm25Params {
        k1: s.k1.unwrap_or(d.k1),
        b: s.b.unwrap_or(d.b),
    }
}

fn analyzer(s: &Settings) -> Analyzer {
    Analyzer {
        stem: s.stem.unwrap_or(false),
    }
}

fn build_from_corpus(path: &Path, s: &Settings) -> Result<CorpusIndex, CliError> {
    let docs = read_corpus_jsonl(open(path)?).map_err(|e| input_err(path, e))?;
    CorpusIndex::build(docs, bm25_params(s), analyzer(s)).map_err(|e| input_err(path, e))
}

fn load_index(s: &Settings, prov: &mut BTreeMap<String, String>) -> Result<CorpusIndex, CliError> {
    if let Some(path) = &s.index {
        prov.insert("index_sha256".into(), digest(path)?);
        return CorpusIndex::read_from(open(path)?).map_err(|e| input_err(path, e));
    }
    let path = s
        .corpus
        .as_ref()
        .ok_or_else(|| usage("one of --index or --corpus is required"))?;
    prov.insert("corpus_sha256".into(), digest(path)?);
    build_from_corpus(path, s)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let examples = read_dataset_jsonl(open(path)?).map_err(|e| input_err(path, e))?;
    let name = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset { name, examples })
}

fn load_datasets(
    paths: &[PathBuf],
    key: &str,
    prov: &mut BTreeMap<String, String>,
) -> Result<Vec<Dataset>, CliError> {
    if paths.is_empty() {
        return Err(usage(format!("--{} is required", key.replace('_', "-"))));
    }
    let mut out = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        prov.insert(format!("{key}_{i}_sha256"), digest(p)?);
        out.push(load_dataset(p)?);
    }
    Ok(out)
}

fn flatten(datasets: Vec<Dataset>) -> Vec<QaExample> {
    datasets.into_iter().flat_map(|d| d.examples).collect()
}

fn build_scorer(
    s: &Settings,
    index: &CorpusIndex,
    prov: &mut BTreeMap<String, String>,
) -> Result<Box<dyn Scorer>, CliError> {
    let choice = s.scorer.unwrap_or(ScorerChoice::Lexical);
    Ok(match choice {
        ScorerChoice::Lexical => Box::new(LexicalScorer::new(index.params(), index.analyzer())),
        ScorerChoice::Remote => {
            let url = s.scorer_url.as_deref().ok_or_else(|| {
                CliError::Upstream("remote scorer selected but no --scorer-url is configured".into())
            })?;
            prov.insert("scorer_url".into(), url.to_string());
            Box::new(RemoteScorer::new(url, s.scorer_timeout_ms.unwrap_or(30_000)))
        }
        ScorerChoice::Mock => {
            let path = required(&s.scorer_table, "scorer-table")?;
            prov.insert("scorer_table_sha256".into(), digest(path)?);
            Box::new(MockScorer::from_jsonl("mock", open(path)?).map_err(|e| input_err(path, e))?)
        }
    })
}

fn build_reader(s: &Settings, prov: &mut BTreeMap<String, String>) -> Result<Box<dyn Generator>, CliError> {
    match (&s.reader_url, &s.reader_table) {
        (Some(_), Some(_)) => Err(usage("--reader-url and --reader-table are mutually exclusive")),
        (Some(url), None) => {
            let cfg = ReaderConfig {
                endpoint: url.clone(),
                max_tokens: s.max_tokens.unwrap_or(100),
                temperature: 0.0,
                timeout_ms: s.reader_timeout_ms.unwrap_or(60_000),
            };
            prov.insert("reader_url".into(), url.clone());
            Ok(Box::new(RemoteReader::new(&cfg).map_err(usage)?))
        }
        (None, Some(path)) => {
            prov.insert("reader_table_sha256".into(), digest(path)?);
            Ok(Box::new(MockReader::from_json(open(path)?).map_err(|e| input_err(path, e))?))
        }
        (None, None) => Err(usage("one of --reader-url or --reader-table is required")),
    }
}

fn build_counter(s: &Settings, prov: &mut BTreeMap<String, String>) -> Box<dyn TokenCounter> {
    match &s.tokenizer_url {
        Some(url) => {
            prov.insert("tokenizer".into(), url.clone());
            Box::new(RemoteTokenizer::new(url, s.scorer_timeout_ms.unwrap_or(30_000)))
        }
        None => {
            prov.insert("tokenizer".into(), "whitespace".into());
            Box::new(WhitespaceTokenizer)
        }
    }
}

fn build_segmenter(s: &Settings, prov: &mut BTreeMap<String, String>) -> Result<Segmenter, CliError> {
    match &s.abbreviations {
        Some(path) => {
            prov.insert("abbreviations_sha256".into(), digest(path)?);
            Segmenter::from_abbreviation_file(path).map_err(|e| input_err(path, e))
        }
        None => Ok(Segmenter::default()),
    }
}

fn batch(s: &Settings) -> Result<BatchConfig, CliError> {
    let b = BatchConfig {
        max_batch: s.max_batch.unwrap_or(64),
        concurrency_limit: s.concurrency_limit.unwrap_or(4),
    };
    if b.max_batch == 0 || b.concurrency_limit == 0 {
        return Err(usage("--max-batch and --concurrency-limit must be at least 1"));
    }
    Ok(b)
}

fn uses_threshold(mode: Mode) -> bool {
    matches!(mode, Mode::Dslr | Mode::Descend | Mode::Ascend | Mode::Random | Mode::NoRerank)
}

fn threshold(s: &Settings, mode: Mode) -> Result<f64, CliError> {
    match (&s.threshold, &s.threshold_file) {
        (Some(_), Some(_)) => Err(usage("--threshold and --threshold-file are mutually exclusive")),
        (Some(t), None) => Ok(t.0),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
            let spec = ThresholdSpec::from_json(&text).map_err(|e| input_err(path, e))?;
            Ok(spec.value)
        }
        (None, None) if uses_threshold(mode) => Err(usage(format!(
            "mode {mode} requires --threshold or --threshold-file"
        ))),
        (None, None) => Ok(f64::NEG_INFINITY),
    }
}

/// Refinement settings; the seed and budget are passed on only to modes
/// that use them, and demanded from modes that need them.
fn refine_config(s: &Settings, with_threshold: bool) -> Result<RefineConfig, CliError> {
    let mode = s.mode.unwrap_or(Mode::Dslr);
    let seed = if mode.needs_seed() {
        Some(*s.seed.as_ref().ok_or_else(|| usage(format!("mode {mode} requires --seed")))?)
    } else {
        None
    };
    let budget = if mode.needs_budget() {
        Some(*s.budget.as_ref().ok_or_else(|| usage(format!("mode {mode} requires --budget")))?)
    } else {
        None
    };
    let cfg = RefineConfig {
        threshold: if with_threshold { threshold(s, mode)? } else { f64::NEG_INFINITY },
        top_n_docs: s.top_n.unwrap_or(1),
        mode,
        budget_tokens: budget,
        seed,
        strict: s.strict.unwrap_or(false),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn workers(s: &Settings) -> Result<usize, CliError> {
    match s.workers.unwrap_or(1) {
        0 => Err(usage("--workers must be at least 1")),
        n => Ok(n),
    }
}

fn clock(s: &Settings) -> Result<Box<dyn Clock>, CliError> {
    match s.clock_step_ms {
        Some(step) if !(step.is_finite() && step >= 0.0) => Err(usage("--clock-step-ms must be a non-negative number")),
        Some(step) => Ok(Box::new(StepClock { step_ms: step })),
        None => Ok(Box::new(SystemClock)),
    }
}

fn failure_ceiling(s: &Settings) -> Result<f64, CliError> {
    let c = s.max_failure_rate.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&c) {
        return Err(usage("--max-failure-rate must lie in [0, 1]"));
    }
    Ok(c)
}

// ---- subcommands ----

pub fn cmd_index(s: &Settings) -> Result<(), CliError> {
    let corpus = required(&s.corpus, "corpus")?;
    let out = required(&s.out, "out")?;
    let index = build_from_corpus(corpus, s)?;
    let mut bytes = Vec::new();
    index.write_to(&mut bytes)?;
    write_out(Some(out), &bytes)?;
    write_effective_config(s, "index")?;
    println!(
        "{} documents, avg length {:.2} tokens",
        index.doc_count(),
        index.avg_doc_len()
    );
    Ok(())
}

#[derive(Serialize)]
struct HitRecord<'a> {
    id: &'a str,
    title: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct RetrieveRecord<'a> {
    query_id: &'a str,
    hits: Vec<HitRecord<'a>>,
}

fn retrieve_record(r: &RetrievalResult) -> RetrieveRecord<'_> {
    RetrieveRecord {
        query_id: &r.query_id,
        hits: r
            .hits
            .iter()
            .map(|h| HitRecord { id: &h.doc.id, title: &h.doc.title, score: h.score })
            .collect(),
    }
}

pub fn cmd_retrieve(s: &Settings) -> Result<(), CliError> {
    let mut prov = BTreeMap::new();
    let index = load_index(s, &mut prov)?;
    let n = s.top_n.unwrap_or(1);
    if n == 0 {
        return Err(usage("--top-n must be at least 1"));
    }
    let examples = match (&s.query, &s.dataset) {
        (Some(_), Some(_)) => return Err(usage("--query and --dataset are mutually exclusive")),
        (Some(q), None) => vec![QaExample { id: "q".into(), question: q.clone(), answers: vec![] }],
        (None, Some(paths)) => flatten(load_datasets(paths, "dataset", &mut prov)?),
        (None, None) => return Err(usage("one of --query or --dataset is required")),
    };
    let results: Vec<RetrievalResult> = examples
        .iter()
        .map(|ex| index.retrieve(&ex.id, &ex.question, n))
        .collect();
    write_out(s.out.as_deref(), &jsonl(results.iter().map(retrieve_record)))?;
    write_effective_config(s, "retrieve")
}

pub fn cmd_refine(s: &Settings) -> Result<(), CliError> {
    let mut prov = BTreeMap::new();
    let rc = refine_config(s, true)?;
    let index = load_index(s, &mut prov)?;
    let examples = flatten(load_datasets(s.dataset.as_deref().unwrap_or_default(), "dataset", &mut prov)?);
    let scorer = build_scorer(s, &index, &mut prov)?;
    let counter = build_counter(s, &mut prov);
    let segmenter = build_segmenter(s, &mut prov)?;
    let batch = batch(s)?;
    let refiner = Refiner::new(scorer.as_ref(), counter.as_ref(), &segmenter).with_batch(batch);
    if let Some(m) = s.rerank_candidates {
        if m < rc.top_n_docs {
            return Err(usage("--rerank-candidates must be at least --top-n"));
        }
    }

    let results = eval::parallel_map(&examples, workers(s)?, |ex| {
        let docs = match s.rerank_candidates {
            Some(m) => rerank_passages(
                &ex.question,
                &index.retrieve(&ex.id, &ex.question, m),
                scorer.as_ref(),
                rc.top_n_docs,
                batch,
            )?,
            None => index.retrieve(&ex.id, &ex.question, rc.top_n_docs),
        };
        refiner.refine(&ex.question, &docs, &rc)
    });
    let mut lines = Vec::new();
    for (ex, r) in examples.iter().zip(results) {
        let ctx = r.map_err(|e| {
            let e = CliError::from(e);
            match e {
                CliError::Upstream(m) => CliError::Upstream(format!("query {}: {m}", ex.id)),
                other => other,
            }
        })?;
        serde_json::to_writer(&mut lines, &ctx.to_record(&ex.id)).expect("record serializes");
        lines.push(b'\n');
    }
    write_out(s.out.as_deref(), &lines)?;
    write_effective_config(s, "refine")
}

struct EvalSetup {
    index: CorpusIndex,
    scorer: Box<dyn Scorer>,
    reader: Box<dyn Generator>,
    counter: Box<dyn TokenCounter>,
    segmenter: Segmenter,
    clock: Box<dyn Clock>,
    config: EvalConfig,
}

impl EvalSetup {
    fn new(s: &Settings, refine: RefineConfig, prov: &mut BTreeMap<String, String>) -> Result<Self, CliError> {
        let index = load_index(s, prov)?;
        let scorer = build_scorer(s, &index, prov)?;
        let reader = build_reader(s, prov)?;
        let counter = build_counter(s, prov);
        let segmenter = build_segmenter(s, prov)?;
        let config = EvalConfig {
            refine,
            rerank_candidates: s.rerank_candidates,
            batch: batch(s)?,
            workers: workers(s)?,
            scorer_id: scorer.id().to_string(),
            reader_id: reader.id(),
            provenance: BTreeMap::new(),
        };
        config.validate()?;
        Ok(Self { index, scorer, reader, counter, segmenter, clock: clock(s)?, config })
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            index: &self.index,
            scorer: self.scorer.as_ref(),
            reader: self.reader.as_ref(),
            counter: self.counter.as_ref(),
            segmenter: &self.segmenter,
            clock: self.clock.as_ref(),
        }
    }

    fn run(&self, config: &EvalConfig, examples: &[QaExample]) -> Result<RunOutput, CliError> {
        Ok(eval::run(&self.pipeline(), config, examples)?)
    }
}

fn check_failures(out: &RunOutput, ceiling: f64, what: &str) -> Result<(), CliError> {
    let rate = out.report.failure_rate();
    if rate > ceiling {
        return Err(CliError::Partial(format!(
            "{what}: {} of {} queries failed (rate {rate:.4} exceeds ceiling {ceiling})",
            out.report.n_errors,
            out.report.n_errors + out.report.n_queries
        )));
    }
    Ok(())
}

pub fn cmd_eval(s: &Settings) -> Result<(), CliError> {
    let mut prov = BTreeMap::new();
    let refine = refine_config(s, true)?;
    let ceiling = failure_ceiling(s)?;
    let examples = flatten(load_datasets(s.dataset.as_deref().unwrap_or_default(), "dataset", &mut prov)?);
    let mut setup = EvalSetup::new(s, refine, &mut prov)?;
    setup.config.provenance = prov;
    let out = setup.run(&setup.config, &examples)?;

    if let Some(path) = &s.out {
        write_out(Some(path), &jsonl(out.records()))?;
    }
    let report = serde_json::to_string_pretty(&out.report).expect("report serializes") + "\n";
    write_out(s.report.as_deref(), report.as_bytes())?;
    write_effective_config(s, "eval")?;
    check_failures(&out, ceiling, "eval")
}

fn calibration_params(s: &Settings) -> Result<CalibrationParams, CliError> {
    let seed = *s
        .seed
        .as_ref()
        .ok_or_else(|| usage("--seed is required: calibration samples queries at random"))?;
    Ok(CalibrationParams {
        sample_size: s.sample_size.unwrap_or(1000),
        percentile: s.percentile.unwrap_or(90.0),
        seed,
        workers: workers(s)?,
        batch: batch(s)?,
    })
}

pub fn cmd_calibrate(s: &Settings) -> Result<(), CliError> {
    let mut prov = BTreeMap::new();
    let params = calibration_params(s)?;
    let index = load_index(s, &mut prov)?;
    let datasets = load_datasets(s.dataset.as_deref().unwrap_or_default(), "dataset", &mut prov)?;
    let scorer = build_scorer(s, &index, &mut prov)?;
    let segmenter = build_segmenter(s, &mut prov)?;
    let pool = score_pool(&datasets, &index, scorer.as_ref(), &segmenter, &params)?;
    let spec = ThresholdSpec::from_pool(&pool, scorer.id(), &datasets, &params)?;
    write_out(s.out.as_deref(), spec.to_json().as_bytes())?;
    if let Some(path) = &s.histogram {
        let bins = score_histogram(&pool, s.bins.unwrap_or(20))?;
        let mut text = String::from("lo,hi,count\n");
        for b in bins {
            text.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
        }
        write_out(Some(path), text.as_bytes())?;
    }
    write_effective_config(s, "calibrate")
}

pub fn cmd_sweep(s: &Settings) -> Result<(), CliError> {
    let mut prov = BTreeMap::new();
    let params = calibration_params(s)?;
    let ceiling = failure_ceiling(s)?;
    let percentiles = parse_percentiles(s.percentiles.as_deref().unwrap_or("10..90")).map_err(usage)?;
    if s.threshold.is_some() || s.threshold_file.is_some() {
        return Err(usage("sweep derives its thresholds; drop --threshold/--threshold-file"));
    }
    let refine = RefineConfig {
        // placeholder; every sweep point sets its own
        threshold: 0.0,
        ..refine_config(s, false)?
    };
    if !uses_threshold(refine.mode) {
        return Err(usage(format!("mode {} does not use a threshold", refine.mode)));
    }
    let examples = flatten(load_datasets(s.dataset.as_deref().unwrap_or_default(), "dataset", &mut prov)?);
    let calibration = match &s.calibration_dataset {
        Some(paths) => load_datasets(paths, "calibration_dataset", &mut prov)?,
        None => load_datasets(s.dataset.as_deref().unwrap_or_default(), "dataset", &mut prov)?,
    };
    let mut setup = EvalSetup::new(s, refine, &mut prov)?;
    setup.config.provenance = prov;
    let pool = score_pool(&calibration, &setup.index, setup.scorer.as_ref(), &setup.segmenter, &params)?;

    let mut first_failure: Option<CliError> = None;
    let mut abort: Option<CliError> = None;
    let result = sweep(&pool, &percentiles, |t| {
        let mut config = setup.config.clone();
        config.refine.threshold = t;
        let out = setup.run(&config, &examples).map_err(|e| {
            let msg = e.message().to_string();
            abort = Some(e);
            dslr_core::calibrate::CalibrateError::Eval(msg)
        })?;
        if first_failure.is_none() {
            first_failure = check_failures(&out, ceiling, &format!("threshold {t}")).err();
        }
        Ok(out)
    });
    let result = match (result, abort) {
        (Ok(r), _) => r,
        (Err(_), Some(e)) => return Err(e),
        (Err(e), None) => return Err(e.into()),
    };
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    write_out(s.out.as_deref(), &csv)?;
    write_effective_config(s, "sweep")?;
    match first_failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
