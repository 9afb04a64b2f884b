//! Threshold calibration, threshold sweeps and score-distribution summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusIndex;
use crate::eval::{parallel_map, QaExample, RunOutput};
use crate::refine::score_sentences;
use crate::rng::{derive_seed, SeededRng};
use crate::score::{BatchConfig, ScoreError, Scorer};
use crate::segment::Segmenter;

pub const DEFAULT_PERCENTILE: f64 = 90.0;
pub const DEFAULT_SWEEP: [f64; 9] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0];

#[derive(Debug, thiserror::Error)]
pub enum CalibrateError {
    #[error("no values to summarize")]
    EmptyInput,
    #[error("percentile {0} is outside (0, 100]")]
    BadPercentile(f64),
    #[error("calibration produced no sentence scores")]
    EmptyPool,
    #[error("row {row} has {found} columns, expected {expected}")]
    ShapeMismatch { row: usize, found: usize, expected: usize },
    #[error("invalid calibration input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_percentile(p: f64) -> Result<(), CalibrateError> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(CalibrateError::BadPercentile(p))
    }
}

/// Nearest-rank percentile: the smallest element `v` such that at least
/// `p`% of the values are `<= v`, i.e. index `ceil(p * n / 100) - 1` of the
/// ascending sort. The rank is the smallest `k` with `100 * k >= p * n`
/// (the product rounded once); dividing first would turn `p = 7, n = 100`
/// into rank 8.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, CalibrateError> {
    check_percentile(p)?;
    if values.is_empty() {
        return Err(CalibrateError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), p)])
}

fn nearest_rank(n: usize, p: f64) -> usize {
    let target = p * n as f64;
    let covers = |k: usize| k as f64 * 100.0 >= target;
    // The division can round across an integer; settle on the exact answer.
    let mut rank = ((target / 100.0).ceil() as usize).clamp(1, n);
    while rank > 1 && covers(rank - 1) {
        rank -= 1;
    }
    while rank < n && !covers(rank) {
        rank += 1;
    }
    rank - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub scorer_id: String,
    pub value: f64,
    pub percentile: f64,
    pub sample_size: usize,
    pub seed: u64,
    pub source_datasets: Vec<String>,
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<(), CalibrateError> {
        check_percentile(self.percentile)?;
        if !self.value.is_finite() {
            return Err(CalibrateError::Invalid(format!("threshold {} is not finite", self.value)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, CalibrateError> {
        let spec: Self = serde_json::from_str(s).map_err(|e| CalibrateError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<QaExample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    pub sample_size: usize,
    pub percentile: f64,
    pub seed: u64,
    pub workers: usize,
    pub batch: BatchConfig,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            sample_size: 1000,
            percentile: DEFAULT_PERCENTILE,
            seed: 0,
            workers: 1,
            batch: BatchConfig::default(),
        }
    }
}

/// Up to `sample_size` examples per dataset, drawn without replacement with
/// a generator seeded from `(seed, dataset name)`.
pub fn sample_queries<'d>(datasets: &'d [Dataset], sample_size: usize, seed: u64) -> Vec<&'d QaExample> {
    let mut out = Vec::new();
    for d in datasets {
        let mut rng = SeededRng::new(derive_seed(seed, &d.name));
        let order = rng.permutation(d.examples.len());
        out.extend(order.into_iter().take(sample_size).map(|i| &d.examples[i]));
    }
    out
}

/// Sentence scores of the top-1 passage of every sampled query, pooled.
pub fn score_pool(
    datasets: &[Dataset],
    index: &CorpusIndex,
    scorer: &dyn Scorer,
    segmenter: &Segmenter,
    params: &CalibrationParams,
) -> Result<Vec<f64>, CalibrateError> {
    if params.sample_size == 0 {
        return Err(CalibrateError::Invalid("sample_size must be at least 1".into()));
    }
    let sampled = sample_queries(datasets, params.sample_size, params.seed);
    let per_query = parallel_map(&sampled, params.workers, |ex| {
        let docs = index.retrieve(&ex.id, &ex.question, 1);
        let set = segmenter.decompose_set(docs.docs());
        score_sentences(&ex.question, &set, scorer, params.batch)
            .map(|v| v.into_iter().map(|s| s.score).collect::<Vec<_>>())
    });
    let mut pool = Vec::new();
    for scores in per_query {
        pool.extend(scores?);
    }
    Ok(pool)
}

pub fn calibrate_threshold(
    datasets: &[Dataset],
    index: &CorpusIndex,
    scorer: &dyn Scorer,
    segmenter: &Segmenter,
    params: &CalibrationParams,
) -> Result<ThresholdSpec, CalibrateError> {
    check_percentile(params.percentile)?;
    let pool = score_pool(datasets, index, scorer, segmenter, params)?;
    ThresholdSpec::from_pool(&pool, scorer.id(), datasets, params)
}

impl ThresholdSpec {
    /// The `params.percentile` point of an already scored pool.
    pub fn from_pool(
        pool: &[f64],
        scorer_id: &str,
        datasets: &[Dataset],
        params: &CalibrationParams,
    ) -> Result<Self, CalibrateError> {
        if pool.is_empty() {
            return Err(CalibrateError::EmptyPool);
        }
        Ok(ThresholdSpec {
            scorer_id: scorer_id.to_string(),
            value: percentile(pool, params.percentile)?,
            percentile: params.percentile,
            sample_size: params.sample_size,
            seed: params.seed,
            source_datasets: datasets.iter().map(|d| d.name.clone()).collect(),
        })
    }
}

/// Fraction of rows with at least one `true`.
pub fn oracle_union(matrix: &[Vec<bool>]) -> Result<f64, CalibrateError> {
    let Some(first) = matrix.first() else {
        return Err(CalibrateError::EmptyInput);
    };
    let width = first.len();
    if width == 0 {
        return Err(CalibrateError::EmptyInput);
    }
    for (row, r) in matrix.iter().enumerate() {
        if r.len() != width {
            return Err(CalibrateError::ShapeMismatch { row, found: r.len(), expected: width });
        }
    }
    let hits = matrix.iter().filter(|r| r.iter().any(|&c| c)).count();
    Ok(hits as f64 / matrix.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub percentile: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub avg_tokens: f64,
    pub avg_e2e_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub oracle_accuracy: f64,
    pub oracle_avg_tokens: f64,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CalibrateError> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| CalibrateError::Io(e.into());
        out.write_record(["percentile", "threshold", "accuracy", "avg_tokens", "avg_e2e_ms"])
            .map_err(csv_err)?;
        for p in &self.points {
            out.write_record([
                p.percentile.to_string(),
                p.threshold.to_string(),
                p.accuracy.to_string(),
                p.avg_tokens.to_string(),
                p.avg_e2e_ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.write_record([
            "oracle".to_string(),
            String::new(),
            self.oracle_accuracy.to_string(),
            self.oracle_avg_tokens.to_string(),
            String::new(),
        ])
        .map_err(csv_err)?;
        out.flush()?;
        Ok(())
    }
}

/// Evaluate at each `(percentile, threshold)` point and combine.
///
/// A failed query counts as incorrect at that point. For the oracle token
/// average each query contributes its token count at the highest-percentile
/// point where it was answered correctly, or at the highest-percentile point
/// if it never was.
pub fn sweep_thresholds<F>(points: &[(f64, f64)], mut evaluate: F) -> Result<SweepResult, CalibrateError>
where
    F: FnMut(f64) -> Result<RunOutput, CalibrateError>,
{
    if points.is_empty() {
        return Err(CalibrateError::EmptyInput);
    }
    let mut points = points.to_vec();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out_points = Vec::with_capacity(points.len());
    // columns[j][i]: (correct, tokens) of query i at point j
    let mut columns: Vec<Vec<(bool, usize)>> = Vec::with_capacity(points.len());
    for &(p, t) in &points {
        check_percentile(p)?;
        let run = evaluate(t)?;
        out_points.push(SweepPoint {
            percentile: p,
            threshold: t,
            accuracy: run.report.accuracy,
            avg_tokens: run.report.avg_tokens,
            avg_e2e_ms: run.report.avg_e2e_ms,
        });
        columns.push(run.records().map(|r| (r.correct, r.context_tokens)).collect());
    }
    let n = columns[0].len();
    let matrix: Vec<Vec<bool>> = (0..n)
        .map(|i| columns.iter().map(|c| c.get(i).is_some_and(|x| x.0)).collect())
        .collect();
    if let Some((row, r)) = columns.iter().enumerate().find(|(_, c)| c.len() != n) {
        return Err(CalibrateError::ShapeMismatch { row, found: r.len(), expected: n });
    }
    if n == 0 {
        return Ok(SweepResult { points: out_points, oracle_accuracy: 0.0, oracle_avg_tokens: 0.0 });
    }
    let oracle_tokens: f64 = (0..n)
        .map(|i| {
            let j = (0..columns.len())
                .rev()
                .find(|&j| columns[j][i].0)
                .unwrap_or(columns.len() - 1);
            columns[j][i].1 as f64
        })
        .sum::<f64>()
        / n as f64;
    Ok(SweepResult {
        points: out_points,
        oracle_accuracy: oracle_union(&matrix)?,
        oracle_avg_tokens: oracle_tokens,
    })
}

/// Thresholds induced by `percentiles` over a calibration score pool.
pub fn sweep_grid(pool: &[f64], percentiles: &[f64]) -> Result<Vec<(f64, f64)>, CalibrateError> {
    if percentiles.is_empty() {
        return Err(CalibrateError::EmptyInput);
    }
    percentiles
        .iter()
        .map(|&p| percentile(pool, p).map(|t| (p, t)))
        .collect()
}

pub fn sweep<F>(pool: &[f64], percentiles: &[f64], evaluate: F) -> Result<SweepResult, CalibrateError>
where
    F: FnMut(f64) -> Result<RunOutput, CalibrateError>,
{
    sweep_thresholds(&sweep_grid(pool, percentiles)?, evaluate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; every bin is half-open except the
/// last, which also takes `max`.
pub fn score_histogram(pool: &[f64], bins: usize) -> Result<Vec<HistogramBin>, CalibrateError> {
    if bins == 0 {
        return Err(CalibrateError::Invalid("bins must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(CalibrateError::EmptyInput);
    }
    if pool.iter().any(|x| !x.is_finite()) {
        return Err(CalibrateError::Invalid("non-finite score in pool".into()));
    }
    let min = pool.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pool.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in pool {
        let k = if width > 0.0 { ((x - min) / width) as usize } else { 0 };
        counts[k.min(bins - 1)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lo: min + k as f64 * width,
            hi: if k + 1 == bins { max } else { min + (k + 1) as f64 * width },
            count,
        })
        .collect())
}
