//! Layered run configuration: TOML file < `DSLR_*` environment < flags.
//!
//! One flat key set is shared by every subcommand; keys a subcommand does
//! not use are carried along (and emitted) but ignored.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use dslr_core::refine::{parse_threshold, threshold_serde, Mode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerChoice {
    Lexical,
    Remote,
    /// Score table from `--scorer-table`.
    Mock,
}

/// A threshold that accepts `-inf`/`inf` on the command line and in files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold(#[serde(with = "threshold_serde")] pub f64);

impl FromStr for Threshold {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_threshold(s).map(Threshold)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Corpus JSON-lines ({"id","title","text"}).
    #[arg(long, env = "DSLR_CORPUS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Prebuilt index file; takes precedence over --corpus when reading.
    #[arg(long, env = "DSLR_INDEX")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    /// Dataset JSON-lines ({"id","question","answers"}); repeatable.
    #[arg(long, env = "DSLR_DATASET", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<Vec<PathBuf>>,
    /// Calibration datasets for sweep (default: --dataset).
    #[arg(long, env = "DSLR_CALIBRATION_DATASET", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_dataset: Option<Vec<PathBuf>>,
    /// Single ad-hoc query for `retrieve`.
    #[arg(long, env = "DSLR_QUERY")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,

    #[arg(long, env = "DSLR_SCORER", value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerChoice>,
    #[arg(long, env = "DSLR_SCORER_URL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer_url: Option<String>,
    #[arg(long, env = "DSLR_SCORER_TABLE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer_table: Option<PathBuf>,
    #[arg(long, env = "DSLR_SCORER_TIMEOUT_MS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer_timeout_ms: Option<u64>,
    #[arg(long, env = "DSLR_MAX_BATCH")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_batch: Option<usize>,
    #[arg(long, env = "DSLR_CONCURRENCY_LIMIT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concurrency_limit: Option<usize>,

    #[arg(long, env = "DSLR_READER_URL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reader_url: Option<String>,
    /// Mock reader rules (JSON).
    #[arg(long, env = "DSLR_READER_TABLE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reader_table: Option<PathBuf>,
    #[arg(long, env = "DSLR_READER_TIMEOUT_MS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reader_timeout_ms: Option<u64>,
    #[arg(long, env = "DSLR_MAX_TOKENS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Remote /tokenize service; whitespace counting when unset.
    #[arg(long, env = "DSLR_TOKENIZER_URL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokenizer_url: Option<String>,

    #[arg(long, env = "DSLR_THRESHOLD", allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<Threshold>,
    /// ThresholdSpec JSON written by `calibrate`.
    #[arg(long, env = "DSLR_THRESHOLD_FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_file: Option<PathBuf>,
    /// Keep only scores strictly above the threshold.
    #[arg(long, env = "DSLR_STRICT", num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strict: Option<bool>,
    #[arg(long, env = "DSLR_PERCENTILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percentile: Option<f64>,
    /// `10..90` (step 10), `10..90:5`, or `10,50,90`.
    #[arg(long, env = "DSLR_PERCENTILES")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percentiles: Option<String>,
    #[arg(long, env = "DSLR_SAMPLE_SIZE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    /// Histogram bins for `calibrate --histogram`.
    #[arg(long, env = "DSLR_BINS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[arg(long, env = "DSLR_HISTOGRAM")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<PathBuf>,

    #[arg(long, env = "DSLR_TOP_N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_n: Option<usize>,
    /// Retrieve this many passages and rerank down to --top-n.
    #[arg(long, env = "DSLR_RERANK_CANDIDATES")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_candidates: Option<usize>,
    /// dslr, passage, descend, ascend, random, no_rerank, fixed_trunc,
    /// fixed_sent or fixed_rand.
    #[arg(long, env = "DSLR_MODE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// Body-token budget for the fixed_* modes.
    #[arg(long, env = "DSLR_BUDGET")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[arg(long, env = "DSLR_SEED")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, env = "DSLR_WORKERS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,

    #[arg(long, env = "DSLR_K1")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    #[arg(long, env = "DSLR_B")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[arg(long, env = "DSLR_STEM", num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stem: Option<bool>,
    /// One abbreviation per line, replacing the built-in list.
    #[arg(long, env = "DSLR_ABBREVIATIONS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abbreviations: Option<PathBuf>,

    #[arg(long, env = "DSLR_OUT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// RunReport JSON for `eval` (stdout when unset).
    #[arg(long, env = "DSLR_REPORT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Highest tolerated fraction of failed queries before exit code 4.
    #[arg(long, env = "DSLR_MAX_FAILURE_RATE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_failure_rate: Option<f64>,
    /// Replace wall-clock latency with a fake clock advancing this many ms
    /// per reading, for reproducible outputs.
    #[arg(long, env = "DSLR_CLOCK_STEP_MS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clock_step_ms: Option<f64>,
}

impl Settings {
    pub fn from_toml_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Fields set in `over` win.
    pub fn layered(self, over: Settings) -> Settings {
        let mut base = to_map(&self);
        base.extend(to_map(&over));
        serde_json::from_value(serde_json::Value::Object(base)).expect("settings round-trip")
    }

    /// Fill unset keys with their defaults so the emitted config is complete.
    pub fn resolved(self) -> Settings {
        let d = Settings {
            scorer: Some(ScorerChoice::Lexical),
            scorer_timeout_ms: Some(30_000),
            max_batch: Some(64),
            concurrency_limit: Some(4),
            reader_timeout_ms: Some(60_000),
            max_tokens: Some(100),
            strict: Some(false),
            percentile: Some(90.0),
            percentiles: Some("10..90".into()),
            sample_size: Some(1000),
            bins: Some(20),
            top_n: Some(1),
            mode: Some(Mode::Dslr),
            workers: Some(1),
            k1: Some(0.9),
            b: Some(0.4),
            stem: Some(false),
            max_failure_rate: Some(0.0),
            ..Settings::default()
        };
        d.layered(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to toml")
    }
}

fn to_map(s: &Settings) -> serde_json::Map<String, serde_json::Value> {
    match serde_json::to_value(s).expect("settings serialize") {
        serde_json::Value::Object(m) => m,
        _ => unreachable!(),
    }
}

/// `10..90` (step 10), `10..90:5`, or a comma list.
pub fn parse_percentiles(spec: &str) -> Result<Vec<f64>, String> {
    let spec = spec.trim();
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad percentile {s:?}"))
    };
    let out = if let Some((lo, rest)) = spec.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (num(hi)?, num(step)?),
            None => (num(rest)?, 10.0),
        };
        let lo = num(lo)?;
        if step <= 0.0 || hi < lo {
            return Err(format!("bad percentile range {spec:?}"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| lo + step * i as f64).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if out.is_empty() || out.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
        return Err(format!("percentiles must lie in (0, 100]: {spec:?}"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_layers_win() {
        let file = Settings { top_n: Some(3), workers: Some(2), ..Default::default() };
        let env = Settings { top_n: Some(5), ..Default::default() };
        let merged = file.layered(env);
        assert_eq!(merged.top_n, Some(5));
        assert_eq!(merged.workers, Some(2));
    }

    #[test]
    fn toml_round_trip_with_infinite_threshold() {
        let s = Settings {
            threshold: Some(Threshold(f64::NEG_INFINITY)),
            mode: Some(Mode::NoRerank),
            ..Default::default()
        }
        .resolved();
        let text = s.to_toml();
        assert!(text.contains("threshold = \"-inf\""), "{text}");
        assert!(text.contains("mode = \"no_rerank\""), "{text}");
        let back: Settings = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
        let numeric: Settings = toml::from_str("threshold = 0.25").unwrap();
        assert_eq!(numeric.threshold, Some(Threshold(0.25)));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Settings>("treshold = 1").is_err());
    }

    #[test]
    fn percentile_specs() {
        assert_eq!(parse_percentiles("10..90").unwrap().len(), 9);
        assert_eq!(parse_percentiles("10..90").unwrap()[8], 90.0);
        assert_eq!(parse_percentiles("50..60:5").unwrap(), [50.0, 55.0, 60.0]);
        assert_eq!(parse_percentiles("10, 95").unwrap(), [10.0, 95.0]);
        assert!(parse_percentiles("0..50").is_err());
        assert!(parse_percentiles("90..10").is_err());
        assert!(parse_percentiles("x").is_err());
    }
}
