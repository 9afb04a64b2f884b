//! Published reference numbers for comparison with live-model runs.
//!
//! None of these are reproducible with the lexical scorer and mock reader;
//! they are carried as metadata so reports can be put side by side with the
//! original measurements (13B reader, Wikipedia-scale retrieval).

/// Calibrated 90th-percentile thresholds per scorer.
pub const THRESHOLDS: [(&str, f64); 6] = [
    ("bm25", 7.6389),
    ("contriever", 0.9341),
    ("dpr", 71.4338),
    ("monot5", 0.098),
    ("rankt5", -3.597),
    ("rg", 0.9998),
];

pub fn threshold(scorer: &str) -> Option<f64> {
    THRESHOLDS
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(scorer))
        .map(|&(_, t)| t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub setting: &'static str,
    pub avg_tokens: f64,
    pub accuracy: f64,
}

/// Natural Questions, top-1 passage.
pub const NQ_TOP1: [ReferenceRow; 3] = [
    ReferenceRow { setting: "baseline", avg_tokens: 167.0, accuracy: 25.6 },
    ReferenceRow { setting: "bm25", avg_tokens: 48.0, accuracy: 28.7 },
    ReferenceRow { setting: "rg", avg_tokens: 46.0, accuracy: 33.7 },
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub percentile: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub avg_tokens: f64,
}

/// RG threshold sweep on Natural Questions.
pub const NQ_RG_SWEEP: [SweepRow; 9] = [
    SweepRow { percentile: 10.0, threshold: 2.7969e-05, accuracy: 28.6, avg_tokens: 164.0 },
    SweepRow { percentile: 20.0, threshold: 0.00043, accuracy: 28.7, avg_tokens: 159.0 },
    SweepRow { percentile: 30.0, threshold: 0.0076, accuracy: 29.0, avg_tokens: 150.0 },
    SweepRow { percentile: 40.0, threshold: 0.0826, accuracy: 29.2, avg_tokens: 141.0 },
    SweepRow { percentile: 50.0, threshold: 0.65841, accuracy: 29.4, avg_tokens: 123.0 },
    SweepRow { percentile: 60.0, threshold: 0.9196, accuracy: 29.7, avg_tokens: 109.0 },
    SweepRow { percentile: 70.0, threshold: 0.9857, accuracy: 29.8, avg_tokens: 94.0 },
    SweepRow { percentile: 80.0, threshold: 0.9981, accuracy: 29.9, avg_tokens: 75.0 },
    SweepRow { percentile: 90.0, threshold: 0.9998, accuracy: 29.5, avg_tokens: 51.0 },
];

/// Union over the sweep above: (accuracy, avg tokens).
pub const NQ_RG_ORACLE: (f64, f64) = (34.1, 77.0);
