//! Sentence-level refinement of retrieved passages.
//!
//! The main path decomposes each retrieved passage into sentences, scores
//! every sentence against the query, drops the ones scoring below the
//! threshold and renders the survivors in their original in-passage order.
//! Passages are refined independently and concatenated in retrieval order.
//!
//! The remaining modes exist for comparison: survivors reordered by score or
//! at random, a random subset matched to the refined token count, and
//! fixed-token-budget baselines.
//!
//! Rendering: each passage becomes `"[k] Title"` followed by a newline and its
//! kept sentences joined by single spaces; passages are separated by a blank
//! line. A passage with nothing kept keeps its header line.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::{Hit, RetrievalResult};
use crate::remote::RemoteError;
use crate::rng::{derive_seed, SeededRng};
use crate::score::{score_batched, BatchConfig, Candidate, Granularity, ScoreError, Scorer};
use crate::segment::{Segmenter, Sentence, SentenceSet};
use crate::tokens::{prefix_end, TokenCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dslr,
    Descend,
    Ascend,
    Random,
    Passage,
    FixedTrunc,
    FixedSent,
    FixedRand,
    NoRerank,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::Dslr,
        Mode::Descend,
        Mode::Ascend,
        Mode::Random,
        Mode::Passage,
        Mode::FixedTrunc,
        Mode::FixedSent,
        Mode::FixedRand,
        Mode::NoRerank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dslr => "dslr",
            Mode::Descend => "descend",
            Mode::Ascend => "ascend",
            Mode::Random => "random",
            Mode::Passage => "passage",
            Mode::FixedTrunc => "fixed_trunc",
            Mode::FixedSent => "fixed_sent",
            Mode::FixedRand => "fixed_rand",
            Mode::NoRerank => "no_rerank",
        }
    }

    pub fn needs_budget(self) -> bool {
        matches!(self, Mode::FixedTrunc | Mode::FixedSent | Mode::FixedRand)
    }

    pub fn needs_seed(self) -> bool {
        matches!(self, Mode::Random | Mode::FixedRand | Mode::NoRerank)
    }

    pub fn needs_scorer(self) -> bool {
        !matches!(self, Mode::Passage | Mode::FixedTrunc | Mode::FixedRand)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("token counting failed: {0}")]
    Tokenize(#[from] RemoteError),
    #[error("sentence {position} of document {doc_id:?} is not part of the decomposed set")]
    UnknownSentence { doc_id: String, position: usize },
    #[error("invalid refine config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub top_n_docs: usize,
    pub mode: Mode,
    pub budget_tokens: Option<usize>,
    pub seed: Option<u64>,
    /// Keep only scores strictly above the threshold.
    #[serde(default)]
    pub strict: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            threshold: f64::NEG_INFINITY,
            top_n_docs: 1,
            mode: Mode::Dslr,
            budget_tokens: None,
            seed: None,
            strict: false,
        }
    }
}

impl RefineConfig {
    pub fn dslr(threshold: f64) -> Self {
        Self {
            threshold,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if self.top_n_docs == 0 {
            return Err(RefineError::Config("top_n_docs must be at least 1".into()));
        }
        if self.threshold.is_nan() {
            return Err(RefineError::Config("threshold is NaN".into()));
        }
        match (self.mode.needs_budget(), self.budget_tokens) {
            (true, None) => {
                return Err(RefineError::Config(format!(
                    "mode {} requires a token budget",
                    self.mode
                )))
            }
            (false, Some(_)) => {
                return Err(RefineError::Config(format!(
                    "mode {} does not take a token budget",
                    self.mode
                )))
            }
            _ => {}
        }
        match (self.mode.needs_seed(), self.seed) {
            (true, None) => Err(RefineError::Config(format!(
                "mode {} requires a seed",
                self.mode
            ))),
            (false, Some(_)) => Err(RefineError::Config(format!(
                "mode {} does not take a seed",
                self.mode
            ))),
            _ => Ok(()),
        }
    }

    fn keeps(&self, score: f64) -> bool {
        if self.strict {
            score > self.threshold
        } else {
            score >= self.threshold
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSentence {
    pub sentence: Sentence,
    /// Retrieval rank of the source passage (0-based).
    pub doc_rank: usize,
    pub score: f64,
    /// Position in score-descending order over the whole set.
    pub rank: usize,
}

/// A sentence as it appears in the rendered context.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextSentence {
    pub position: usize,
    pub text: String,
    pub score: Option<f64>,
}

impl From<&ScoredSentence> for ContextSentence {
    fn from(s: &ScoredSentence) -> Self {
        Self {
            position: s.sentence.position,
            text: s.sentence.text.clone(),
            score: Some(s.score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocContext {
    pub doc_id: String,
    pub title: String,
    pub kept: Vec<ContextSentence>,
}

impl DocContext {
    pub fn body(&self) -> String {
        self.kept
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedContext {
    pub per_doc: Vec<DocContext>,
    pub rendered: String,
    pub token_count: usize,
    pub kept_count: usize,
    pub dropped_count: usize,
    pub threshold_used: Option<f64>,
    pub mode: Mode,
}

impl RefinedContext {
    pub fn to_record(&self, query_id: &str) -> RefinedRecord<'_> {
        RefinedRecord {
            query_id: query_id.to_string(),
            mode: self.mode,
            threshold: self.threshold_used,
            rendered: &self.rendered,
            token_count: self.token_count,
            kept: self.kept_count,
            dropped: self.dropped_count,
            per_doc: &self.per_doc,
        }
    }
}

/// One line of the refined-output JSON-lines file.
#[derive(Debug, Serialize)]
pub struct RefinedRecord<'a> {
    pub query_id: String,
    pub mode: Mode,
    #[serde(serialize_with = "serialize_threshold")]
    pub threshold: Option<f64>,
    pub rendered: &'a str,
    pub token_count: usize,
    pub kept: usize,
    pub dropped: usize,
    pub per_doc: &'a [DocContext],
}

/// Finite thresholds as numbers, infinities as `"-inf"` / `"inf"`.
pub fn serialize_threshold<S: Serializer>(t: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match t {
        None => s.serialize_none(),
        Some(v) if v.is_finite() => s.serialize_f64(*v),
        Some(v) if *v > 0.0 => s.serialize_str("inf"),
        Some(_) => s.serialize_str("-inf"),
    }
}

/// Accepts a decimal number or `-inf` / `inf` (also `+inf`, `infinity`).
pub fn parse_threshold(s: &str) -> Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
        t => match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("invalid threshold {s:?}")),
        },
    }
}

/// Serde adapter for a threshold that may be infinite (JSON has no
/// infinities).
pub mod threshold_serde {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &f64, s: S) -> Result<S::Ok, S::Error> {
        super::serialize_threshold(&Some(*t), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => super::parse_threshold(&s).map_err(D::Error::custom),
        }
    }
}

fn header(rank: usize, title: &str) -> String {
    if title.is_empty() {
        format!("[{}]", rank + 1)
    } else {
        format!("[{}] {}", rank + 1, title)
    }
}

fn render_block(rank: usize, title: &str, body: &str) -> String {
    if body.is_empty() {
        header(rank, title)
    } else {
        format!("{}\n{}", header(rank, title), body)
    }
}

/// Baseline rendering of whole passages, in retrieval order.
pub fn render_passages(docs: &RetrievalResult) -> String {
    docs.docs()
        .enumerate()
        .map(|(k, d)| render_block(k, &d.title, d.text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render(per_doc: &[DocContext]) -> String {
    per_doc
        .iter()
        .enumerate()
        .map(|(k, d)| render_block(k, &d.title, &d.body()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn assemble(
    original: &SentenceSet,
    mode: Mode,
    kept: Vec<Vec<ContextSentence>>,
    threshold_used: Option<f64>,
    counter: &dyn TokenCounter,
) -> Result<RefinedContext, RefineError> {
    let per_doc: Vec<DocContext> = original
        .source_docs()
        .iter()
        .zip(kept)
        .map(|(d, kept)| DocContext {
            doc_id: d.id.clone(),
            title: d.title.clone(),
            kept,
        })
        .collect();
    let rendered = render(&per_doc);
    let kept_count = per_doc.iter().map(|d| d.kept.len()).sum();
    Ok(RefinedContext {
        token_count: counter.count(&rendered)?,
        rendered,
        kept_count,
        dropped_count: original.len() - kept_count,
        threshold_used,
        mode,
        per_doc,
    })
}

fn order_by_score_desc(a: &ScoredSentence, b: &ScoredSentence) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.doc_rank.cmp(&b.doc_rank))
        .then(a.sentence.position.cmp(&b.sentence.position))
}

/// Assign `rank` by score descending, ties by (doc rank, position).
pub fn assign_ranks(scored: &mut [ScoredSentence]) {
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| order_by_score_desc(&scored[a], &scored[b]));
    for (rank, i) in idx.into_iter().enumerate() {
        scored[i].rank = rank;
    }
}

/// Score every sentence of `set`, one scorer call per passage (titles are
/// passed along as context). Output is in set order with ranks assigned.
pub fn score_sentences(
    query: &str,
    set: &SentenceSet,
    scorer: &dyn Scorer,
    batch: BatchConfig,
) -> Result<Vec<ScoredSentence>, ScoreError> {
    let mut out = Vec::with_capacity(set.len());
    for (rank, doc) in set.source_docs().iter().enumerate() {
        let sentences = set.doc_sentences(rank);
        if sentences.is_empty() {
            continue;
        }
        let candidates: Vec<Candidate> = sentences
            .iter()
            .map(|s| Candidate::new(doc.title.clone(), s.text.clone()))
            .collect();
        let v = score_batched(scorer, query, &candidates, Granularity::Sentence, batch)?;
        out.extend(sentences.iter().zip(v.scores).map(|(s, score)| ScoredSentence {
            sentence: s.clone(),
            doc_rank: rank,
            score,
            rank: 0,
        }));
    }
    assign_ranks(&mut out);
    Ok(out)
}

/// Sentences with `score >= threshold`, in input order.
pub fn filter_sentences(scored: &[ScoredSentence], threshold: f64) -> Vec<ScoredSentence> {
    scored
        .iter()
        .filter(|s| s.score >= threshold)
        .cloned()
        .collect()
}

fn filter_with(scored: &[ScoredSentence], config: &RefineConfig) -> Vec<ScoredSentence> {
    scored
        .iter()
        .filter(|s| config.keeps(s.score))
        .cloned()
        .collect()
}

fn group_by_doc<'a>(
    kept: &'a [ScoredSentence],
    original: &SentenceSet,
) -> Result<Vec<Vec<&'a ScoredSentence>>, RefineError> {
    let mut groups = vec![Vec::new(); original.source_docs().len()];
    for s in kept {
        let known = original
            .doc_rank(&s.sentence.doc_id)
            .and_then(|r| original.global_index(r, s.sentence.position).map(|i| (r, i)));
        match known {
            Some((rank, i)) if original.sentences()[i] == s.sentence => groups[rank].push(s),
            _ => {
                return Err(RefineError::UnknownSentence {
                    doc_id: s.sentence.doc_id.clone(),
                    position: s.sentence.position,
                })
            }
        }
    }
    Ok(groups)
}

/// Group kept sentences by passage (retrieval order) and restore their
/// original in-passage order.
pub fn reconstruct(
    kept: &[ScoredSentence],
    original: &SentenceSet,
    counter: &dyn TokenCounter,
) -> Result<RefinedContext, RefineError> {
    let groups = group_by_doc(kept, original)?
        .into_iter()
        .map(|mut g| {
            g.sort_by_key(|s| s.sentence.position);
            g.dedup_by_key(|s| s.sentence.position);
            g.into_iter().map(ContextSentence::from).collect()
        })
        .collect();
    assemble(original, Mode::Dslr, groups, None, counter)
}

/// Everything a refinement run needs besides the query and passages.
///
/// `refine` runs three stages, also callable one at a time: `decompose`,
/// `score` (skipped by modes that ignore scores) and `finish`.
pub struct Refiner<'a> {
    pub scorer: &'a dyn Scorer,
    pub counter: &'a dyn TokenCounter,
    pub segmenter: &'a Segmenter,
    pub batch: BatchConfig,
}

impl<'a> Refiner<'a> {
    pub fn new(scorer: &'a dyn Scorer, counter: &'a dyn TokenCounter, segmenter: &'a Segmenter) -> Self {
        Self {
            scorer,
            counter,
            segmenter,
            batch: BatchConfig::default(),
        }
    }

    pub fn with_batch(mut self, batch: BatchConfig) -> Self {
        self.batch = batch;
        self
    }

    pub fn refine(
        &self,
        query: &str,
        docs: &RetrievalResult,
        config: &RefineConfig,
    ) -> Result<RefinedContext, RefineError> {
        config.validate()?;
        let set = self.decompose(docs, config);
        let scored = self.score(query, &set, config)?;
        self.finish(docs, &set, scored.as_deref(), config)
    }

    pub fn refine_dslr(
        &self,
        query: &str,
        docs: &RetrievalResult,
        config: &RefineConfig,
    ) -> Result<RefinedContext, RefineError> {
        expect_mode(config, &[Mode::Dslr])?;
        self.refine(query, docs, config)
    }

    pub fn refine_variant(
        &self,
        query: &str,
        docs: &RetrievalResult,
        config: &RefineConfig,
    ) -> Result<RefinedContext, RefineError> {
        expect_mode(config, &[Mode::Descend, Mode::Ascend, Mode::Random, Mode::NoRerank])?;
        self.refine(query, docs, config)
    }

    pub fn refine_fixed_budget(
        &self,
        query: &str,
        docs: &RetrievalResult,
        config: &RefineConfig,
    ) -> Result<RefinedContext, RefineError> {
        expect_mode(config, &[Mode::FixedTrunc, Mode::FixedSent, Mode::FixedRand])?;
        self.refine(query, docs, config)
    }

    /// Sentences of the top `config.top_n_docs` passages.
    pub fn decompose(&self, docs: &RetrievalResult, config: &RefineConfig) -> SentenceSet {
        self.segmenter
            .decompose_set(docs.docs().take(config.top_n_docs))
    }

    /// `None` for modes that never look at scores.
    pub fn score(
        &self,
        query: &str,
        set: &SentenceSet,
        config: &RefineConfig,
    ) -> Result<Option<Vec<ScoredSentence>>, RefineError> {
        if !config.mode.needs_scorer() {
            return Ok(None);
        }
        Ok(Some(score_sentences(query, set, self.scorer, self.batch)?))
    }

    /// Select, order and render. `scored` must come from `score` on `set`.
    pub fn finish(
        &self,
        docs: &RetrievalResult,
        set: &SentenceSet,
        scored: Option<&[ScoredSentence]>,
        config: &RefineConfig,
    ) -> Result<RefinedContext, RefineError> {
        let scored = || scored.ok_or_else(|| RefineError::Config(format!("mode {} needs scores", config.mode)));
        let rng = || {
            config
                .seed
                .map(|s| SeededRng::new(derive_seed(s, &docs.query_id)))
                .ok_or_else(|| RefineError::Config(format!("mode {} requires a seed", config.mode)))
        };
        let budget = || {
            config
                .budget_tokens
                .ok_or_else(|| RefineError::Config(format!("mode {} requires a token budget", config.mode)))
        };
        match config.mode {
            Mode::Passage => self.passage(docs, set, config),
            Mode::Dslr => {
                let kept = filter_with(scored()?, config);
                let mut ctx = reconstruct(&kept, set, self.counter)?;
                ctx.threshold_used = Some(config.threshold);
                Ok(ctx)
            }
            Mode::Descend | Mode::Ascend | Mode::Random => {
                let kept = filter_with(scored()?, config);
                let mut rng = if config.mode == Mode::Random { Some(rng()?) } else { None };
                let ordered = group_by_doc(&kept, set)?
                    .into_iter()
                    .map(|mut g| {
                        match (&mut rng, config.mode) {
                            (_, Mode::Descend) => g.sort_by(|a, b| order_by_score_desc(a, b)),
                            (_, Mode::Ascend) => g.sort_by(|a, b| {
                                a.score
                                    .total_cmp(&b.score)
                                    .then(a.sentence.position.cmp(&b.sentence.position))
                            }),
                            (Some(rng), _) => {
                                g.sort_by_key(|s| s.sentence.position);
                                rng.shuffle(&mut g);
                            }
                            (None, _) => unreachable!("random mode always has a generator"),
                        }
                        g.into_iter().map(ContextSentence::from).collect()
                    })
                    .collect();
                assemble(set, config.mode, ordered, Some(config.threshold), self.counter)
            }
            Mode::NoRerank => {
                let scored = scored()?;
                let dslr = reconstruct(&filter_with(scored, config), set, self.counter)?;
                let mut ctx = self.matched_random_subset(set, scored, &dslr, &mut rng()?)?;
                ctx.threshold_used = Some(config.threshold);
                Ok(ctx)
            }
            Mode::FixedTrunc => self.truncate(set, budget()?),
            Mode::FixedSent => {
                let scored = scored()?;
                let mut order: Vec<usize> = (0..scored.len()).collect();
                order.sort_by_key(|&i| scored[i].rank);
                let chosen = self.greedy_fill(scored, &order, budget()?)?;
                self.build_in_original_order(set, scored, &chosen, Mode::FixedSent)
            }
            Mode::FixedRand => {
                let unscored = unscored_sentences(set);
                let order = rng()?.permutation(unscored.len());
                let chosen = self.greedy_fill(&unscored, &order, budget()?)?;
                let mut ctx = self.build_in_original_order(set, &unscored, &chosen, Mode::FixedRand)?;
                clear_scores(&mut ctx);
                Ok(ctx)
            }
        }
    }

    /// Whole passages, unscored.
    fn passage(
        &self,
        docs: &RetrievalResult,
        set: &SentenceSet,
        config: &RefineConfig,
    ) -> Result<RefinedContext, RefineError> {
        let top = docs.clone().truncated(config.top_n_docs);
        let per_doc: Vec<DocContext> = top
            .docs()
            .enumerate()
            .map(|(rank, d)| DocContext {
                doc_id: d.id.clone(),
                title: d.title.clone(),
                kept: set
                    .doc_sentences(rank)
                    .iter()
                    .map(|s| ContextSentence {
                        position: s.position,
                        text: s.text.clone(),
                        score: None,
                    })
                    .collect(),
            })
            .collect();
        let rendered = render_passages(&top);
        Ok(RefinedContext {
            token_count: self.counter.count(&rendered)?,
            rendered,
            kept_count: set.len(),
            dropped_count: 0,
            threshold_used: None,
            mode: Mode::Passage,
            per_doc,
        })
    }

    /// A random subset of all sentences whose body token count is the largest
    /// achievable without exceeding the refined context's, rendered in
    /// original order.
    fn matched_random_subset(
        &self,
        set: &SentenceSet,
        scored: &[ScoredSentence],
        dslr: &RefinedContext,
        rng: &mut SeededRng,
    ) -> Result<RefinedContext, RefineError> {
        let target = body_tokens(dslr, self.counter)?;
        let order = rng.permutation(scored.len());
        let weights = order
            .iter()
            .map(|&i| self.counter.count(&scored[i].sentence.text))
            .collect::<Result<Vec<_>, _>>()?;
        let picked = max_subset_sum(&weights, target);
        let mut chosen: Vec<usize> = picked.into_iter().map(|k| order[k]).collect();
        loop {
            let ctx = self.build_in_original_order(set, scored, &chosen, Mode::NoRerank)?;
            // Subword counters need not be additive over concatenation.
            if ctx.token_count <= dslr.token_count || chosen.is_empty() {
                return Ok(ctx);
            }
            chosen.pop();
        }
    }

    fn build_in_original_order(
        &self,
        set: &SentenceSet,
        scored: &[ScoredSentence],
        chosen: &[usize],
        mode: Mode,
    ) -> Result<RefinedContext, RefineError> {
        let chosen: BTreeSet<usize> = chosen.iter().copied().collect();
        let mut groups = vec![Vec::new(); set.source_docs().len()];
        for &i in &chosen {
            let s = &scored[i];
            groups[s.doc_rank].push(s);
        }
        let groups = groups
            .into_iter()
            .map(|mut g| {
                g.sort_by_key(|s| s.sentence.position);
                g.into_iter().map(ContextSentence::from).collect()
            })
            .collect();
        assemble(set, mode, groups, None, self.counter)
    }

    /// Add sentences in `order` while the running body token total stays
    /// within `budget`; stops at the first sentence that does not fit.
    fn greedy_fill(
        &self,
        scored: &[ScoredSentence],
        order: &[usize],
        budget: usize,
    ) -> Result<Vec<usize>, RefineError> {
        let mut total = 0;
        let mut chosen = Vec::new();
        for &i in order {
            let n = self.counter.count(&scored[i].sentence.text)?;
            if total + n > budget {
                break;
            }
            total += n;
            chosen.push(i);
        }
        Ok(chosen)
    }

    /// First `budget` body tokens of the unrefined passages, in order. The
    /// sentence that crosses the budget is cut at a token boundary.
    fn truncate(&self, set: &SentenceSet, budget: usize) -> Result<RefinedContext, RefineError> {
        let mut remaining = budget;
        let mut groups = Vec::with_capacity(set.source_docs().len());
        for rank in 0..set.source_docs().len() {
            let mut kept = Vec::new();
            for s in set.doc_sentences(rank) {
                if remaining == 0 {
                    break;
                }
                let n = self.counter.count(&s.text)?;
                let text = if n <= remaining {
                    remaining -= n;
                    s.text.clone()
                } else {
                    let cut = s.text[..prefix_end(&s.text, remaining)].to_string();
                    remaining = 0;
                    cut
                };
                kept.push(ContextSentence {
                    position: s.position,
                    text,
                    score: None,
                });
            }
            groups.push(kept);
        }
        assemble(set, Mode::FixedTrunc, groups, None, self.counter)
    }

    /// Rerank whole passages with the scorer and keep the best `m`. Ties keep
    /// input order.
    pub fn rerank_passages(
        &self,
        query: &str,
        docs: &RetrievalResult,
        m: usize,
    ) -> Result<RetrievalResult, RefineError> {
        rerank_passages(query, docs, self.scorer, m, self.batch)
    }
}

fn expect_mode(config: &RefineConfig, allowed: &[Mode]) -> Result<(), RefineError> {
    if allowed.contains(&config.mode) {
        Ok(())
    } else {
        Err(RefineError::Config(format!(
            "mode {} is not handled here",
            config.mode
        )))
    }
}

pub fn rerank_passages(
    query: &str,
    docs: &RetrievalResult,
    scorer: &dyn Scorer,
    m: usize,
    batch: BatchConfig,
) -> Result<RetrievalResult, RefineError> {
    if m == 0 {
        return Err(RefineError::Config("m must be at least 1".into()));
    }
    if docs.hits.is_empty() {
        return Ok(docs.clone());
    }
    let candidates: Vec<Candidate> = docs
        .docs()
        .map(|d| Candidate::new(d.title.clone(), d.text.clone()))
        .collect();
    let v = score_batched(scorer, query, &candidates, Granularity::Passage, batch)?;
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| v.scores[b].total_cmp(&v.scores[a]));
    idx.truncate(m);
    Ok(RetrievalResult {
        query_id: docs.query_id.clone(),
        hits: idx
            .into_iter()
            .map(|i| Hit {
                doc: docs.hits[i].doc.clone(),
                score: v.scores[i],
            })
            .collect(),
        n_requested: docs.n_requested,
    })
}

fn unscored_sentences(set: &SentenceSet) -> Vec<ScoredSentence> {
    set.iter_ranked()
        .enumerate()
        .map(|(i, (doc_rank, s))| ScoredSentence {
            sentence: s.clone(),
            doc_rank,
            score: 0.0,
            rank: i,
        })
        .collect()
}

fn clear_scores(ctx: &mut RefinedContext) {
    for d in &mut ctx.per_doc {
        for s in &mut d.kept {
            s.score = None;
        }
    }
}

fn body_tokens(ctx: &RefinedContext, counter: &dyn TokenCounter) -> Result<usize, RemoteError> {
    let mut n = 0;
    for d in &ctx.per_doc {
        for s in &d.kept {
            n += counter.count(&s.text)?;
        }
    }
    Ok(n)
}

/// Indices of a subset of `weights` with the largest sum not exceeding
/// `target`. Among optimal subsets, later items are left out first.
pub fn max_subset_sum(weights: &[usize], target: usize) -> Vec<usize> {
    let n = weights.len();
    let width = target + 1;
    let mut reach = vec![false; (n + 1) * width];
    reach[0] = true;
    for i in 0..n {
        let (prev, next) = reach.split_at_mut((i + 1) * width);
        let prev = &prev[i * width..];
        let next = &mut next[..width];
        for c in 0..width {
            if prev[c] {
                next[c] = true;
                let w = c + weights[i];
                if w < width {
                    next[w] = true;
                }
            }
        }
    }
    let last = &reach[n * width..];
    let mut c = (0..width).rev().find(|&c| last[c]).unwrap_or(0);
    let mut picked = Vec::new();
    for i in (0..n).rev() {
        if reach[i * width + c] {
            continue;
        }
        picked.push(i);
        c -= weights[i];
    }
    picked.reverse();
    picked
}
