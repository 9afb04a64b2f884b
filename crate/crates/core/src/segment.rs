//! Rule-based sentence decomposition.
//!
//! A boundary is placed after a run of `.`, `?` or `!` (optionally followed
//! by closing quotes or brackets) when the next character is whitespace and
//! the first non-whitespace character after it is an uppercase letter, an
//! opening quote or a digit. A period does not end a sentence when the word
//! it terminates is a known abbreviation or a run of single-letter initials
//! (`A.`, `J.R.R.`). Boundaries never fall strictly inside a balanced pair of
//! brackets or double quotes.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PassageDoc;

pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "Dr.", "Mr.", "Mrs.", "Ms.", "Prof.", "Sr.", "Jr.", "St.", "Mt.", "Ft.", "Gen.", "Col.",
    "Lt.", "Sgt.", "Capt.", "Gov.", "Sen.", "Rep.", "Rev.", "Hon.", "vs.", "etc.", "e.g.",
    "i.e.", "cf.", "al.", "approx.", "ca.", "U.S.", "U.K.", "U.N.", "Inc.", "Ltd.", "Co.",
    "Corp.", "Bros.", "Jan.", "Feb.", "Apr.", "Aug.", "Sept.", "Oct.", "Nov.", "Dec.",
];

const TERMINATORS: [char; 3] = ['.', '?', '!'];
const CLOSERS: [char; 6] = ['"', '\'', '\u{201D}', '\u{2019}', ')', ']'];
const OPENING_QUOTES: [char; 4] = ['"', '\'', '\u{201C}', '\u{2018}'];
const LEADING_PUNCT: [char; 6] = ['(', '[', '"', '\'', '\u{201C}', '\u{2018}'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub doc_id: String,
    /// 0-based index within the passage.
    pub position: usize,
    pub text: String,
    /// Byte offsets `[start, end)` into the passage text.
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDoc {
    pub id: String,
    pub title: String,
}

/// Sentences of several passages, ordered by (retrieval rank, position).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SentenceSet {
    sentences: Vec<Sentence>,
    source_docs: Vec<SourceDoc>,
    ranges: Vec<Range<usize>>,
}

impl SentenceSet {
    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn source_docs(&self) -> &[SourceDoc] {
        &self.source_docs
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Sentences of the document at retrieval rank `rank` (0-based).
    pub fn doc_sentences(&self, rank: usize) -> &[Sentence] {
        &self.sentences[self.ranges[rank].clone()]
    }

    /// `(doc rank, sentence)` pairs in set order.
    pub fn iter_ranked(&self) -> impl Iterator<Item = (usize, &Sentence)> {
        self.ranges
            .iter()
            .enumerate()
            .flat_map(move |(rank, r)| self.sentences[r.clone()].iter().map(move |s| (rank, s)))
    }

    pub fn doc_rank(&self, doc_id: &str) -> Option<usize> {
        self.source_docs.iter().position(|d| d.id == doc_id)
    }

    /// Global index of `(doc rank, position)` in [`Self::sentences`].
    pub fn global_index(&self, rank: usize, position: usize) -> Option<usize> {
        let r = self.ranges.get(rank)?;
        let idx = r.start + position;
        (idx < r.end).then_some(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmenter {
    abbreviations: HashSet<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Self::with_abbreviations(DEFAULT_ABBREVIATIONS.iter().map(|s| s.to_string()))
    }
}

impl Segmenter {
    pub fn with_abbreviations<I: IntoIterator<Item = String>>(abbrevs: I) -> Self {
        Self {
            abbreviations: abbrevs.into_iter().collect(),
        }
    }

    /// Parse an abbreviation list: one entry per line (e.g. `Dr.`), blank
    /// lines and `#` comments ignored.
    pub fn parse_abbreviations(contents: &str) -> Self {
        Self::with_abbreviations(
            contents
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from),
        )
    }

    pub fn from_abbreviation_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse_abbreviations(&std::fs::read_to_string(path)?))
    }

    pub fn decompose(&self, doc: &PassageDoc) -> Vec<Sentence> {
        let text = doc.text.as_str();
        let mut out = Vec::new();
        let mut start = 0;
        let mut cuts = self.boundaries(text);
        cuts.push(text.len());
        for end in cuts {
            let piece = &text[start..end];
            let trimmed = piece.trim();
            if !trimmed.is_empty() {
                let lead = piece.len() - piece.trim_start().len();
                let s = start + lead;
                out.push(Sentence {
                    doc_id: doc.id.clone(),
                    position: out.len(),
                    text: trimmed.to_string(),
                    char_span: (s, s + trimmed.len()),
                });
            }
            start = end;
        }
        out
    }

    pub fn decompose_set<'a, I>(&self, docs: I) -> SentenceSet
    where
        I: IntoIterator<Item = &'a PassageDoc>,
    {
        let mut set = SentenceSet::default();
        for doc in docs {
            let start = set.sentences.len();
            set.sentences.extend(self.decompose(doc));
            set.ranges.push(start..set.sentences.len());
            set.source_docs.push(SourceDoc {
                id: doc.id.clone(),
                title: doc.title.clone(),
            });
        }
        set
    }

    /// Byte offsets at which a sentence ends (exclusive), in ascending order.
    fn boundaries(&self, text: &str) -> Vec<usize> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let protected = protected_regions(&chars);
        let mut cuts = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let (_, c) = chars[i];
            if !TERMINATORS.contains(&c) {
                i += 1;
                continue;
            }
            let first = i;
            let mut j = i;
            while j + 1 < chars.len() && TERMINATORS.contains(&chars[j + 1].1) {
                j += 1;
            }
            while j + 1 < chars.len() && CLOSERS.contains(&chars[j + 1].1) {
                j += 1;
            }
            let last = j;
            i = last + 1;

            let Some(&(_, after)) = chars.get(last + 1) else {
                continue;
            };
            if !after.is_whitespace() {
                continue;
            }
            let next = chars[last + 1..].iter().find(|(_, c)| !c.is_whitespace());
            let Some(&(_, next)) = next else {
                continue;
            };
            if !(next.is_uppercase() || next.is_ascii_digit() || OPENING_QUOTES.contains(&next)) {
                continue;
            }
            let single_period = c == '.' && (first == last || !TERMINATORS.contains(&chars[first + 1].1));
            if single_period && self.is_abbreviation(text, chars[first].0) {
                continue;
            }
            if protected.iter().any(|&(open, close)| open < last && last < close) {
                continue;
            }
            cuts.push(chars[last].0 + chars[last].1.len_utf8());
        }
        cuts
    }

    /// Whether the word ending with the period at byte `period` is an abbreviation.
    fn is_abbreviation(&self, text: &str, period: usize) -> bool {
        let before = &text[..period];
        let word_start = before
            .rfind(char::is_whitespace)
            .map(|p| p + before[p..].chars().next().map_or(1, char::len_utf8))
            .unwrap_or(0);
        let word = text[word_start..=period].trim_start_matches(LEADING_PUNCT);
        if self.abbreviations.contains(word) {
            return true;
        }
        is_initials(word)
    }
}

/// `A.`, `J.R.R.`: single letters each followed by a period.
fn is_initials(word: &str) -> bool {
    let mut chars = word.chars();
    let mut groups = 0;
    loop {
        match (chars.next(), chars.next()) {
            (None, _) => return groups > 0,
            (Some(l), Some('.')) if l.is_alphabetic() => groups += 1,
            _ => return false,
        }
    }
}

/// Index pairs (into `chars`) of balanced brackets and double quotes.
fn protected_regions(chars: &[(usize, char)]) -> Vec<(usize, usize)> {
    let mut regions = Vec::new();
    let mut stack: Vec<(usize, char)> = Vec::new();
    let mut straight_open: Option<usize> = None;
    for (i, &(_, c)) in chars.iter().enumerate() {
        match c {
            '(' | '[' | '\u{201C}' => stack.push((i, c)),
            ')' | ']' | '\u{201D}' => {
                let want = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '\u{201C}',
                };
                if let Some(pos) = stack.iter().rposition(|&(_, o)| o == want) {
                    regions.push((stack[pos].0, i));
                    stack.truncate(pos);
                }
            }
            '"' => match straight_open.take() {
                Some(open) => regions.push((open, i)),
                None => straight_open = Some(i),
            },
            _ => {}
        }
    }
    regions
}

/// Decompose with the default rule set.
pub fn decompose(doc: &PassageDoc) -> Vec<Sentence> {
    Segmenter::default().decompose(doc)
}

pub fn decompose_set<'a, I>(docs: I) -> SentenceSet
where
    I: IntoIterator<Item = &'a PassageDoc>,
{
    Segmenter::default().decompose_set(docs)
}
