//! Prompt assembly and answer generation.
//!
//! Templates live in `templates/` as UTF-8 files and are embedded verbatim;
//! their SHA-256 digests are pinned here and in `templates/SHA256SUMS` so a
//! scoring service sharing the RG template can detect drift.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::remote::{JsonClient, RemoteError, RetryPolicy};

pub const QA_TEMPLATE_SHA256: &str =
    "7f55842dea28fd83ef6de8cdd3106efb2728e8dbd9d324ce42da73b5e484f659";
pub const RG_TEMPLATE_SHA256: &str =
    "0891c845b7e1bef791e41c7b63f3df488bf92472280881dc68963d4f7a34e172";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub body: &'static str,
    pub slots: &'static [&'static str],
}

pub const QA_TEMPLATE: PromptTemplate = PromptTemplate {
    name: "qa",
    body: include_str!("../templates/qa.txt"),
    slots: &["context_str", "query_str"],
};

pub const RG_TEMPLATE: PromptTemplate = PromptTemplate {
    name: "rg",
    body: include_str!("../templates/rg.txt"),
    slots: &["title_str", "document_str", "query_str"],
};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

enum Piece<'t> {
    Literal(&'t str),
    Slot(usize),
}

impl PromptTemplate {
    pub fn checksum(&self) -> String {
        sha256_hex(self.body.as_bytes())
    }

    fn pieces(&self) -> Vec<Piece<'static>> {
        let body = self.body;
        let mut out = Vec::new();
        let mut lit_start = 0;
        let mut i = 0;
        while i < body.len() {
            let hit = self.slots.iter().position(|s| {
                let rest = &body[i..];
                rest.starts_with('{')
                    && rest[1..].starts_with(s)
                    && rest[1 + s.len()..].starts_with('}')
            });
            match hit {
                Some(k) => {
                    if lit_start < i {
                        out.push(Piece::Literal(&body[lit_start..i]));
                    }
                    out.push(Piece::Slot(k));
                    i += self.slots[k].len() + 2;
                    lit_start = i;
                }
                None => i += body[i..].chars().next().map_or(1, char::len_utf8),
            }
        }
        if lit_start < body.len() {
            out.push(Piece::Literal(&body[lit_start..]));
        }
        out
    }

    /// Occurrences of each slot's placeholder in the body.
    pub fn slot_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.slots.len()];
        for p in self.pieces() {
            if let Piece::Slot(k) = p {
                counts[k] += 1;
            }
        }
        counts
    }

    /// Single-pass substitution: `values` are parallel to `slots`, and text
    /// inserted for one slot is never scanned for placeholders again.
    pub fn render(&self, values: &[&str]) -> String {
        assert_eq!(values.len(), self.slots.len(), "one value per slot");
        let mut out = String::with_capacity(self.body.len() + values.iter().map(|v| v.len()).sum::<usize>());
        for p in self.pieces() {
            match p {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(k) => out.push_str(values[k]),
            }
        }
        out
    }

    /// Recover slot values from a rendered prompt. Ambiguous when a value
    /// contains the literal text that follows its slot.
    pub fn extract(&self, rendered: &str) -> Option<Vec<String>> {
        let pieces = self.pieces();
        let mut values = vec![None; self.slots.len()];
        let mut rest = rendered;
        let mut iter = pieces.iter().peekable();
        while let Some(p) = iter.next() {
            match p {
                Piece::Literal(s) => rest = rest.strip_prefix(s)?,
                Piece::Slot(k) => {
                    let last = iter.len() == 1;
                    let end = match iter.peek() {
                        Some(Piece::Literal(next)) if last => {
                            rest.len().checked_sub(next.len()).filter(|&e| rest[e..] == **next)?
                        }
                        Some(Piece::Literal(next)) => rest.find(next)?,
                        Some(Piece::Slot(_)) => return None,
                        None => rest.len(),
                    };
                    values[*k] = Some(rest[..end].to_string());
                    rest = &rest[end..];
                }
            }
        }
        if !rest.is_empty() {
            return None;
        }
        values.into_iter().collect()
    }
}

pub fn render_qa_prompt(context: &str, query: &str) -> String {
    QA_TEMPLATE.render(&[context, query])
}

pub fn render_rg_prompt(title: &str, document: &str, query: &str) -> String {
    RG_TEMPLATE.render(&[title, document, query])
}

/// Raw completion returned by a generator backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub query_id: String,
    pub text: String,
    pub latency_ms: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Answer {
    pub fn new(query_id: &str, generation: Generation, latency_ms: f64) -> Self {
        Self {
            query_id: query_id.to_string(),
            text: generation.text,
            latency_ms: latency_ms.max(0.0),
            prompt_tokens: generation.prompt_tokens,
            completion_tokens: generation.completion_tokens,
        }
    }
}

pub trait Generator: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, prompt: &str) -> Result<Generation, RemoteError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub endpoint: String,
    pub max_tokens: u32,
    /// Greedy decoding only.
    pub temperature: f64,
    pub timeout_ms: u64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            max_tokens: 100,
            temperature: 0.0,
            timeout_ms: 60_000,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.temperature != 0.0 {
            return Err(format!("temperature must be 0 (got {})", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be at least 1".into());
        }
        if self.endpoint.is_empty() {
            return Err("reader endpoint is required".into());
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub max_tokens: u32,
    pub temperature: f64,
}

/// `POST /generate {"prompt","max_tokens","temperature"}`.
#[derive(Debug, Clone)]
pub struct RemoteReader {
    client: JsonClient,
    max_tokens: u32,
}

impl RemoteReader {
    pub fn new(config: &ReaderConfig) -> Result<Self, String> {
        config.validate()?;
        Ok(Self {
            client: JsonClient::new(&config.endpoint, config.timeout_ms, RetryPolicy::default()),
            max_tokens: config.max_tokens,
        })
    }
}

impl Generator for RemoteReader {
    fn id(&self) -> String {
        format!("remote:{}", self.client.base())
    }

    fn generate(&self, prompt: &str) -> Result<Generation, RemoteError> {
        self.client.post(
            "/generate",
            &GenerateRequest {
                prompt,
                max_tokens: self.max_tokens,
                temperature: 0.0,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    pub answer: String,
}

/// Deterministic reader. Lookup order: exact prompt digest, then the first
/// rule whose needle occurs in the prompt, then the default answer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockReader {
    #[serde(default)]
    pub by_hash: HashMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: String,
    /// Prompts containing any of these needles fail as unavailable.
    #[serde(default)]
    pub fail_on: Vec<String>,
}

impl MockReader {
    pub fn with_hash(mut self, prompt: &str, answer: &str) -> Self {
        self.by_hash.insert(sha256_hex(prompt.as_bytes()), answer.to_string());
        self
    }

    pub fn with_rule(mut self, contains: &str, answer: &str) -> Self {
        self.rules.push(MockRule {
            contains: contains.to_string(),
            answer: answer.to_string(),
        });
        self
    }

    pub fn with_default(mut self, answer: &str) -> Self {
        self.default = answer.to_string();
        self
    }

    pub fn from_json<R: BufRead>(reader: R) -> Result<Self, String> {
        serde_json::from_reader(reader).map_err(|e| format!("mock reader table: {e}"))
    }

    pub fn answer(&self, prompt: &str) -> &str {
        self.by_hash
            .get(&sha256_hex(prompt.as_bytes()))
            .or_else(|| {
                self.rules
                    .iter()
                    .find(|r| prompt.contains(&r.contains))
                    .map(|r| &r.answer)
            })
            .unwrap_or(&self.default)
    }
}

impl Generator for MockReader {
    fn id(&self) -> String {
        "mock".into()
    }

    fn generate(&self, prompt: &str) -> Result<Generation, RemoteError> {
        if let Some(n) = self.fail_on.iter().find(|n| prompt.contains(n.as_str())) {
            return Err(RemoteError::Unavailable(format!("mock reader fails on {n:?}")));
        }
        let text = self.answer(prompt).to_string();
        Ok(Generation {
            prompt_tokens: prompt.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_match_pinned_checksums() {
        assert_eq!(QA_TEMPLATE.checksum(), QA_TEMPLATE_SHA256);
        assert_eq!(RG_TEMPLATE.checksum(), RG_TEMPLATE_SHA256);
        let sums = include_str!("../templates/SHA256SUMS");
        assert!(sums.contains(&format!("{QA_TEMPLATE_SHA256}  qa.txt")));
        assert!(sums.contains(&format!("{RG_TEMPLATE_SHA256}  rg.txt")));
    }

    #[test]
    fn every_placeholder_once() {
        assert_eq!(QA_TEMPLATE.slot_counts(), [1, 1]);
        assert_eq!(RG_TEMPLATE.slot_counts(), [1, 1, 1]);
    }

    #[test]
    fn qa_substitution() {
        let p = render_qa_prompt("C", "Q");
        assert_eq!(p, QA_TEMPLATE.body.replace("{context_str}", "C").replace("{query_str}", "Q"));
        let empty = render_qa_prompt("", "Q");
        assert!(empty.contains("---------------------\n\n---------------------"));
    }

    #[test]
    fn single_pass_substitution() {
        let p = render_qa_prompt("see {query_str} here", "real");
        assert!(p.contains("see {query_str} here"));
        assert_eq!(p.matches("real").count(), 1);
        let rg = render_rg_prompt("T", "{title_str}", "q");
        assert!(rg.contains("T\n{title_str}\n"));
    }

    #[test]
    fn extract_round_trip() {
        let p = render_rg_prompt("Nitrogen", "It is a gas.", "what is it?");
        assert_eq!(
            RG_TEMPLATE.extract(&p).unwrap(),
            ["Nitrogen", "It is a gas.", "what is it?"]
        );
        assert_eq!(QA_TEMPLATE.extract(&render_qa_prompt("", "")).unwrap(), ["", ""]);
        assert!(QA_TEMPLATE.extract("nonsense").is_none());
    }

    #[test]
    fn mock_lookup_order() {
        let prompt = render_qa_prompt("3% nitrogen by mass", "q");
        let m = MockReader::default()
            .with_rule("nitrogen", "Nitrogen")
            .with_default("unknown");
        assert_eq!(m.generate(&prompt).unwrap().text, "Nitrogen");
        let m = m.with_hash(&prompt, "Oxygen");
        assert_eq!(m.generate(&prompt).unwrap().text, "Oxygen");
        assert_eq!(m.generate("other").unwrap().text, "unknown");
    }

    #[test]
    fn mock_from_json() {
        let json = r#"{"rules":[{"contains":"a","answer":"A"}],"default":"-","fail_on":["boom"]}"#;
        let m = MockReader::from_json(json.as_bytes()).unwrap();
        assert_eq!(m.answer("xa"), "A");
        assert!(m.generate("boom").is_err());
    }

    #[test]
    fn reader_config_pins_greedy() {
        let mut c = ReaderConfig { endpoint: "http://x".into(), ..Default::default() };
        assert!(c.validate().is_ok());
        c.temperature = 0.7;
        assert!(c.validate().is_err());
    }
}
