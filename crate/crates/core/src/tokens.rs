//! Context token accounting.

use serde::{Deserialize, Serialize};

use crate::remote::{JsonClient, RemoteError, RetryPolicy};

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> Result<usize, RemoteError>;
}

/// Counts whitespace-separated tokens. Additive over single-space joins.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl TokenCounter for WhitespaceTokenizer {
    fn count(&self, text: &str) -> Result<usize, RemoteError> {
        Ok(text.split_whitespace().count())
    }
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    count: i64,
}

/// `POST /tokenize {"text"} -> {"count"}` for subword-level counts.
#[derive(Debug, Clone)]
pub struct RemoteTokenizer {
    client: JsonClient,
}

impl RemoteTokenizer {
    pub fn new(endpoint: &str, timeout_ms: u64) -> Self {
        Self {
            client: JsonClient::new(endpoint, timeout_ms, RetryPolicy::default()),
        }
    }
}

impl TokenCounter for RemoteTokenizer {
    fn count(&self, text: &str) -> Result<usize, RemoteError> {
        let resp: TokenizeResponse = self.client.post("/tokenize", &TokenizeRequest { text })?;
        usize::try_from(resp.count)
            .map_err(|_| RemoteError::Malformed(format!("negative token count {}", resp.count)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerConfig {
    #[default]
    Whitespace,
    Remote { endpoint: String, timeout_ms: u64 },
}

impl TokenizerConfig {
    pub fn build(&self) -> Box<dyn TokenCounter> {
        match self {
            TokenizerConfig::Whitespace => Box::new(WhitespaceTokenizer),
            TokenizerConfig::Remote {
                endpoint,
                timeout_ms,
            } => Box::new(RemoteTokenizer::new(endpoint, *timeout_ms)),
        }
    }
}

pub fn count_tokens(text: &str, config: &TokenizerConfig) -> Result<usize, RemoteError> {
    config.build().count(text)
}

/// Byte offset just past the `n`-th whitespace token of `text` (0 when `n`
/// is 0, `text.len()` when `text` has fewer tokens).
pub fn prefix_end(text: &str, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                seen += 1;
                if seen == n {
                    return i;
                }
            }
            in_token = false;
        } else {
            in_token = true;
        }
    }
    text.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_counts() {
        let t = WhitespaceTokenizer;
        assert_eq!(t.count("a b  c").unwrap(), 3);
        assert_eq!(t.count("").unwrap(), 0);
        assert_eq!(t.count(" \n\t").unwrap(), 0);
        assert_eq!(count_tokens("[1] Title\nbody", &TokenizerConfig::Whitespace).unwrap(), 3);
    }

    #[test]
    fn prefix_end_keeps_original_bytes() {
        let s = "one  two\nthree four";
        assert_eq!(&s[..prefix_end(s, 0)], "");
        assert_eq!(&s[..prefix_end(s, 1)], "one");
        assert_eq!(&s[..prefix_end(s, 3)], "one  two\nthree");
        assert_eq!(&s[..prefix_end(s, 4)], s);
        assert_eq!(&s[..prefix_end(s, 9)], s);
    }
}
