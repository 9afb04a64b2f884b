//! Blocking JSON-over-HTTP client shared by the remote scorer, reader and
//! tokenizer backends.

use std::error::Error as _;
use std::io;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RemoteError {
    #[error("remote service unavailable: {0}")]
    Unavailable(String),
    #[error("remote call timed out after {0} ms")]
    Timeout(u64),
    #[error("malformed remote response: {0}")]
    Malformed(String),
    #[error("remote rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            initial_backoff_ms: 50,
        }
    }
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    base: String,
    timeout_ms: u64,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(base: &str, timeout_ms: u64, retry: RetryPolicy) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(timeout_ms))
            .build();
        Self {
            agent,
            base: base.trim_end_matches('/').to_string(),
            timeout_ms,
            retry,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// POST `body` to `path`. Connection failures and 5xx responses are
    /// retried with exponential backoff; timeouts and 4xx are not.
    pub fn post<Req, Resp>(&self, path: &str, body: &Req) -> Result<Resp, RemoteError>
    where
        Req: Serialize,
        Resp: DeserializeOwned,
    {
        let url = format!("{}{}", self.base, path);
        let mut backoff = self.retry.initial_backoff_ms;
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body) {
                Err(RemoteError::Unavailable(_)) if attempt < self.retry.retries => {
                    thread::sleep(Duration::from_millis(backoff));
                    backoff *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once<Req, Resp>(&self, url: &str, body: &Req) -> Result<Resp, RemoteError>
    where
        Req: Serialize,
        Resp: DeserializeOwned,
    {
        match self.agent.post(url).send_json(body) {
            Ok(resp) => resp.into_json::<Resp>().map_err(|e| {
                if e.kind() == io::ErrorKind::TimedOut {
                    RemoteError::Timeout(self.timeout_ms)
                } else {
                    RemoteError::Malformed(e.to_string())
                }
            }),
            Err(ureq::Error::Status(status, resp)) => {
                let message = resp
                    .into_string()
                    .ok()
                    .and_then(|s| {
                        serde_json::from_str::<ErrorBody>(&s)
                            .map(|b| b.error)
                            .ok()
                            .or(Some(s))
                    })
                    .unwrap_or_default();
                if status >= 500 {
                    Err(RemoteError::Unavailable(format!("status {status}: {message}")))
                } else {
                    Err(RemoteError::Rejected { status, message })
                }
            }
            Err(ureq::Error::Transport(t)) => {
                if is_timeout(&t) {
                    Err(RemoteError::Timeout(self.timeout_ms))
                } else {
                    Err(RemoteError::Unavailable(t.to_string()))
                }
            }
        }
    }
}

fn is_timeout(t: &ureq::Transport) -> bool {
    let mut source = t.source();
    while let Some(err) = source {
        if let Some(io) = err.downcast_ref::<io::Error>() {
            if matches!(io.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = err.source();
    }
    false
}
