use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GenerationRequest, LanguageModel, TokenDistribution, FLOOR_LOGPROB};
use crate::corpus::Token;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    /// Attempts after the first one.
    pub retries: usize,
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    /// Needed to expand `/logprobs` answers into full distributions.
    pub vocab_size: Option<usize>,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            timeout_ms: 30_000,
            retries: 2,
            retry_backoff_ms: 100,
            max_in_flight: 4,
            vocab_size: None,
        }
    }
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    max_tokens: usize,
    stop: &'a [String],
    temperature: f64,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

#[derive(Serialize)]
struct LogprobsBody<'a> {
    context_ids: &'a [Token],
}

#[derive(Deserialize)]
struct LogprobsReply {
    logprobs: HashMap<String, f64>,
}

struct Semaphore {
    free: Mutex<usize>,
    cond: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore");
        while *free == 0 {
            free = self.cond.wait(free).expect("semaphore");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore") += 1;
        self.0.cond.notify_one();
    }
}

/// HTTP adapter for a hosted model.
///
/// `POST /generate` serves free-form generation. `POST /logprobs` is
/// optional; a 404 there means the endpoint cannot be used for constrained
/// decoding.
pub struct RemoteModel {
    config: RemoteConfig,
    agent: ureq::Agent,
    gate: Semaphore,
}

enum Failure {
    Retryable(Error),
    Fatal(Error),
}

impl RemoteModel {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Semaphore {
            free: Mutex::new(config.max_in_flight.max(1)),
            cond: Condvar::new(),
        };
        RemoteModel { config, agent, gate }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, route: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), route)
    }

    fn post_once<B: Serialize, R: serde::de::DeserializeOwned>(
        &self,
        route: &str,
        body: &B,
    ) -> std::result::Result<R, Failure> {
        let url = self.url(route);
        let _permit = self.gate.acquire();
        let mut resp = match self.agent.post(&url).send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Err(Failure::Retryable(Error::Timeout(format!("{url}: {t}")))),
            Err(e) => return Err(Failure::Retryable(Error::RemoteUnavailable(format!("{url}: {e}")))),
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .body_mut()
                .read_json::<R>()
                .map_err(|e| Failure::Fatal(Error::ModelFailure(format!("{url}: bad reply: {e}")))),
            404 if route == "/logprobs" => Err(Failure::Fatal(Error::NotSupported(format!(
                "remote endpoint {} has no /logprobs",
                self.config.base_url
            )))),
            500..=599 | 429 => Err(Failure::Retryable(Error::RemoteUnavailable(format!(
                "{url}: HTTP {status}"
            )))),
            _ => Err(Failure::Fatal(Error::ModelFailure(format!("{url}: HTTP {status}")))),
        }
    }

    fn post<B: Serialize, R: serde::de::DeserializeOwned>(&self, route: &str, body: &B) -> Result<R> {
        let mut last = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.retry_backoff_ms * attempt as u64));
            }
            match self.post_once(route, body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::RemoteUnavailable(self.config.base_url.clone())))
    }
}

impl LanguageModel for RemoteModel {
    fn name(&self) -> &str {
        &self.config.base_url
    }

    fn supports_distributions(&self) -> bool {
        self.config.vocab_size.is_some()
    }

    fn next_token_distribution(&self, ctx: &[Token]) -> Result<TokenDistribution> {
        let vocab_size = self
            .config
            .vocab_size
            .ok_or_else(|| Error::NotSupported(format!("{} (no vocabulary size configured)", self.config.base_url)))?;
        let reply: LogprobsReply = self.post("/logprobs", &LogprobsBody { context_ids: ctx })?;
        let mut logits = vec![f64::NEG_INFINITY; vocab_size];
        for (id, lp) in reply.logprobs {
            let id: usize = id
                .parse()
                .map_err(|_| Error::ModelFailure(format!("non-numeric token id {id:?}")))?;
            if id >= vocab_size {
                return Err(Error::UnknownToken(id as Token));
            }
            logits[id] = if lp.is_finite() { lp } else { FLOOR_LOGPROB };
        }
        Ok(TokenDistribution::from_logits(&logits))
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        req.validate()?;
        let reply: GenerateReply = self.post(
            "/generate",
            &GenerateBody {
                prompt: &req.prompt,
                max_tokens: req.max_tokens,
                stop: &req.stop,
                temperature: req.temperature,
            },
        )?;
        Ok(reply.text)
    }
}
