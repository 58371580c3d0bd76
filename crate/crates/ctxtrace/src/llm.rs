//! Wire-protocol client for OpenAI-compatible inference servers.
//!
//! Two operations: score a fixed output's per-token log-probabilities via
//! the echoed-prompt completions route, and generate a completion with
//! greedy decoding. A semaphore caps in-flight requests; transient failures
//! retry with exponential backoff.

use serde::{Deserialize, Serialize};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::value::{BackendSample, ScoreSpace, SubsetKey, ValueBackend};

pub mod stub;

/// Connection settings for one inference server.
#[derive(Clone)]
pub struct BackendConfig {
    /// Absolute base URL, e.g. `http://127.0.0.1:8000`.
    pub base_url: String,
    /// Bearer token; resolved from an environment variable by the CLI and
    /// never logged.
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Retries after the first attempt for transient failures.
    pub max_retries: u32,
    /// Maximum simultaneous in-flight requests.
    pub request_parallelism: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            base_url: "http://127.0.0.1:8000".into(),
            api_key: None,
            model: "default".into(),
            timeout: Duration::from_secs(60),
            max_retries: 2,
            request_parallelism: 4,
        }
    }
}

impl std::fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("request_parallelism", &self.request_parallelism)
            .finish()
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_url.starts_with("http://") && !self.base_url.starts_with("https://") {
            return Err(Error::InvalidConfig(format!(
                "base url must be absolute: {:?}",
                self.base_url
            )));
        }
        if self.request_parallelism == 0 {
            return Err(Error::InvalidConfig(
                "request parallelism must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-token log-probabilities of a fixed output string.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredOutput {
    /// `(token_text, logprob)` covering exactly the tokens of the output.
    pub token_logprobs: Vec<(String, f64)>,
    /// Sum of the logprobs.
    pub total: f64,
}

/// Assemble the scoring/generation prompt: instruction preamble, selected
/// texts joined by blank lines in original order, query, answer cue.
pub fn assemble_prompt(instruction: &str, texts: &[&str]) -> String {
    format!(
        "You are a helpful assistant, below is a query from a user and some relevant contexts. \
Answer the question given the information in those contexts. Your answer should be short and \
concise and must come from contexts.\n\nContexts: {}\nQuery: {}\nAnswer: ",
        texts.join("\n\n"),
        instruction
    )
}

// -- wire types -------------------------------------------------------------

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    echo: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<LogProbs>,
}

#[derive(Deserialize)]
struct LogProbs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    total_tokens: u64,
}

// -- client -----------------------------------------------------------------

/// Blocking HTTP client, shareable across threads. A counting semaphore
/// enforces `request_parallelism`.
pub struct LlmClient {
    cfg: BackendConfig,
    http: reqwest::blocking::Client,
    permits: Semaphore,
}

impl LlmClient {
    pub fn new(cfg: BackendConfig) -> Result<Arc<Self>> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        let permits = Semaphore::new(cfg.request_parallelism);
        Ok(Arc::new(LlmClient { cfg, http, permits }))
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    /// Per-token log-probabilities of `output` conditioned on `prompt`,
    /// via the echoed-logprobs completions form.
    pub fn score_output(&self, prompt: &str, output: &str) -> Result<ScoredOutput> {
        Ok(self.score_output_with_usage(prompt, output)?.0)
    }

    /// As [`Self::score_output`], also returning the server-reported token
    /// usage (0 when the server omits it).
    pub fn score_output_with_usage(&self, prompt: &str, output: &str) -> Result<(ScoredOutput, u64)> {
        if output.is_empty() {
            return Ok((
                ScoredOutput {
                    token_logprobs: Vec::new(),
                    total: 0.0,
                },
                0,
            ));
        }
        let full_text = format!("{prompt}{output}");
        let request = CompletionRequest {
            model: &self.cfg.model,
            prompt: &full_text,
            max_tokens: 0,
            temperature: 0.0,
            echo: true,
            logprobs: Some(0),
        };
        let response = self.post_with_retry(&request)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::ProtocolError("response has no choices".into()))?;
        let lp = choice.logprobs.ok_or_else(|| {
            Error::ProtocolError("server returned no logprobs for the echoed prompt".into())
        })?;
        if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
            return Err(Error::ProtocolError(
                "logprob arrays have mismatched lengths".into(),
            ));
        }
        let cutoff = prompt.len();
        let mut token_logprobs = Vec::new();
        for ((token, logprob), offset) in lp
            .tokens
            .into_iter()
            .zip(lp.token_logprobs)
            .zip(lp.text_offset)
        {
            if offset < cutoff {
                continue;
            }
            let logprob = logprob.ok_or_else(|| {
                Error::ProtocolError(format!("missing logprob for output token {token:?}"))
            })?;
            token_logprobs.push((token, logprob));
        }
        let total = token_logprobs.iter().map(|(_, l)| l).sum();
        let usage = response.usage.map(|u| u.total_tokens).unwrap_or(0);
        Ok((ScoredOutput { token_logprobs, total }, usage))
    }

    /// Greedy-decoded completion for `prompt`. `max_tokens = 0` returns an
    /// empty string without a request.
    pub fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String> {
        Ok(self.generate_with_usage(prompt, max_tokens)?.0)
    }

    pub fn generate_with_usage(&self, prompt: &str, max_tokens: usize) -> Result<(String, u64)> {
        if max_tokens == 0 {
            return Ok((String::new(), 0));
        }
        let request = CompletionRequest {
            model: &self.cfg.model,
            prompt,
            max_tokens,
            temperature: 0.0,
            echo: false,
            logprobs: None,
        };
        let response = self.post_with_retry(&request)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::ProtocolError("response has no choices".into()))?;
        let usage = response.usage.map(|u| u.total_tokens).unwrap_or(0);
        Ok((choice.text, usage))
    }

    fn post_with_retry(&self, request: &CompletionRequest<'_>) -> Result<CompletionResponse> {
        let url = format!("{}/v1/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut last_err: Option<Error> = None;
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50u64 << (attempt - 1).min(6)));
            }
            let _permit = self.permits.acquire();
            let mut builder = self.http.post(&url).json(request);
            if let Some(key) = &self.cfg.api_key {
                builder = builder.bearer_auth(key);
            }
            match builder.send() {
                Err(e) if e.is_timeout() => {
                    last_err = Some(Error::Timeout(url.clone()));
                }
                Err(e) => {
                    last_err = Some(Error::BackendUnavailable(e.to_string()));
                }
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<CompletionResponse>()
                            .map_err(|e| Error::ProtocolError(e.to_string()));
                    }
                    let body = resp.text().unwrap_or_default();
                    let err = Error::HttpError {
                        status: status.as_u16(),
                        body: body.chars().take(200).collect(),
                    };
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(err);
                    }
                    last_err = Some(err);
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::BackendUnavailable("no attempts made".into())))
    }
}

// -- value backends over the client -----------------------------------------

/// v(U) = log-probability of the output conditioned on the instruction and
/// the subset's texts, queried from the server.
pub struct LogProbBackend {
    pub client: Arc<LlmClient>,
    pub instruction: String,
    pub texts: Vec<String>,
    pub output: String,
    pub space: ScoreSpace,
}

impl ValueBackend for LogProbBackend {
    fn evaluate(&self, subset: &SubsetKey) -> Result<BackendSample> {
        let selected: Vec<&str> = subset
            .indices()
            .iter()
            .map(|&i| self.texts[i].as_str())
            .collect();
        let prompt = assemble_prompt(&self.instruction, &selected);
        let (scored, usage) = self
            .client
            .score_output_with_usage(&prompt, &self.output)
            .map_err(|e| match e {
                // a server that cannot echo logprobs cannot score outputs
                Error::ProtocolError(m) if m.contains("no logprobs") => {
                    Error::OutputNotScoreable(m)
                }
                other => other,
            })?;
        let value = match self.space {
            ScoreSpace::LogProbSum => scored.total,
            ScoreSpace::PerTokenMean => {
                if scored.token_logprobs.is_empty() {
                    0.0
                } else {
                    scored.total / scored.token_logprobs.len() as f64
                }
            }
        };
        let tokens = if usage > 0 {
            usage
        } else {
            scored.token_logprobs.len() as u64
        };
        Ok(BackendSample { value, tokens })
    }

    fn descriptor(&self) -> String {
        format!(
            "api:logprob:{}:{:?}",
            self.client.config().model,
            self.space
        )
    }
}

/// Black-box v(U): regenerate on the subset's texts and score BLEU-4
/// against the original output. Stays in [0, 1].
pub struct BleuBackend {
    pub client: Arc<LlmClient>,
    pub instruction: String,
    pub texts: Vec<String>,
    pub output: String,
    pub max_tokens: usize,
}

impl ValueBackend for BleuBackend {
    fn evaluate(&self, subset: &SubsetKey) -> Result<BackendSample> {
        let selected: Vec<&str> = subset
            .indices()
            .iter()
            .map(|&i| self.texts[i].as_str())
            .collect();
        let prompt = assemble_prompt(&self.instruction, &selected);
        let (candidate, usage) = self.client.generate_with_usage(&prompt, self.max_tokens)?;
        Ok(BackendSample {
            value: crate::value::bleu4(&candidate, &self.output),
            tokens: usage,
        })
    }

    fn descriptor(&self) -> String {
        format!("api:bleu:{}", self.client.config().model)
    }
}

/// Regeneration hook for the iterative re-run procedure.
pub struct LlmOutputGenerator {
    pub client: Arc<LlmClient>,
    pub instruction: String,
    pub texts: Vec<String>,
    pub max_tokens: usize,
}

impl crate::search::OutputGenerator for LlmOutputGenerator {
    fn generate_with(&self, included: &[usize]) -> Result<String> {
        let mut sorted: Vec<usize> = included.to_vec();
        sorted.sort_unstable();
        let selected: Vec<&str> = sorted.iter().map(|&i| self.texts[i].as_str()).collect();
        let prompt = assemble_prompt(&self.instruction, &selected);
        self.client.generate(&prompt, self.max_tokens)
    }
}

// -- semaphore ---------------------------------------------------------------

struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(count: usize) -> Self {
        Semaphore {
            permits: Mutex::new(count),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.available.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_assembly_layout() {
        let prompt = assemble_prompt("Who?", &["first text", "second text"]);
        assert!(prompt.contains("Contexts: first text\n\nsecond text\n"));
        assert!(prompt.contains("Query: Who?\n"));
        assert!(prompt.ends_with("Answer: "));
    }

    #[test]
    fn empty_subset_prompt_has_empty_context() {
        let prompt = assemble_prompt("Who?", &[]);
        assert!(prompt.contains("Contexts: \nQuery: Who?"));
    }

    #[test]
    fn config_rejects_relative_url_and_zero_parallelism() {
        let mut cfg = BackendConfig {
            base_url: "localhost:8000".into(),
            ..BackendConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.base_url = "http://localhost:8000".into();
        cfg.request_parallelism = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn api_key_not_in_debug_output() {
        let cfg = BackendConfig {
            api_key: Some("sk-secret-value".into()),
            ..BackendConfig::default()
        };
        let debug = format!("{cfg:?}");
        assert!(!debug.contains("sk-secret-value"));
    }

    #[test]
    fn empty_output_scores_zero_without_request() {
        // base_url points nowhere: proof that no request is issued
        let client = LlmClient::new(BackendConfig {
            base_url: "http://127.0.0.1:1".into(),
            ..BackendConfig::default()
        })
        .unwrap();
        let scored = client.score_output("prompt", "").unwrap();
        assert!(scored.token_logprobs.is_empty());
        assert_eq!(scored.total, 0.0);
    }

    #[test]
    fn zero_token_generation_is_empty_without_request() {
        let client = LlmClient::new(BackendConfig {
            base_url: "http://127.0.0.1:1".into(),
            ..BackendConfig::default()
        })
        .unwrap();
        assert_eq!(client.generate("prompt", 0).unwrap(), "");
    }
}
