//! Deterministic OpenAI-compatible stub server.
//!
//! Serves `/v1/completions` over plain HTTP on a loopback port. Scoring
//! requests (echo + logprobs) get lexical log-probabilities: a token scores
//! high when its normalized form already appeared earlier in the text, low
//! otherwise. Texts that contain the output's words therefore raise the
//! output's score, which is enough to drive end-to-end traceback runs with
//! no model. Generation requests return canned completions selected by
//! prompt substring.
//!
//! The server records request counts and the maximum number of in-flight
//! requests, so tests can observe client-side parallelism limits.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};

/// Logprob for a token whose normalized form appeared earlier in the text.
pub const LOGPROB_KNOWN: f64 = -0.05;
/// Logprob for a token not seen before.
pub const LOGPROB_NOVEL: f64 = -8.0;

/// Behavior knobs for one stub instance.
#[derive(Debug, Clone)]
pub struct StubBehavior {
    /// Omit the logprobs object, like servers without echo support.
    pub support_logprobs: bool,
    /// Respond 500 to this many requests before recovering.
    pub fail_first: u32,
    /// Artificial processing delay per request.
    pub delay: Duration,
    /// `(prompt substring, completion)` pairs; first match wins.
    pub canned: Vec<(String, String)>,
    /// Completion when no canned entry matches.
    pub default_completion: String,
}

impl Default for StubBehavior {
    fn default() -> Self {
        StubBehavior {
            support_logprobs: true,
            fail_first: 0,
            delay: Duration::ZERO,
            canned: Vec::new(),
            default_completion: "stub completion".into(),
        }
    }
}

struct StubState {
    behavior: StubBehavior,
    shutdown: AtomicBool,
    requests: AtomicU64,
    in_flight: AtomicU64,
    max_in_flight: AtomicU64,
    failures_left: AtomicI64,
}

/// A running stub server; shuts down on drop.
pub struct StubServer {
    addr: SocketAddr,
    state: Arc<StubState>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn spawn(behavior: StubBehavior) -> Result<StubServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(StubState {
            failures_left: AtomicI64::new(behavior.fail_first as i64),
            behavior,
            shutdown: AtomicBool::new(false),
            requests: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            max_in_flight: AtomicU64::new(0),
        });
        let accept_state = Arc::clone(&state);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_state.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn_state = Arc::clone(&accept_state);
                std::thread::spawn(move || {
                    let _ = handle_connection(stream, &conn_state);
                });
            }
        });
        Ok(StubServer {
            addr,
            state,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Total requests handled (including failed ones).
    pub fn request_count(&self) -> u64 {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// High-water mark of simultaneous in-flight requests.
    pub fn max_in_flight(&self) -> u64 {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.state.shutdown.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

#[derive(Deserialize)]
struct StubRequest {
    #[serde(default)]
    model: String,
    #[serde(default)]
    prompt: String,
    #[serde(default)]
    max_tokens: usize,
    #[serde(default)]
    echo: bool,
    #[serde(default)]
    logprobs: Option<u32>,
}

fn handle_connection(mut stream: TcpStream, state: &StubState) -> std::io::Result<()> {
    let (path, body) = read_request(&mut stream)?;
    state.requests.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    std::thread::sleep(state.behavior.delay);
    let result = respond(&path, &body, state);
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    let (status, payload) = result;
    write_response(&mut stream, status, &payload)
}

fn respond(path: &str, body: &str, state: &StubState) -> (u16, String) {
    if state.failures_left.fetch_sub(1, Ordering::SeqCst) > 0 {
        return (500, json!({"error": "injected failure"}).to_string());
    }
    if path != "/v1/completions" {
        return (404, json!({"error": "unknown route"}).to_string());
    }
    let request: StubRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return (400, json!({"error": e.to_string()}).to_string()),
    };
    let behavior = &state.behavior;
    if request.echo && request.max_tokens == 0 {
        // scoring: echo the prompt with lexical logprobs
        let prompt_tokens = lexical_tokens(&request.prompt);
        let mut choice = json!({
            "index": 0,
            "text": request.prompt,
            "finish_reason": "length",
        });
        if behavior.support_logprobs && request.logprobs.is_some() {
            let tokens: Vec<&str> = prompt_tokens.iter().map(|t| t.text).collect();
            let offsets: Vec<usize> = prompt_tokens.iter().map(|t| t.offset).collect();
            let logprobs: Vec<Option<f64>> = prompt_tokens
                .iter()
                .enumerate()
                .map(|(i, t)| if i == 0 { None } else { Some(t.logprob) })
                .collect();
            choice["logprobs"] = json!({
                "tokens": tokens,
                "token_logprobs": logprobs,
                "text_offset": offsets,
            });
        }
        let n = prompt_tokens.len() as u64;
        let payload = json!({
            "id": "cmpl-stub",
            "object": "text_completion",
            "model": request.model,
            "choices": [choice],
            "usage": {"prompt_tokens": n, "completion_tokens": 0, "total_tokens": n},
        });
        return (200, payload.to_string());
    }
    // generation: canned completion by prompt substring
    let completion = behavior
        .canned
        .iter()
        .find(|(trigger, _)| request.prompt.contains(trigger))
        .map(|(_, response)| response.clone())
        .unwrap_or_else(|| behavior.default_completion.clone());
    let completion_tokens = completion.split_whitespace().count() as u64;
    let prompt_tokens = request.prompt.split_whitespace().count() as u64;
    let payload = json!({
        "id": "cmpl-stub",
        "object": "text_completion",
        "model": request.model,
        "choices": [{"index": 0, "text": completion, "finish_reason": "stop"}],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": completion_tokens,
            "total_tokens": prompt_tokens + completion_tokens,
        },
    });
    (200, payload.to_string())
}

struct LexicalToken<'a> {
    text: &'a str,
    offset: usize,
    logprob: f64,
}

/// Whitespace tokens with byte offsets; a token scores [`LOGPROB_KNOWN`]
/// when its lowercased alphanumeric form already occurred, else
/// [`LOGPROB_NOVEL`].
fn lexical_tokens(text: &str) -> Vec<LexicalToken<'_>> {
    let mut seen = std::collections::HashSet::new();
    crate::doc::word_spans(text)
        .into_iter()
        .map(|(start, end)| {
            let word = &text[start..end];
            let normalized: String = word
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            let known = !normalized.is_empty() && !seen.insert(normalized);
            LexicalToken {
                text: word,
                offset: start,
                logprob: if known { LOGPROB_KNOWN } else { LOGPROB_NOVEL },
            }
        })
        .collect()
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<(String, String)> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut buffer = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok((String::new(), String::new()));
        }
        buffer.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buffer) {
            break pos;
        }
        if buffer.len() > 1 << 20 {
            return Err(std::io::Error::other("headers too large"));
        }
    };
    let header_text = String::from_utf8_lossy(&buffer[..header_end]).to_string();
    let path = header_text
        .lines()
        .next()
        .and_then(|line| line.split_whitespace().nth(1))
        .unwrap_or("/")
        .to_string();
    let content_length = header_text
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.trim()
                .eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    let mut body = buffer[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    body.truncate(content_length);
    Ok((path, String::from_utf8_lossy(&body).to_string()))
}

fn find_header_end(buffer: &[u8]) -> Option<usize> {
    buffer.windows(4).position(|w| w == b"\r\n\r\n")
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Internal Server Error",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

/// Convenience: spawn a stub and a client wired to it.
pub fn client_for(
    behavior: StubBehavior,
    mut cfg: super::BackendConfig,
) -> Result<(StubServer, Arc<super::LlmClient>)> {
    let server = StubServer::spawn(behavior)?;
    cfg.base_url = server.base_url();
    let client = super::LlmClient::new(cfg).map_err(|e| match e {
        Error::InvalidConfig(m) => Error::InvalidConfig(m),
        other => other,
    })?;
    Ok((server, client))
}
