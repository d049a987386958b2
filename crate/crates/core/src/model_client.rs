//! Answer-model backends.
//!
//! [`AnswerModel`] is the single seam between the pipeline and whatever
//! produces answers: a remote chat-completion endpoint ([`RemoteBackend`]),
//! a canned-answer table ([`MockBackend`]), or the simulator's noisy oracle
//! (`simworld::OracleBackend`).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::scene_graph::Camera;
use crate::seeding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("remote error (status {status}): {message}")]
    RemoteError { status: u16, message: String },
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<ClientError> },
    #[error("backend does not expose embeddings")]
    BackendLacksEmbeddings,
    #[error("could not parse a score from judge reply {0:?}")]
    UnparsableJudgeReply(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("no canned answer for prompt {0}")]
    MockMiss(String),
    #[error("question outside the template catalog: {0}")]
    UnknownQuestion(String),
    #[error("invalid client config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub camera: Camera,
    pub uri: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub deterministic: bool,
    pub max_tokens: u32,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { deterministic: true, max_tokens: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub image_refs: Vec<ImageRef>,
    pub prompt: String,
    pub decode: DecodeOptions,
}

impl ModelRequest {
    pub fn new(image_refs: Vec<ImageRef>, prompt: impl Into<String>) -> Self {
        Self { image_refs, prompt: prompt.into(), decode: DecodeOptions::default() }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.image_refs.is_empty() || self.image_refs.len() > 6 {
            return Err(ClientError::InvalidRequest(format!(
                "expected 1-6 images, got {}",
                self.image_refs.len()
            )));
        }
        if self.prompt.trim().is_empty() {
            return Err(ClientError::InvalidRequest("empty prompt".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Mean of per-token vectors.
    pub fn mean_pool(rows: &[Vec<f64>]) -> Option<Embedding> {
        let dim = rows.first()?.len();
        if rows.iter().any(|r| r.len() != dim) {
            return None;
        }
        let mut values = vec![0.0; dim];
        for row in rows {
            for (acc, v) in values.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let n = rows.len() as f64;
        values.iter_mut().for_each(|v| *v /= n);
        Some(Embedding { values })
    }
}

pub trait AnswerModel: Send + Sync {
    /// Identity stamped on reports.
    fn id(&self) -> String;

    fn generate(&self, req: &ModelRequest) -> Result<String, ClientError>;

    fn embed(&self, _text: &str) -> Result<Embedding, ClientError> {
        Err(ClientError::BackendLacksEmbeddings)
    }

    /// Similarity of `prediction` to `ground_truth` on a 0-100 scale.
    fn judge(&self, _question: &str, ground_truth: &str, prediction: &str) -> Result<f64, ClientError> {
        Ok(surrogate_judge(ground_truth, prediction, DEFAULT_HASH_DIM))
    }
}

pub const DEFAULT_HASH_DIM: usize = 1024;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], offset: u64) -> u64 {
    bytes.iter().fold(offset, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

pub fn hash_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Bucket index and sign for one token.
pub fn hash_bucket(token: &str, dim: usize) -> (usize, f64) {
    let bucket = (fnv1a(token.as_bytes(), FNV_OFFSET) % dim as u64) as usize;
    let sign = if fnv1a(token.as_bytes(), FNV_OFFSET ^ 0x9e37_79b9_7f4a_7c15) & 1 == 0 {
        1.0
    } else {
        -1.0
    };
    (bucket, sign)
}

/// Signed feature-hashing bag of words, L2-normalized. Pure in `text`.
pub fn hash_embed(text: &str, dim: usize) -> Embedding {
    assert!(dim >= 64, "hash embedding dimension must be at least 64");
    let mut values = vec![0.0; dim];
    for token in hash_tokens(text) {
        let (bucket, sign) = hash_bucket(&token, dim);
        values[bucket] += sign;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    Embedding { values }
}

/// `round(100 * clamp(cos, 0, 1))` over hash embeddings.
pub fn surrogate_judge(ground_truth: &str, prediction: &str, dim: usize) -> f64 {
    let cos = crate::scr::cosine(&hash_embed(ground_truth, dim), &hash_embed(prediction, dim))
        .unwrap_or(0.0);
    (100.0 * cos.clamp(0.0, 1.0)).round()
}

/// Embedding source for consistency scoring: the backend's own sentence
/// embeddings when available, otherwise the hash embedder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbedderChoice {
    Hash { dim: usize },
    BackendOrHash { dim: usize },
}

impl Default for EmbedderChoice {
    fn default() -> Self {
        EmbedderChoice::Hash { dim: DEFAULT_HASH_DIM }
    }
}

impl EmbedderChoice {
    /// Embeds `text` and reports which embedder produced the vector.
    pub fn embed(
        &self,
        model: &dyn AnswerModel,
        text: &str,
    ) -> Result<(Embedding, String), ClientError> {
        match *self {
            EmbedderChoice::Hash { dim } => Ok((hash_embed(text, dim), format!("hash-{dim}"))),
            EmbedderChoice::BackendOrHash { dim } => match model.embed(text) {
                Ok(e) => Ok((e, format!("backend:{}", model.id()))),
                Err(ClientError::BackendLacksEmbeddings) => {
                    Ok((hash_embed(text, dim), format!("hash-{dim}")))
                }
                Err(e) => Err(e),
            },
        }
    }
}

/// Canned answers keyed by prompt text or by its SHA-256 hex digest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockBackend {
    pub answers: BTreeMap<String, String>,
    #[serde(default)]
    pub default_answer: Option<String>,
    #[serde(default)]
    pub embeddings: bool,
}

impl MockBackend {
    pub fn prompt_key(prompt: &str) -> String {
        seeding::sha256_hex(prompt.as_bytes())
    }

    pub fn insert(&mut self, prompt: &str, answer: impl Into<String>) {
        self.answers.insert(Self::prompt_key(prompt), answer.into());
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ClientError::Config(e.to_string()))
    }
}

impl AnswerModel for MockBackend {
    fn id(&self) -> String {
        "mock".into()
    }

    fn generate(&self, req: &ModelRequest) -> Result<String, ClientError> {
        req.validate()?;
        let key = Self::prompt_key(&req.prompt);
        let answer = self
            .answers
            .get(&key)
            .or_else(|| self.answers.get(&req.prompt))
            .or(self.default_answer.as_ref())
            .ok_or(ClientError::MockMiss(key))?;
        let answer = answer.trim();
        if answer.is_empty() {
            return Err(ClientError::RemoteError { status: 200, message: "empty answer".into() });
        }
        Ok(answer.to_string())
    }

    fn embed(&self, text: &str) -> Result<Embedding, ClientError> {
        if self.embeddings {
            Ok(hash_embed(text, DEFAULT_HASH_DIM))
        } else {
            Err(ClientError::BackendLacksEmbeddings)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub base_url: String,
    pub model_name: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: Option<String>,
    pub retry_backoff_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "ldm".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            max_concurrent_requests: 8,
            auth_token_env: None,
            retry_backoff_ms: 250,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.timeout_secs > 0.0) {
            return Err(ClientError::Config("timeout must be positive".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(ClientError::Config("max_concurrent_requests must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Timeout,
    Io(String),
}

/// One HTTP POST with a JSON body; returns the status and raw body.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<(u16, String), TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<(u16, String), TransportError> {
        let mut request = self.agent.post(url);
        for (name, value) in headers {
            request = request.header(name.as_str(), value.as_str());
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Io(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Io(other.to_string()),
        })?;
        Ok((status, text))
    }
}

/// Counting semaphore bounding in-flight requests.
struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("semaphore lock");
        while *available == 0 {
            available = self.freed.wait(available).expect("semaphore wait");
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore lock") += 1;
        self.0.freed.notify_one();
    }
}

/// Chat-completion style HTTP backend.
pub struct RemoteBackend<T: Transport = UreqTransport> {
    config: ClientConfig,
    transport: T,
    token: Option<String>,
    in_flight: Semaphore,
}

impl RemoteBackend<UreqTransport> {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let transport = UreqTransport::new(Duration::from_secs_f64(config.timeout_secs));
        Self::with_transport(config, transport)
    }
}

fn redact(body: &Value) -> String {
    let mut text = body.to_string();
    if text.len() > 512 {
        let mut cut = 512;
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        text.truncate(cut);
        text.push_str("...");
    }
    text
}

fn judge_score_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"(?i)score\s*[:=]?\s*(\d+(?:\.\d+)?)|^\s*(\d+(?:\.\d+)?)\s*$")
            .expect("valid regex")
    })
}

/// Extracts a 0-100 score from a judge reply such as `"Score: 87"`.
pub fn parse_judge_reply(reply: &str) -> Result<f64, ClientError> {
    let caps = judge_score_pattern()
        .captures(reply)
        .ok_or_else(|| ClientError::UnparsableJudgeReply(reply.to_string()))?;
    let number = caps.get(1).or_else(|| caps.get(2)).expect("one group matched");
    let value: f64 = number
        .as_str()
        .parse()
        .map_err(|_| ClientError::UnparsableJudgeReply(reply.to_string()))?;
    if !(0.0..=100.0).contains(&value) {
        return Err(ClientError::UnparsableJudgeReply(reply.to_string()));
    }
    Ok(value)
}

fn extract_answer(reply: &Value) -> Option<String> {
    let content = reply.pointer("/choices/0/message/content")?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => return None,
    };
    let text = text.trim();
    (!text.is_empty()).then(|| text.to_string())
}

impl<T: Transport> RemoteBackend<T> {
    pub fn with_transport(config: ClientConfig, transport: T) -> Result<Self, ClientError> {
        config.validate()?;
        let token = config
            .auth_token_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok());
        let in_flight = Semaphore::new(config.max_concurrent_requests);
        Ok(Self { config, transport, token, in_flight })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn headers(&self) -> Vec<(String, String)> {
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(token) = &self.token {
            headers.push(("Authorization".into(), format!("Bearer {token}")));
        }
        headers
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    /// POSTs with bounded concurrency and retries on timeouts, 429 and 5xx.
    fn post(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        let url = self.url(path);
        let headers = self.headers();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            log::debug!("POST {url} attempt {attempt}: {}", redact(body));
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.transport.post_json(&url, &headers, body)
            };
            let error = match outcome {
                Ok((status, text)) if (200..300).contains(&status) => {
                    log::debug!("reply {status}: {}", redact(&Value::String(text.clone())));
                    return serde_json::from_str(&text).map_err(|e| ClientError::RemoteError {
                        status,
                        message: format!("reply is not JSON: {e}"),
                    });
                }
                Ok((status, text)) => {
                    let error = ClientError::RemoteError { status, message: text };
                    if status != 429 && status < 500 {
                        return Err(error);
                    }
                    error
                }
                Err(TransportError::Timeout) => ClientError::Timeout,
                Err(TransportError::Io(message)) => ClientError::Transport(message),
            };
            if attempt > self.config.max_retries {
                if self.config.max_retries == 0 {
                    return Err(error);
                }
                return Err(ClientError::ExhaustedRetries { attempts: attempt, last: Box::new(error) });
            }
            let backoff = self.config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            if backoff > 0 {
                std::thread::sleep(Duration::from_millis(backoff));
            }
        }
    }

    pub fn chat_body(&self, req: &ModelRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.prompt})];
        for image in &req.image_refs {
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": image.uri},
                "camera": image.camera,
            }));
        }
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": req.decode.max_tokens,
        });
        if req.decode.deterministic {
            body["temperature"] = json!(0.0);
            body["top_p"] = json!(1.0);
        }
        body
    }

    fn ask_text(&self, prompt: &str) -> Result<String, ClientError> {
        let body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": [{"type": "text", "text": prompt}]}],
            "temperature": 0.0,
            "max_tokens": 16,
        });
        let reply = self.post("chat/completions", &body)?;
        extract_answer(&reply).ok_or_else(|| ClientError::RemoteError {
            status: 200,
            message: "reply has no answer text".into(),
        })
    }
}

impl<T: Transport> AnswerModel for RemoteBackend<T> {
    fn id(&self) -> String {
        format!("remote:{}", self.config.model_name)
    }

    fn generate(&self, req: &ModelRequest) -> Result<String, ClientError> {
        req.validate()?;
        let reply = self.post("chat/completions", &self.chat_body(req))?;
        extract_answer(&reply).ok_or_else(|| ClientError::RemoteError {
            status: 200,
            message: "reply has no answer text".into(),
        })
    }

    fn embed(&self, text: &str) -> Result<Embedding, ClientError> {
        if text.trim().is_empty() {
            return Ok(Embedding::zeros(0));
        }
        let body = json!({"model": self.config.model_name, "input": text});
        let reply = match self.post("embeddings", &body) {
            Err(ClientError::RemoteError { status: 404 | 405 | 501, .. }) => {
                return Err(ClientError::BackendLacksEmbeddings)
            }
            other => other?,
        };
        let raw = reply
            .pointer("/data/0/embedding")
            .ok_or(ClientError::BackendLacksEmbeddings)?;
        if let Ok(pooled) = serde_json::from_value::<Vec<f64>>(raw.clone()) {
            return Ok(Embedding { values: pooled });
        }
        let rows: Vec<Vec<f64>> = serde_json::from_value(raw.clone()).map_err(|e| {
            ClientError::RemoteError { status: 200, message: format!("bad embedding: {e}") }
        })?;
        Embedding::mean_pool(&rows).ok_or_else(|| ClientError::RemoteError {
            status: 200,
            message: "ragged or empty token embeddings".into(),
        })
    }

    fn judge(&self, question: &str, ground_truth: &str, prediction: &str) -> Result<f64, ClientError> {
        let prompt = format!(
            "Rate how well the prediction answers the question compared to the ground truth, \
on a scale from 0 to 100. Reply with \"Score: <number>\" only.\n\
Question: {question}\nGround truth: {ground_truth}\nPrediction: {prediction}"
        );
        match parse_judge_reply(&self.ask_text(&prompt)?) {
            Ok(score) => Ok(score),
            Err(ClientError::UnparsableJudgeReply(_)) => parse_judge_reply(&self.ask_text(&prompt)?),
            Err(e) => Err(e),
        }
    }
}
