//! Sampling gateway over the distillation and generation models.
//!
//! Both models sit behind [`Gateway::sample`]. Two HTTP flavours speak the
//! OpenAI-compatible wire format (`/completions` and `/chat/completions`);
//! the scripted backend replays canned completions for tests and never
//! touches the network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hash::sha256_hex;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("network error talking to {url}: {message}")]
    Network { url: String, message: String },
    #[error("HTTP {status} from {url}: {body}")]
    Http { status: u16, url: String, body: String },
    #[error("credential environment variable `{0}` is not set")]
    CredentialMissing(String),
    #[error("scripted responses exhausted after {0} entries")]
    ScriptExhausted(usize),
    #[error("scripted entry {index} expects prompt fingerprint {expected}, got {actual}")]
    FingerprintMismatch {
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("scripted entry {index} holds {actual} completions but {expected} were requested")]
    ScriptBatchMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("cannot load script {path}: {message}")]
    ScriptLoad { path: PathBuf, message: String },
    #[error("malformed response from {url}: {message}")]
    MalformedResponse { url: String, message: String },
    #[error("endpoint misconfigured: {0}")]
    Misconfigured(String),
}

impl LlmError {
    /// Transport failures and server-side (5xx) errors are worth retrying.
    /// Client errors and anything scripted are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Network { .. } => true,
            LlmError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }

    pub fn is_credential_error(&self) -> bool {
        matches!(self, LlmError::CredentialMissing(_))
            || matches!(self, LlmError::Http { status: 401 | 403, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub batch_size: u32,
}

impl SamplingParams {
    /// Generation model defaults: temperature 1, nucleus top-p 1, 1024 new
    /// tokens, 30 completions per request.
    pub const fn generation() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 1024,
            batch_size: 30,
        }
    }

    /// Distillation model defaults. Prompts are capped at 500 tokens so they
    /// always fit the generation model's context.
    pub const fn distillation() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 500,
            batch_size: 1,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_batch_size(mut self, batch_size: u32) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidParams(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidParams(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidParams("max_tokens must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(LlmError::InvalidParams("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointKind {
    HttpCompletion,
    HttpChat,
    Scripted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEndpoint {
    pub kind: EndpointKind,
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token. The token
    /// itself is never stored.
    pub auth_token_env: Option<String>,
    pub request_timeout: Duration,
    /// Context window in tokens, when known.
    pub context_tokens: Option<usize>,
    /// Response script for the scripted kind.
    pub script: Option<PathBuf>,
}

impl ModelEndpoint {
    pub fn scripted(model_name: impl Into<String>) -> Self {
        Self {
            kind: EndpointKind::Scripted,
            base_url: String::new(),
            model_name: model_name.into(),
            auth_token_env: None,
            request_timeout: Duration::from_secs(60),
            context_tokens: None,
            script: None,
        }
    }

    pub fn is_http(&self) -> bool {
        self.kind != EndpointKind::Scripted
    }

    /// Fails when an HTTP endpoint names a credential variable that is unset.
    pub fn check_credentials(&self) -> Result<(), LlmError> {
        if !self.is_http() {
            return Ok(());
        }
        self.bearer_token().map(|_| ())
    }

    fn bearer_token(&self) -> Result<Option<String>, LlmError> {
        match &self.auth_token_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(token) if !token.is_empty() => Ok(Some(token)),
                _ => Err(LlmError::CredentialMissing(var.clone())),
            },
        }
    }
}

/// A request to a model: either a single text prompt or a system/user pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prompt {
    Text(String),
    Chat { system: String, user: String },
}

impl Prompt {
    /// Single-string form, used by completion endpoints and fingerprints.
    pub fn rendered(&self) -> String {
        match self {
            Prompt::Text(text) => text.clone(),
            Prompt::Chat { system, user } => render_chat(system, user),
        }
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.rendered().as_bytes())
    }

    fn is_empty(&self) -> bool {
        match self {
            Prompt::Text(text) => text.is_empty(),
            Prompt::Chat { system, user } => system.is_empty() && user.is_empty(),
        }
    }
}

const SYSTEM_HEADER: &str = "### System\n";
const USER_HEADER: &str = "### User\n";

/// Flattens a chat request into one string with fixed role delimiters. The
/// system section is kept even when empty so fingerprints stay aligned.
pub fn render_chat(system_text: &str, user_text: &str) -> String {
    let mut out = String::with_capacity(system_text.len() + user_text.len() + 32);
    out.push_str(SYSTEM_HEADER);
    out.push_str(system_text);
    out.push('\n');
    out.push_str(USER_HEADER);
    out.push_str(user_text);
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// The model stopped because it ran into `max_tokens`.
    #[serde(default)]
    pub hit_length_limit: bool,
}

impl Completion {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            hit_length_limit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub completions: Vec<String>,
}

impl ScriptEntry {
    pub fn new<I, S>(completions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            fingerprint: None,
            completions: completions.into_iter().map(Into::into).collect(),
        }
    }

    pub fn expecting(mut self, prompt: &Prompt) -> Self {
        self.fingerprint = Some(prompt.fingerprint());
        self
    }
}

/// Replay position of a scripted backend, persisted with campaign checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptCursor {
    pub cursor: usize,
    /// Greedy (temperature 0) answers keyed by prompt fingerprint and batch size.
    #[serde(default)]
    pub greedy: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedResponses {
    responses: Vec<ScriptEntry>,
    state: ScriptCursor,
}

impl ScriptedResponses {
    pub fn new(responses: Vec<ScriptEntry>) -> Self {
        Self {
            responses,
            state: ScriptCursor::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let load_err = |message: String| LlmError::ScriptLoad {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let responses: Vec<ScriptEntry> =
            serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        Ok(Self::new(responses))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.responses.len().saturating_sub(self.state.cursor)
    }

    pub fn cursor(&self) -> &ScriptCursor {
        &self.state
    }

    pub fn restore(&mut self, cursor: ScriptCursor) {
        self.state = cursor;
    }

    fn next(&mut self, prompt: &Prompt, params: &SamplingParams) -> Result<Vec<String>, LlmError> {
        let fingerprint = prompt.fingerprint();
        let greedy_key = format!("{fingerprint}/{}", params.batch_size);
        if params.temperature == 0.0 {
            if let Some(cached) = self.state.greedy.get(&greedy_key) {
                return Ok(cached.clone());
            }
        }

        let index = self.state.cursor;
        let entry = self
            .responses
            .get(index)
            .ok_or(LlmError::ScriptExhausted(self.responses.len()))?;
        if let Some(expected) = &entry.fingerprint {
            if *expected != fingerprint {
                return Err(LlmError::FingerprintMismatch {
                    index,
                    expected: expected.clone(),
                    actual: fingerprint,
                });
            }
        }
        if entry.completions.len() != params.batch_size as usize {
            return Err(LlmError::ScriptBatchMismatch {
                index,
                expected: params.batch_size as usize,
                actual: entry.completions.len(),
            });
        }
        let completions = entry.completions.clone();
        self.state.cursor += 1;
        if params.temperature == 0.0 {
            self.state.greedy.insert(greedy_key, completions.clone());
        }
        Ok(completions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            initial_backoff: Duration::ZERO,
        }
    }
}

/// What was asked of a model, kept for audits. Never holds credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub fingerprint: String,
    pub params: SamplingParams,
}

enum Backend {
    Scripted(Mutex<ScriptedResponses>),
    Http(HttpBackend),
}

pub struct Gateway {
    endpoint: ModelEndpoint,
    backend: Backend,
    retry: RetryPolicy,
    requests: Mutex<Vec<RecordedRequest>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("endpoint", &self.endpoint)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Builds a gateway for `endpoint`. Scripted endpoints load their script
    /// file here; HTTP endpoints do not connect until the first request.
    pub fn from_endpoint(endpoint: ModelEndpoint) -> Result<Self, LlmError> {
        let backend = match endpoint.kind {
            EndpointKind::Scripted => {
                let script = match &endpoint.script {
                    Some(path) => ScriptedResponses::load(path)?,
                    None => {
                        return Err(LlmError::Misconfigured(format!(
                            "scripted endpoint `{}` has no script",
                            endpoint.model_name
                        )))
                    }
                };
                Backend::Scripted(Mutex::new(script))
            }
            EndpointKind::HttpCompletion | EndpointKind::HttpChat => {
                if endpoint.base_url.is_empty() {
                    return Err(LlmError::Misconfigured(format!(
                        "endpoint `{}` has no base_url",
                        endpoint.model_name
                    )));
                }
                Backend::Http(HttpBackend::new(&endpoint))
            }
        };
        Ok(Self {
            endpoint,
            backend,
            retry: RetryPolicy::default(),
            requests: Mutex::new(Vec::new()),
        })
    }

    pub fn scripted(responses: ScriptedResponses) -> Self {
        Self {
            endpoint: ModelEndpoint::scripted("scripted"),
            backend: Backend::Scripted(Mutex::new(responses)),
            retry: RetryPolicy::none(),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_context_tokens(mut self, tokens: Option<usize>) -> Self {
        self.endpoint.context_tokens = tokens;
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().expect("request log poisoned").clone()
    }

    /// Scripted replay position, `None` for HTTP backends.
    pub fn script_cursor(&self) -> Option<ScriptCursor> {
        match &self.backend {
            Backend::Scripted(script) => Some(script.lock().expect("script poisoned").cursor().clone()),
            Backend::Http(_) => None,
        }
    }

    pub fn restore_script_cursor(&self, cursor: ScriptCursor) {
        if let Backend::Scripted(script) = &self.backend {
            script.lock().expect("script poisoned").restore(cursor);
        }
    }

    /// Draws exactly `params.batch_size` completions for `prompt`.
    pub fn sample(&self, prompt: &Prompt, params: &SamplingParams) -> Result<Vec<Completion>, LlmError> {
        params.validate()?;
        if prompt.is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        self.requests
            .lock()
            .expect("request log poisoned")
            .push(RecordedRequest {
                fingerprint: prompt.fingerprint(),
                params: *params,
            });

        match &self.backend {
            Backend::Scripted(script) => {
                let texts = script.lock().expect("script poisoned").next(prompt, params)?;
                Ok(texts.into_iter().map(Completion::new).collect())
            }
            Backend::Http(http) => {
                let mut attempt = 0;
                loop {
                    match http.sample(&self.endpoint, prompt, params) {
                        Ok(completions) => return Ok(completions),
                        Err(err) if err.is_retryable() && attempt < self.retry.max_retries => {
                            let backoff = self.retry.initial_backoff * 2u32.pow(attempt);
                            log::warn!(
                                "request to {} failed ({err}); retrying in {:?}",
                                self.endpoint.model_name,
                                backoff
                            );
                            std::thread::sleep(backoff);
                            attempt += 1;
                        }
                        Err(err) => return Err(err),
                    }
                }
            }
        }
    }
}

struct HttpBackend {
    agent: ureq::Agent,
}

impl HttpBackend {
    fn new(endpoint: &ModelEndpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }

    fn url(endpoint: &ModelEndpoint) -> String {
        let base = endpoint.base_url.trim_end_matches('/');
        match endpoint.kind {
            EndpointKind::HttpChat => format!("{base}/chat/completions"),
            _ => format!("{base}/completions"),
        }
    }

    /// Some servers ignore `n` and answer with fewer choices; keep asking
    /// for the remainder until the batch is full.
    fn sample(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &Prompt,
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, LlmError> {
        let token = endpoint.bearer_token()?;
        let url = Self::url(endpoint);
        let wanted = params.batch_size as usize;
        let mut out = Vec::with_capacity(wanted);
        while out.len() < wanted {
            let body = request_body(endpoint, prompt, params, (wanted - out.len()) as u32);
            let got = self.post(&url, token.as_deref(), &body, endpoint.kind)?;
            if got.is_empty() {
                return Err(LlmError::MalformedResponse {
                    url,
                    message: "response carried no choices".into(),
                });
            }
            out.extend(got);
        }
        out.truncate(wanted);
        Ok(out)
    }

    fn post(
        &self,
        url: &str,
        token: Option<&str>,
        body: &Value,
        kind: EndpointKind,
    ) -> Result<Vec<Completion>, LlmError> {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| LlmError::Network {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Network {
                url: url.to_string(),
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            let mut body = text;
            body.truncate(crate::text::floor_char_boundary(&body, 512));
            return Err(LlmError::Http {
                status,
                url: url.to_string(),
                body,
            });
        }
        parse_choices(&text, kind).map_err(|message| LlmError::MalformedResponse {
            url: url.to_string(),
            message,
        })
    }
}

fn request_body(endpoint: &ModelEndpoint, prompt: &Prompt, params: &SamplingParams, n: u32) -> Value {
    let mut body = json!({
        "model": endpoint.model_name,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "max_tokens": params.max_tokens,
        "n": n,
    });
    match endpoint.kind {
        EndpointKind::HttpChat => {
            let messages = match prompt {
                Prompt::Chat { system, user } => json!([
                    {"role": "system", "content": system},
                    {"role": "user", "content": user},
                ]),
                Prompt::Text(text) => json!([{"role": "user", "content": text}]),
            };
            body["messages"] = messages;
        }
        _ => body["prompt"] = Value::String(prompt.rendered()),
    }
    body
}

/// Pulls completions out of `choices[*].text` or `choices[*].message.content`.
pub fn parse_choices(body: &str, kind: EndpointKind) -> Result<Vec<Completion>, String> {
    let value: Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
    let choices = value
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| "missing `choices` array".to_string())?;
    choices
        .iter()
        .map(|choice| {
            let text = match kind {
                EndpointKind::HttpChat => choice.pointer("/message/content"),
                _ => choice.get("text"),
            }
            .or_else(|| choice.get("text"))
            .or_else(|| choice.pointer("/message/content"))
            .and_then(Value::as_str)
            .ok_or_else(|| "choice without text".to_string())?;
            let hit_length_limit = choice.get("finish_reason").and_then(Value::as_str) == Some("length");
            Ok(Completion {
                text: text.to_string(),
                hit_length_limit,
            })
        })
        .collect()
}
