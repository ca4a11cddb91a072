//! Response-generating backends: an OpenAI-style chat-completion endpoint
//! over HTTP, and deterministic mocks for offline runs.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StrategyChain;
use crate::promptkit::{render_wellformed, Method, PromptBundle};
use crate::seed::{derive_seed, sha256_hex};

pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(Self::Http),
            "mock" => Ok(Self::Mock),
            other => Err(format!("unknown backend kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry_base_ms: u64,
    pub retry_max_ms: u64,
    /// Scripted mock replies (JSON map file); absent means strategist mode.
    pub mock_script: Option<PathBuf>,
    /// Seed of the strategist mock.
    pub mock_seed: u64,
    /// When set, every attempt is appended to `llm_audit.jsonl` here.
    pub log_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: "gpt-3.5-turbo".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60.0,
            max_retries: 3,
            max_parallel: 4,
            temperature: 0.7,
            max_tokens: 1024,
            retry_base_ms: 500,
            retry_max_ms: 30_000,
            mock_script: None,
            mock_seed: 0,
            log_dir: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        let invalid = |m: &str| Err(LlmError::InvalidConfig(m.to_string()));
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return invalid("timeout must be positive");
        }
        if self.max_parallel < 1 {
            return invalid("max_parallel must be at least 1");
        }
        if self.kind == BackendKind::Http && self.endpoint.is_none() {
            return invalid("http backend requires an endpoint");
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base: Duration::from_millis(self.retry_base_ms),
            cap: Duration::from_millis(self.retry_max_ms),
        }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("environment variable {0} with the API key is not set")]
    MissingApiKey(String),
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("reading mock script {path}: {message}")]
    Script { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Outcome of a single backend attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    /// Timeouts, connection failures, 429 and 5xx: worth retrying.
    Transient(String),
    Auth(String),
    Rejected { status: u16, body: String },
    Malformed(String),
}

impl CallError {
    fn is_transient(&self) -> bool {
        matches!(self, CallError::Transient(_))
    }

    fn describe(&self) -> String {
        match self {
            CallError::Transient(m) | CallError::Auth(m) | CallError::Malformed(m) => m.clone(),
            CallError::Rejected { status, body } => format!("status {status}: {body}"),
        }
    }

    fn into_error(self, attempts: u32) -> LlmError {
        match self {
            CallError::Transient(last) => LlmError::RetriesExhausted { attempts, last },
            CallError::Auth(m) => LlmError::Auth(m),
            CallError::Rejected { status, body } => LlmError::Rejected { status, body },
            CallError::Malformed(m) => LlmError::Malformed(m),
        }
    }
}

/// Classifies an HTTP status; `None` means success.
pub fn classify_status(status: u16, body: &str) -> Option<CallError> {
    match status {
        200..=299 => None,
        401 | 403 => Some(CallError::Auth(format!("status {status}"))),
        429 | 500..=599 => Some(CallError::Transient(format!("status {status}"))),
        _ => Some(CallError::Rejected {
            status,
            body: body.chars().take(512).collect(),
        }),
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub id: String,
    pub prompt: String,
    /// The structured prompt, for backends that need more than the text.
    pub bundle: Option<PromptBundle>,
}

impl CompletionRequest {
    pub fn from_bundle(id: impl Into<String>, bundle: &PromptBundle) -> Self {
        Self {
            id: id.into(),
            prompt: bundle.rendered.clone(),
            bundle: Some(bundle.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub request_id: String,
    pub text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub backend: String,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> String;
    fn call(&self, request: &CompletionRequest) -> Result<String, CallError>;
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub cap: Duration,
}

impl RetryPolicy {
    /// Upper bound of the wait before retry number `retry` (0-based):
    /// `min(cap, base * 2^retry)`.
    pub fn base_delay(&self, retry: u32) -> Duration {
        let factor = 2u32.checked_pow(retry.min(31)).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.cap)
    }

    /// A uniformly random wait in `[0, base_delay(retry)]`.
    pub fn jittered_delay<R: Rng>(&self, retry: u32, rng: &mut R) -> Duration {
        let ceiling = self.base_delay(retry).as_micros() as u64;
        Duration::from_micros(rng.gen_range(0..=ceiling))
    }
}

/// Counting gate bounding in-flight requests.
#[derive(Debug)]
struct Gate {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a Gate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.gate.in_flight.lock().unwrap() -= 1;
        self.gate.freed.notify_one();
    }
}

#[derive(Serialize)]
struct AuditLine<'a> {
    id: &'a str,
    attempt: u32,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Dispatches prompts to a backend with retries and a concurrency bound.
/// Safe to share across threads.
pub struct LlmClient {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    gate: Gate,
    audit: Option<Mutex<File>>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy, max_parallel: usize) -> Self {
        Self {
            backend,
            retry,
            gate: Gate::new(max_parallel.max(1)),
            audit: None,
        }
    }

    /// Builds the backend described by `config`.
    pub fn from_config(config: &BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.kind {
            BackendKind::Http => Arc::new(HttpBackend::from_config(config)?),
            BackendKind::Mock => Arc::new(match &config.mock_script {
                Some(path) => MockBackend::from_script_file(path, config.mock_seed)?,
                None => MockBackend::strategist(config.mock_seed),
            }),
        };
        let mut client = Self::new(backend, config.retry_policy(), config.max_parallel);
        if let Some(dir) = &config.log_dir {
            client = client.with_audit_log(dir)?;
        }
        Ok(client)
    }

    pub fn with_audit_log(mut self, dir: &Path) -> Result<Self, LlmError> {
        std::fs::create_dir_all(dir)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("llm_audit.jsonl"))?;
        self.audit = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    fn audit(&self, request: &CompletionRequest, attempt: u32, outcome: &Result<String, CallError>) {
        let Some(file) = &self.audit else { return };
        let line = AuditLine {
            id: &request.id,
            attempt,
            prompt: &request.prompt,
            response: outcome.as_ref().ok().map(|s| s.as_str()),
            error: outcome.as_ref().err().map(CallError::describe),
        };
        let mut file = file.lock().unwrap();
        // Audit logging is best effort.
        let _ = writeln!(file, "{}", serde_json::to_string(&line).expect("audit line serializes"));
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        let started = Instant::now();
        let mut rng = rand::thread_rng();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.gate.acquire();
                self.backend.call(request)
            };
            self.audit(request, attempt, &outcome);
            match outcome {
                Ok(text) => {
                    return Ok(CompletionResult {
                        request_id: request.id.clone(),
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts: attempt,
                        backend: self.backend.id(),
                    })
                }
                Err(e) if e.is_transient() && attempt <= self.retry.max_retries => {
                    std::thread::sleep(self.retry.jittered_delay(attempt - 1, &mut rng));
                }
                Err(e) => return Err(e.into_error(attempt)),
            }
        }
    }

    /// Completes every request on up to `max_parallel` worker threads.
    /// Results are returned sorted by request id.
    pub fn complete_all(
        &self,
        requests: &[CompletionRequest],
    ) -> Vec<(String, Result<CompletionResult, LlmError>)> {
        let next = Mutex::new(0usize);
        let results = Mutex::new(Vec::with_capacity(requests.len()));
        let workers = self.gate.limit.min(requests.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().unwrap();
                        let i = *n;
                        *n += 1;
                        i
                    };
                    let Some(request) = requests.get(i) else { break };
                    let outcome = self.complete(request);
                    results.lock().unwrap().push((request.id.clone(), outcome));
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        results.sort_by(|a, b| a.0.cmp(&b.0));
        results
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: String,
}

/// Request body for a single-user-message chat completion.
pub fn chat_request_body(model: &str, prompt: &str, temperature: f64, max_tokens: u32) -> String {
    serde_json::to_string(&ChatRequest {
        model,
        messages: [ChatMessage {
            role: "user",
            content: prompt,
        }],
        temperature,
        max_tokens,
    })
    .expect("chat request serializes")
}

/// Extracts `choices[0].message.content`.
pub fn parse_chat_response(body: &str) -> Result<String, CallError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| CallError::Malformed(e.to_string()))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| CallError::Malformed("no choices in response".into()))
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: String,
    temperature: f64,
    max_tokens: u32,
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable.
    pub fn from_config(config: &BackendConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::MissingApiKey(config.api_key_env.clone()))?;
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| LlmError::InvalidConfig("http backend requires an endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint,
            model: config.model.clone(),
            api_key,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn call(&self, request: &CompletionRequest) -> Result<String, CallError> {
        let body = chat_request_body(&self.model, &request.prompt, self.temperature, self.max_tokens);
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send(body.as_bytes())
            .map_err(|e| CallError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| CallError::Transient(e.to_string()))?;
        if let Some(err) = classify_status(status, &text) {
            return Err(err);
        }
        parse_chat_response(&text)
    }
}

/// One scripted mock reply. Either a bare string or an object that can also
/// inject transient failures before replying.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Reply(String),
    Detailed {
        reply: String,
        #[serde(default)]
        fail_times: u32,
        #[serde(default = "default_fail_status")]
        fail_status: u16,
    },
}

fn default_fail_status() -> u16 {
    503
}

/// Deterministic offline backend. Scripted entries are keyed by the SHA-256
/// (hex) of the prompt text or by the request id; anything unscripted falls
/// back to the strategist, if enabled.
pub struct MockBackend {
    script: BTreeMap<String, ScriptEntry>,
    strategist_seed: Option<u64>,
    failures: Mutex<HashMap<String, u32>>,
}

impl MockBackend {
    pub fn strategist(seed: u64) -> Self {
        Self {
            script: BTreeMap::new(),
            strategist_seed: Some(seed),
            failures: Mutex::new(HashMap::new()),
        }
    }

    pub fn scripted(script: BTreeMap<String, ScriptEntry>, fallback_seed: Option<u64>) -> Self {
        Self {
            script,
            strategist_seed: fallback_seed,
            failures: Mutex::new(HashMap::new()),
        }
    }

    /// Script files are a JSON map `{key: entry}`; the reserved key
    /// `"mode"` set to `"strategist"` enables strategist fallback.
    pub fn from_script_file(path: &Path, seed: u64) -> Result<Self, LlmError> {
        let err = |message: String| LlmError::Script {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut map: BTreeMap<String, ScriptEntry> =
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let fallback = match map.remove("mode") {
            Some(ScriptEntry::Reply(mode)) if mode == "strategist" => Some(seed),
            Some(other) => return Err(err(format!("unsupported mode {other:?}"))),
            None => None,
        };
        Ok(Self::scripted(map, fallback))
    }
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        match (self.script.is_empty(), self.strategist_seed) {
            (true, Some(seed)) => format!("mock:strategist:{seed}"),
            (false, Some(seed)) => format!("mock:script+strategist:{seed}"),
            _ => "mock:script".into(),
        }
    }

    fn call(&self, request: &CompletionRequest) -> Result<String, CallError> {
        let hash = sha256_hex(&request.prompt);
        let entry = self.script.get(&hash).or_else(|| self.script.get(&request.id));
        match entry {
            Some(ScriptEntry::Reply(text)) => Ok(text.clone()),
            Some(ScriptEntry::Detailed {
                reply,
                fail_times,
                fail_status,
            }) => {
                let mut failures = self.failures.lock().unwrap();
                let seen = failures.entry(hash).or_insert(0);
                if *seen < *fail_times {
                    *seen += 1;
                    let status = *fail_status;
                    return Err(classify_status(status, "scripted failure")
                        .unwrap_or_else(|| CallError::Transient(format!("status {status}"))));
                }
                Ok(reply.clone())
            }
            None => match (self.strategist_seed, &request.bundle) {
                (Some(seed), Some(bundle)) => Ok(mock_strategist(bundle, seed)),
                (Some(_), None) => Err(CallError::Malformed("strategist mock needs a prompt bundle".into())),
                (None, _) => Err(CallError::Rejected {
                    status: 404,
                    body: format!("no scripted reply for prompt {hash}"),
                }),
            },
        }
    }
}

/// Sentence bank for the strategist mock, keyed by builtin strategy label.
fn phrases(label: &str) -> &'static [&'static str] {
    match label {
        "Information" => &[
            "Many people go through something similar, and it often eases with time and support.",
            "Worry before important events is a common stress reaction rather than a personal failing.",
            "Regular sleep, movement and meals have a measurable effect on mood.",
        ],
        "Direct Guidance" => &[
            "Try writing down what worries you each evening and set it aside until morning.",
            "You could talk with someone you trust this week and tell them how you feel.",
            "Consider reaching out to a counselor if these feelings stay with you.",
        ],
        "Approval And Reassurance" => &[
            "It took courage to share this, and your feelings make sense.",
            "You are doing better than you think, and you do not have to face this alone.",
            "It is okay to feel this way, and things can improve.",
        ],
        "Restatement" => &[
            "It sounds like you feel stuck and exhausted by this situation.",
            "You are saying that this has been weighing on you for a long time.",
            "If I understand you, the hardest part is not knowing what comes next.",
        ],
        "Interpretation" => &[
            "Part of the pressure may come from expecting yourself to handle everything alone.",
            "Your reaction may be protecting you from a fear you have not named yet.",
            "These feelings might be a sign that an important need is not being met.",
        ],
        "Self-disclosure" => &[
            "I once went through a period like this and remember how lonely it felt.",
            "When I faced something similar, talking about it helped me more than I expected.",
            "I have felt that kind of pressure too, so I understand a little of what you carry.",
        ],
        _ => &[
            "I want to respond to this part of your situation with care.",
            "Let us look at this from another angle together.",
        ],
    }
}

fn fabricate_segments(chain: &StrategyChain, rng: &mut ChaCha8Rng) -> String {
    chain
        .steps()
        .iter()
        .map(|s| *phrases(s.as_str()).choose(rng).expect("phrase banks are non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic test double emitting well-formed replies. For DSCs it picks
/// one offered chain (seeded) and writes one sentence per strategy of that
/// chain, in order; other methods get templated text.
pub fn mock_strategist(bundle: &PromptBundle, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[bundle.method.as_str(), &bundle.question_id],
    ));
    match bundle.method {
        Method::Dscs if !bundle.offered_chains.is_empty() => {
            let chosen = &bundle.offered_chains[rng.gen_range(0..bundle.offered_chains.len())];
            let body = fabricate_segments(chosen, &mut rng);
            format!("I compared the candidate chains.\n{}", render_wellformed(chosen, &body))
        }
        Method::Sc | Method::Dsc if !bundle.offered_chains.is_empty() => {
            fabricate_segments(&bundle.offered_chains[0], &mut rng)
        }
        Method::CoT => {
            let plan = StrategyChain::from_labels(["Restatement", "Interpretation", "Direct Guidance"])
                .expect("builtin labels");
            format!("Let us think step by step. {}", fabricate_segments(&plan, &mut rng))
        }
        _ => {
            let plan = StrategyChain::from_labels(["Approval And Reassurance", "Information", "Direct Guidance"])
                .expect("builtin labels");
            fabricate_segments(&plan, &mut rng)
        }
    }
}
