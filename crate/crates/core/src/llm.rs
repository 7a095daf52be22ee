//! Prompt construction and the LLM gateway: pluggable chat backends
//! (hosted chat-completions API, scripted mock, retrieval-majority oracle),
//! a content-addressed response cache, and output parsing into [`TripMode`].

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::http::{join_url, resolve_credential, HttpError, JsonClient, RetryPolicy};
use crate::retrieval::RetrievalResult;
use crate::serialization::{Document, DocumentStore};
use crate::trip_data::{majority_of_histogram, TripMode, NUM_MODES};

/// Task instruction placed at the top of every prompt.
pub const INSTRUCTION: &str = "You are a transportation behavior expert that predicts trip mode. \
Based on the provided trip details and similar past trips, what is the most likely trip mode? \
Only output one of: [Drive, Walk, Transit, Bike/Micromobility].";

/// Appended to the prompt when the first answer could not be parsed.
pub const RETRY_SUFFIX: &str = "\nAnswer with exactly one word from the list.";

const QUERY_HEADER: &str = "\nTrip details: \n";
const CONTEXT_HEADER: &str = "\nRelevant past trips: \n";

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("context document {0} missing from the corpus")]
    MissingContext(u64),
    #[error("context document {0} has no label")]
    UnlabeledContext(u64),
    #[error("query document {0} carries a label")]
    LabeledQuery(u64),
    #[error("no scripted response for prompt {0}")]
    MockMiss(String),
    #[error("backend returned no message content")]
    EmptyResponse,
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("response cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed cache line {line} in {path}: {source}")]
    CacheFormat {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub instruction: String,
    pub query_block: String,
    /// `None` for zero-shot prompts.
    pub context_block: Option<String>,
    pub rendered: String,
}

impl PromptSpec {
    pub fn is_zero_shot(&self) -> bool {
        self.context_block.is_none()
    }

    /// Hex SHA-256 of the rendered prompt.
    pub fn sha256(&self) -> String {
        sha256_hex(&self.rendered)
    }

    /// The same prompt with the format reminder appended.
    pub fn with_retry_suffix(&self) -> PromptSpec {
        let mut p = self.clone();
        p.rendered.push_str(RETRY_SUFFIX);
        p
    }

    /// Message body that follows the instruction (the user turn for chat
    /// backends).
    pub fn user_content(&self) -> &str {
        self.rendered[self.instruction.len()..].trim_start_matches('\n')
    }

    /// Labels of the context documents, in prompt order.
    pub fn context_modes(&self) -> Vec<TripMode> {
        static LABEL: LazyLock<Regex> =
            LazyLock::new(|| Regex::new(r"Trip mode is ([^.\n]+)\.").expect("valid label regex"));
        let Some(ctx) = &self.context_block else {
            return Vec::new();
        };
        LABEL
            .captures_iter(ctx)
            .filter_map(|c| c[1].parse().ok())
            .collect()
    }
}

fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Assemble instruction, query trip and (optionally) the retrieved context
/// documents, label sentences included, in retrieval order.
pub fn build_prompt(
    query_doc: &Document,
    context: Option<&RetrievalResult>,
    corpus: &DocumentStore,
) -> Result<PromptSpec, LlmError> {
    if query_doc.mode.is_some() {
        return Err(LlmError::LabeledQuery(query_doc.doc_id));
    }
    let query_block = query_doc.unlabeled_text().to_string();
    let context_block = match context {
        None => None,
        Some(result) => {
            let texts = result
                .items
                .iter()
                .map(|item| {
                    let doc = corpus.get(item.doc_id).ok_or(LlmError::MissingContext(item.doc_id))?;
                    if doc.mode.is_none() {
                        return Err(LlmError::UnlabeledContext(item.doc_id));
                    }
                    Ok(doc.text.as_str())
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(texts.join("\n\n"))
        }
    };
    let mut rendered = String::with_capacity(INSTRUCTION.len() + query_block.len() * 6);
    rendered.push_str(INSTRUCTION);
    rendered.push_str(QUERY_HEADER);
    rendered.push_str(&query_block);
    if let Some(ctx) = &context_block {
        rendered.push_str(CONTEXT_HEADER);
        rendered.push_str(ctx);
    }
    Ok(PromptSpec {
        instruction: INSTRUCTION.to_string(),
        query_block,
        context_block,
        rendered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
    Oracle,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Remote => "remote",
            BackendKind::Mock => "mock",
            BackendKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "remote" => Ok(BackendKind::Remote),
            "mock" => Ok(BackendKind::Mock),
            "oracle" => Ok(BackendKind::Oracle),
            _ => Err(format!("unknown backend {s:?}")),
        }
    }
}

/// Scripted responses for the mock backend, keyed by prompt SHA-256.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub responses: HashMap<String, String>,
    /// Returned for unscripted prompts; `None` makes misses an error.
    pub default: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmBackendConfig {
    pub backend: BackendKind,
    pub model_name: String,
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub api_key_env: String,
    /// Resolved credential; never written back out.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub cache_path: Option<PathBuf>,
    /// Answer for zero-shot oracle prompts and the fallback when a zero-shot
    /// answer cannot be parsed. Runs fill it from the training split when
    /// unset; otherwise Drive.
    pub majority_mode: Option<TripMode>,
    pub mock: MockScript,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        LlmBackendConfig {
            backend: BackendKind::Oracle,
            model_name: "gpt-4o".into(),
            endpoint: "https://api.openai.com/v1".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 120,
            api_key_env: "OPENAI_API_KEY".into(),
            api_key: None,
            cache_path: None,
            majority_mode: None,
            mock: MockScript::default(),
        }
    }
}

impl LlmBackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.model_name.is_empty() {
            return Err(LlmError::Config("model_name is empty".into()));
        }
        Ok(())
    }

    pub fn zero_shot_mode(&self) -> TripMode {
        self.majority_mode.unwrap_or(TripMode::Drive)
    }

    /// Name recorded on predictions, e.g. `oracle` or `remote:gpt-4o`.
    pub fn label(&self) -> String {
        match self.backend {
            BackendKind::Remote => format!("remote:{}", self.model_name),
            other => other.name().to_string(),
        }
    }
}

/// Reasoning models reject a sampling temperature.
pub fn accepts_temperature(model: &str) -> bool {
    let m = model.to_ascii_lowercase();
    let mut chars = m.chars();
    !(chars.next() == Some('o') && chars.next().is_some_and(|c| c.is_ascii_digit()))
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn complete(&self, prompt: &PromptSpec) -> Result<String, LlmError>;
}

/// Majority label among the context documents; ties go to the label that
/// appears first (the highest-ranked document). Zero-shot prompts get the
/// configured majority mode.
#[derive(Debug, Clone, Copy)]
pub struct OracleBackend {
    pub zero_shot_mode: TripMode,
}

impl ChatBackend for OracleBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }

    fn complete(&self, prompt: &PromptSpec) -> Result<String, LlmError> {
        let modes = prompt.context_modes();
        Ok(ranked_majority(&modes).unwrap_or(self.zero_shot_mode).label().to_string())
    }
}

/// Most frequent mode; ties resolved by earliest position in `modes`.
pub fn ranked_majority(modes: &[TripMode]) -> Option<TripMode> {
    let mut counts = [0usize; NUM_MODES];
    for m in modes {
        counts[m.index()] += 1;
    }
    let best = *counts.iter().max()?;
    modes.iter().copied().find(|m| counts[m.index()] == best)
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script }
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(&self, prompt: &PromptSpec) -> Result<String, LlmError> {
        let hash = prompt.sha256();
        self.script
            .responses
            .get(&hash)
            .or(self.script.default.as_ref())
            .cloned()
            .ok_or(LlmError::MockMiss(hash))
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// Chat-completions client: instruction as the system message, trip details
/// and context as the user message.
pub struct RemoteChatBackend {
    model: String,
    url: String,
    temperature: Option<f64>,
    client: JsonClient,
}

impl RemoteChatBackend {
    pub fn new(config: &LlmBackendConfig) -> Result<Self, LlmError> {
        let bearer = resolve_credential(config.api_key.as_deref(), &config.api_key_env)?;
        let policy = RetryPolicy {
            max_attempts: config.max_retries.max(1),
            timeout_secs: config.timeout_secs,
            ..RetryPolicy::default()
        };
        Ok(RemoteChatBackend {
            model: config.model_name.clone(),
            url: join_url(&config.endpoint, "chat/completions"),
            temperature: accepts_temperature(&config.model_name).then_some(config.temperature),
            client: JsonClient::new(policy, bearer),
        })
    }
}

impl ChatBackend for RemoteChatBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn complete(&self, prompt: &PromptSpec) -> Result<String, LlmError> {
        let req = ChatRequest {
            model: &self.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &prompt.instruction,
                },
                ChatMessage {
                    role: "user",
                    content: prompt.user_content(),
                },
            ],
            temperature: self.temperature,
        };
        let resp: ChatResponse = self.client.post(&self.url, &req)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or(LlmError::EmptyResponse)
    }
}

pub fn build_backend(config: &LlmBackendConfig) -> Result<Box<dyn ChatBackend>, LlmError> {
    config.validate()?;
    Ok(match config.backend {
        BackendKind::Remote => Box::new(RemoteChatBackend::new(config)?),
        BackendKind::Mock => Box::new(MockBackend::new(config.mock.clone())),
        BackendKind::Oracle => Box::new(OracleBackend {
            zero_shot_mode: config.zero_shot_mode(),
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub backend: String,
    pub model: String,
    pub prompt_sha256: String,
    pub response: String,
    pub timestamp: u64,
}

/// Cache key over everything that determines a response.
pub fn cache_key(backend: &str, model: &str, prompt_sha256: &str, temperature: f64) -> String {
    let mut h = Sha256::new();
    for part in [backend, model, prompt_sha256] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    h.update(temperature.to_bits().to_le_bytes());
    hex::encode(h.finalize())
}

/// Append-only JSONL response cache. Existing entries are loaded on open;
/// new ones are appended through a single locked writer.
pub struct ResponseCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, String>>,
    writer: Mutex<File>,
}

impl ResponseCache {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let io_err = |source| LlmError::Cache {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = HashMap::new();
        let mut valid_len = None;
        let mut needs_newline = false;
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(io_err)?;
            needs_newline = !text.is_empty() && !text.ends_with('\n');
            let mut offset = 0;
            let mut lines = text.split_inclusive('\n').enumerate().peekable();
            while let Some((i, line)) = lines.next() {
                let is_last = lines.peek().is_none();
                if !line.trim().is_empty() {
                    match serde_json::from_str::<CacheEntry>(line) {
                        Ok(e) => {
                            entries.insert(e.key, e.response);
                        }
                        // a torn final line from an interrupted append
                        Err(_) if is_last => {
                            log::warn!("{}: dropping partial last line", path.display());
                            valid_len = Some(offset as u64);
                        }
                        Err(source) => {
                            return Err(LlmError::CacheFormat {
                                path: path.to_path_buf(),
                                line: i + 1,
                                source,
                            })
                        }
                    }
                }
                offset += line.len();
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        if let Some(len) = valid_len {
            file.set_len(len).map_err(io_err)?;
        } else if needs_newline {
            file.write_all(b"\n").map_err(io_err)?;
        }
        Ok(ResponseCache {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            writer: Mutex::new(file),
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<(), LlmError> {
        let mut line = serde_json::to_string(&entry).expect("cache entry serializes");
        line.push('\n');
        {
            let mut w = self.writer.lock().expect("cache writer lock");
            w.write_all(line.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|source| LlmError::Cache {
                    path: self.path.clone(),
                    source,
                })?;
        }
        self.entries.lock().expect("cache lock").insert(entry.key, entry.response);
        Ok(())
    }
}

/// Parse a model answer. Returns `None` when no single label can be
/// identified; the caller decides the fallback.
pub fn parse_mode(raw: &str) -> Option<TripMode> {
    let trimmed = raw.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation() && c != '/');
    if let Some(m) = TripMode::ALL.iter().find(|m| m.label().eq_ignore_ascii_case(trimmed)) {
        return Some(*m);
    }
    let lower = raw.to_ascii_lowercase();
    let hits: Vec<TripMode> = TripMode::ALL
        .iter()
        .copied()
        .filter(|m| match m {
            TripMode::BikeMicromobility => lower.contains("bike") || lower.contains("micromobility"),
            other => lower.contains(&other.label().to_ascii_lowercase()),
        })
        .collect();
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_doc_id: u64,
    pub mode: TripMode,
    pub raw_output: String,
    pub backend: String,
    pub fallback_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalResult>,
}

/// A backend plus optional cache, with call accounting.
pub struct LlmGateway {
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    model_name: String,
    temperature: f64,
    label: String,
    majority_mode: TripMode,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl LlmGateway {
    pub fn new(config: &LlmBackendConfig) -> Result<Self, LlmError> {
        let backend = build_backend(config)?;
        let cache = config.cache_path.as_deref().map(ResponseCache::open).transpose()?;
        Ok(Self::with_backend(config, backend, cache))
    }

    pub fn with_backend(config: &LlmBackendConfig, backend: Box<dyn ChatBackend>, cache: Option<ResponseCache>) -> Self {
        LlmGateway {
            backend,
            cache,
            model_name: config.model_name.clone(),
            temperature: config.temperature,
            label: config.label(),
            majority_mode: config.zero_shot_mode(),
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    /// Calls that reached the backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub fn complete(&self, prompt: &PromptSpec) -> Result<String, LlmError> {
        let prompt_sha = prompt.sha256();
        let backend = self.backend.kind().name();
        let key = cache_key(backend, &self.model_name, &prompt_sha, self.temperature);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.backend_calls.fetch_add(1, Ordering::Relaxed);
        let response = self.backend.complete(prompt)?;
        if let Some(cache) = &self.cache {
            cache.insert(CacheEntry {
                key,
                backend: backend.to_string(),
                model: self.model_name.clone(),
                prompt_sha256: prompt_sha,
                response: response.clone(),
                timestamp: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            })?;
        }
        Ok(response)
    }

    /// Build the prompt, ask the backend, parse. An unparseable answer is
    /// retried once with a format reminder; if that fails too the context
    /// majority (or the configured majority for zero-shot) is used.
    pub fn predict_one(
        &self,
        query_doc: &Document,
        retrieval: Option<RetrievalResult>,
        corpus: &DocumentStore,
    ) -> Result<Prediction, LlmError> {
        let prompt = build_prompt(query_doc, retrieval.as_ref(), corpus)?;
        let first = self.complete(&prompt)?;
        let (mode, raw_output, fallback_used) = match parse_mode(&first) {
            Some(m) => (m, first, false),
            None => {
                let second = self.complete(&prompt.with_retry_suffix())?;
                match parse_mode(&second) {
                    Some(m) => (m, second, false),
                    None => {
                        let fallback = retrieval
                            .as_ref()
                            .and_then(context_majority)
                            .unwrap_or(self.majority_mode);
                        (fallback, second, true)
                    }
                }
            }
        };
        Ok(Prediction {
            query_doc_id: query_doc.doc_id,
            mode,
            raw_output,
            backend: self.label.clone(),
            fallback_used,
            retrieval,
        })
    }
}

/// Majority class of a retrieval set; ties go to canonical mode order.
pub fn context_majority(result: &RetrievalResult) -> Option<TripMode> {
    if result.items.is_empty() {
        return None;
    }
    majority_of_histogram(&result.class_counts())
}
