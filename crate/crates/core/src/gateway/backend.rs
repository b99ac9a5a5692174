//! Chat-completion backends: an OpenAI-compatible HTTP client, deterministic
//! mocks for tests and dry runs, and a content-hash response cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    extract_first_example, extract_judgement_scores, extract_meta_current, extract_target,
    GatewayError, META_DIRECTIVE_MARKER,
};
use crate::dataset::EvaluationRecord;
use crate::util::fnv1a64;

/// A chat-completion backend. One call, one prompt in, one text out.
/// Implementations must be callable concurrently.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, prompt: &str) -> Result<String, GatewayError>;
}

/// Bounded exponential backoff for transient transport failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 250,
            max_delay_ms: 4_000,
        }
    }
}

impl RetryPolicy {
    /// Zero-delay policy for tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << attempt.min(16));
        Duration::from_millis(exp.min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Mock,
}

/// Decoding parameters sent to HTTP backends. Temperature defaults to 0 for
/// reproducible judging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

/// Configured mock behavior. The fixture table is keyed by record id and is
/// resolved against the loaded dataset when the backend is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MockMode {
    #[default]
    KeyedHash,
    Fixture {
        scores: BTreeMap<String, u8>,
    },
}

/// One backend as declared in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend_id: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub decoding: DecodingParams,
    /// Name of the environment variable holding the bearer credential.
    /// Empty means the endpoint needs no auth header.
    #[serde(default)]
    pub auth_env_var: String,
    #[serde(default)]
    pub mock: MockMode,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.decoding.temperature < 0.0 {
            return Err(GatewayError::InvalidBackendConfig {
                backend_id: self.backend_id.clone(),
                reason: "temperature must be >= 0".into(),
            });
        }
        if self.decoding.max_tokens == 0 {
            return Err(GatewayError::InvalidBackendConfig {
                backend_id: self.backend_id.clone(),
                reason: "max_tokens must be positive".into(),
            });
        }
        if self.kind == BackendKind::HttpChat && self.endpoint.is_none() {
            return Err(GatewayError::InvalidBackendConfig {
                backend_id: self.backend_id.clone(),
                reason: "http_chat backend needs an endpoint".into(),
            });
        }
        Ok(())
    }
}

/// Build a backend from its configuration. Fixture mocks need the dataset
/// records to resolve record ids into prompt content.
pub fn build_backend(
    config: &BackendConfig,
    fixture_records: Option<&[EvaluationRecord]>,
) -> Result<Box<dyn ChatBackend>, GatewayError> {
    config.validate()?;
    match config.kind {
        BackendKind::HttpChat => {
            let key = if config.auth_env_var.is_empty() {
                None
            } else {
                Some(std::env::var(&config.auth_env_var).map_err(|_| {
                    GatewayError::MissingCredential {
                        var: config.auth_env_var.clone(),
                    }
                })?)
            };
            Ok(Box::new(HttpBackend::new(
                &config.backend_id,
                config.endpoint.as_deref().expect("validated"),
                &config.model_name,
                key,
                config.decoding.clone(),
            )))
        }
        BackendKind::Mock => match &config.mock {
            MockMode::KeyedHash => Ok(Box::new(MockBackend::keyed_hash(&config.backend_id))),
            MockMode::Fixture { scores } => {
                let records = fixture_records.ok_or_else(|| GatewayError::InvalidBackendConfig {
                    backend_id: config.backend_id.clone(),
                    reason: "fixture mock needs dataset records to resolve record ids".into(),
                })?;
                let mock =
                    MockBackend::fixture_from_records(&config.backend_id, records, scores)?;
                Ok(Box::new(mock))
            }
        },
    }
}

/// Ordered collection of live backends, looked up by id.
#[derive(Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Box<dyn ChatBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, backend: Box<dyn ChatBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn get(&self, id: &str) -> Result<&dyn ChatBackend, GatewayError> {
        self.backends
            .get(id)
            .map(|b| b.as_ref())
            .ok_or_else(|| GatewayError::UnknownBackend { id: id.to_string() })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.backends.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.backends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backends.is_empty()
    }

    /// Build every configured backend. HTTP backends get a disk response
    /// cache when `cache_dir` is given; mocks are cheap and stay uncached.
    pub fn from_configs(
        configs: &[BackendConfig],
        fixture_records: Option<&[EvaluationRecord]>,
        cache_dir: Option<&Path>,
    ) -> Result<Self, GatewayError> {
        let mut registry = Self::new();
        for config in configs {
            if registry.backends.contains_key(&config.backend_id) {
                return Err(GatewayError::InvalidBackendConfig {
                    backend_id: config.backend_id.clone(),
                    reason: "duplicate backend_id".into(),
                });
            }
            let backend = build_backend(config, fixture_records)?;
            let backend: Box<dyn ChatBackend> = match (config.kind, cache_dir) {
                (BackendKind::HttpChat, Some(dir)) => Box::new(CachingBackend::new(
                    backend,
                    dir.to_path_buf(),
                    config.model_name.clone(),
                )),
                _ => backend,
            };
            registry.insert(backend);
        }
        Ok(registry)
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    decoding: DecodingParams,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(
        id: &str,
        endpoint: &str,
        model: &str,
        api_key: Option<String>,
        decoding: DecodingParams,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(true)
            .build();
        Self {
            id: id.to_string(),
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            decoding,
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, prompt: &str) -> Result<String, GatewayError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.decoding.temperature,
            "max_tokens": self.decoding.max_tokens,
        })
        .to_string();

        let mut request = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("authorization", format!("Bearer {key}"));
        }

        let text = match request.send(body.as_str()) {
            Ok(mut response) => response.body_mut().read_to_string().map_err(|e| {
                GatewayError::Transport {
                    message: format!("reading response body: {e}"),
                }
            })?,
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                return Err(GatewayError::Transport {
                    message: format!("http status {code}"),
                })
            }
            Err(ureq::Error::StatusCode(code)) => {
                return Err(GatewayError::InvalidResponse {
                    message: format!("http status {code}"),
                })
            }
            Err(e) => {
                return Err(GatewayError::Transport {
                    message: e.to_string(),
                })
            }
        };

        let parsed: ChatCompletionResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::InvalidResponse {
                message: format!("malformed chat completion body: {e}"),
            })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::InvalidResponse {
                message: "chat completion returned no choices".into(),
            })?;
        Ok(choice.message.content)
    }
}

/// Deterministic in-process backend.
///
/// `KeyedHash` answers every prompt kind (scoring, integration, instruction
/// improvement) as a pure function of `(backend_id, prompt)`, which makes
/// whole pipelines runnable with zero network access. The fixture variants
/// answer from tables and are the hook oracle tests use.
pub struct MockBackend {
    id: String,
    behavior: MockBehavior,
}

/// Table key for fixture lookups: question and answer joined by a unit
/// separator, the same content the prompt builder embeds.
pub fn fixture_key(question: &str, answer: &str) -> String {
    format!("{question}\u{1f}{answer}")
}

pub enum MockBehavior {
    /// Score derived from a keyed hash of the prompt.
    KeyedHash,
    /// Score looked up by the prompt's target question/answer pair.
    /// Missing keys yield an unparseable reply (exercises failure handling)
    /// unless a default score is given.
    TargetFixture {
        scores: BTreeMap<String, u8>,
        default: Option<u8>,
    },
    /// Score looked up by the first in-context example's question/answer
    /// pair; drives contribution-ranking tests.
    ExampleFixture {
        scores: BTreeMap<String, u8>,
        default: u8,
    },
    /// Integrates judge scores from an integration prompt by arithmetic
    /// mean, rounded half up. Testing stand-in for an integrator model.
    AverageIntegrator,
    /// Always the same text.
    FixedText(String),
}

impl MockBackend {
    pub fn new(id: &str, behavior: MockBehavior) -> Self {
        Self {
            id: id.to_string(),
            behavior,
        }
    }

    pub fn keyed_hash(id: &str) -> Self {
        Self::new(id, MockBehavior::KeyedHash)
    }

    pub fn fixed_text(id: &str, text: &str) -> Self {
        Self::new(id, MockBehavior::FixedText(text.to_string()))
    }

    pub fn average_integrator(id: &str) -> Self {
        Self::new(id, MockBehavior::AverageIntegrator)
    }

    /// Target-keyed fixture from a `record_id -> score` table.
    pub fn fixture_from_records(
        id: &str,
        records: &[EvaluationRecord],
        by_record_id: &BTreeMap<String, u8>,
    ) -> Result<Self, GatewayError> {
        let mut scores = BTreeMap::new();
        for (record_id, score) in by_record_id {
            let record = records
                .iter()
                .find(|r| &r.record_id == record_id)
                .ok_or_else(|| GatewayError::InvalidBackendConfig {
                    backend_id: id.to_string(),
                    reason: format!("fixture references unknown record {record_id:?}"),
                })?;
            if scores
                .insert(fixture_key(&record.question, &record.answer), *score)
                .is_some()
            {
                log::warn!(
                    "fixture mock {id}: record {record_id} shares question/answer text with another entry; the later score wins"
                );
            }
        }
        Ok(Self::new(
            id,
            MockBehavior::TargetFixture {
                scores,
                default: None,
            },
        ))
    }

    /// Example-keyed fixture from a `record_id -> score` table.
    pub fn example_fixture_from_records(
        id: &str,
        records: &[EvaluationRecord],
        by_record_id: &BTreeMap<String, u8>,
        default: u8,
    ) -> Result<Self, GatewayError> {
        let target = Self::fixture_from_records(id, records, by_record_id)?;
        match target.behavior {
            MockBehavior::TargetFixture { scores, .. } => Ok(Self::new(
                id,
                MockBehavior::ExampleFixture { scores, default },
            )),
            _ => unreachable!(),
        }
    }

    fn hash_score(&self, prompt: &str) -> u8 {
        let h = fnv1a64(format!("{}\u{1f}{prompt}", self.id).as_bytes());
        1 + (h % 5) as u8
    }

    fn keyed_hash_reply(&self, prompt: &str) -> String {
        if prompt.contains(META_DIRECTIVE_MARKER) {
            // Instruction-improvement request: echo the current instruction
            // with a deterministic extra rule so versions evolve.
            let current = extract_meta_current(prompt).unwrap_or_default();
            let tag = fnv1a64(format!("{}\u{1f}{prompt}", self.id).as_bytes());
            return format!(
                "<INSTRUCTION>\n{current}\nAdditional rule {tag:016x}: weigh factual precision before style.\n</INSTRUCTION>"
            );
        }
        let score = self.hash_score(prompt);
        let tag = fnv1a64(format!("{}\u{1f}{prompt}", self.id).as_bytes());
        format!("SCORE: {score}\nREASON: keyed mock judgement {tag:016x}")
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, prompt: &str) -> Result<String, GatewayError> {
        let reply = match &self.behavior {
            MockBehavior::KeyedHash => self.keyed_hash_reply(prompt),
            MockBehavior::TargetFixture { scores, default } => {
                let looked_up = extract_target(prompt)
                    .and_then(|(q, a)| scores.get(&fixture_key(&q, &a)).copied())
                    .or(*default);
                match looked_up {
                    Some(score) => format!("SCORE: {score}\nREASON: fixture judgement"),
                    None => "no judgement available for this input".to_string(),
                }
            }
            MockBehavior::ExampleFixture { scores, default } => {
                let score = extract_first_example(prompt)
                    .and_then(|(q, a)| scores.get(&fixture_key(&q, &a)).copied())
                    .unwrap_or(*default);
                format!("SCORE: {score}\nREASON: example fixture judgement")
            }
            MockBehavior::AverageIntegrator => {
                let member_scores = extract_judgement_scores(prompt);
                if member_scores.is_empty() {
                    "no judgements found".to_string()
                } else {
                    let sum: u32 = member_scores.iter().map(|&s| u32::from(s)).sum();
                    let n = member_scores.len() as u32;
                    // Mean rounded half up.
                    let rounded = (2 * sum + n) / (2 * n);
                    format!("SCORE: {rounded}\nREASON: average of {n} judgements")
                }
            }
            MockBehavior::FixedText(text) => text.clone(),
        };
        Ok(reply)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedCompletion {
    prompt_sha256: String,
    response: String,
}

/// Read-through disk cache keyed by `(backend_id, sha256(context + prompt))`,
/// so repeated runs never re-issue a completed request. The context string
/// (typically the model name) keeps entries from leaking across a backend id
/// that was re-pointed at a different model.
pub struct CachingBackend {
    inner: Box<dyn ChatBackend>,
    cache_dir: PathBuf,
    context: String,
}

impl CachingBackend {
    pub fn new(inner: Box<dyn ChatBackend>, cache_dir: PathBuf, context: impl Into<String>) -> Self {
        Self {
            inner,
            cache_dir,
            context: context.into(),
        }
    }

    fn cache_path(&self, prompt: &str) -> PathBuf {
        let digest = Sha256::digest(format!("{}\u{1f}{prompt}", self.context).as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.cache_dir
            .join(self.inner.id())
            .join(&hex[..2])
            .join(format!("{hex}.json"))
    }
}

impl ChatBackend for CachingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn send(&self, prompt: &str) -> Result<String, GatewayError> {
        let path = self.cache_path(prompt);
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(cached) = serde_json::from_slice::<CachedCompletion>(&bytes) {
                log::debug!("completion cache hit: {}", path.display());
                return Ok(cached.response);
            }
        }
        let response = self.inner.send(prompt)?;
        let entry = CachedCompletion {
            prompt_sha256: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            response: response.clone(),
        };
        if let Some(parent) = path.parent() {
            let _ = fs::create_dir_all(parent);
        }
        let tmp = path.with_extension("tmp");
        if fs::write(&tmp, serde_json::to_vec(&entry).expect("serializable")).is_ok() {
            let _ = fs::rename(&tmp, &path);
        }
        Ok(response)
    }
}
