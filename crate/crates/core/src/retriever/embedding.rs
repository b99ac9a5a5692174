//! Frozen embedding providers behind one trait: an OpenAI-compatible HTTP
//! embeddings client, a deterministic hash-seeded provider for tests and dry
//! runs, and a content-hash disk cache usable around either.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RetrieverError;
use crate::gateway::RetryPolicy;
use crate::util::fnv1a64;

/// Source of frozen text embeddings. Every vector must have exactly
/// `dimension()` entries; [`embed`] enforces it.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, RetrieverError>;
}

/// Embed an instruction plus question-answer pair with fixed separators.
pub fn embed(
    provider: &dyn EmbeddingProvider,
    instruction: &str,
    question: &str,
    answer: &str,
) -> Result<Vec<f64>, RetrieverError> {
    let text = format!("{instruction}\n[Q] {question}\n[A] {answer}");
    let vector = provider.embed_text(&text)?;
    if vector.len() != provider.dimension() {
        return Err(RetrieverError::ProviderDimensionMismatch {
            provider_id: provider.provider_id().to_string(),
            expected: provider.dimension(),
            got: vector.len(),
        });
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(RetrieverError::NonFiniteEmbedding {
            provider_id: provider.provider_id().to_string(),
        });
    }
    Ok(vector)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Api,
    DeterministicTest,
}

/// One embedding provider as declared in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_id: String,
    pub mode: ProviderMode,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default)]
    pub auth_env_var: String,
}

pub fn build_provider(
    config: &ProviderConfig,
) -> Result<Box<dyn EmbeddingProvider>, RetrieverError> {
    if config.dimension == 0 {
        return Err(RetrieverError::InvalidProviderConfig {
            provider_id: config.provider_id.clone(),
            reason: "dimension must be positive".into(),
        });
    }
    match config.mode {
        ProviderMode::DeterministicTest => Ok(Box::new(HashEmbeddingProvider::new(
            &config.provider_id,
            config.dimension,
        ))),
        ProviderMode::Api => {
            let endpoint =
                config
                    .endpoint
                    .clone()
                    .ok_or_else(|| RetrieverError::InvalidProviderConfig {
                        provider_id: config.provider_id.clone(),
                        reason: "api provider needs an endpoint".into(),
                    })?;
            let key = if config.auth_env_var.is_empty() {
                None
            } else {
                Some(std::env::var(&config.auth_env_var).map_err(|_| {
                    RetrieverError::MissingCredential {
                        var: config.auth_env_var.clone(),
                    }
                })?)
            };
            Ok(Box::new(ApiEmbeddingProvider::new(
                &config.provider_id,
                &endpoint,
                config.model_name.as_deref().unwrap_or(&config.provider_id),
                key,
                config.dimension,
                RetryPolicy::default(),
            )))
        }
    }
}

/// Pure function of the input text: a unit vector drawn from an RNG seeded
/// by the text's hash. Distinct texts get (near certainly) distinct
/// directions.
pub struct HashEmbeddingProvider {
    id: String,
    dimension: usize,
}

impl HashEmbeddingProvider {
    pub fn new(id: &str, dimension: usize) -> Self {
        Self {
            id: id.to_string(),
            dimension,
        }
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, RetrieverError> {
        let seed = fnv1a64(format!("{}\u{1f}{text}", self.id).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..self.dimension)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        } else {
            v[0] = 1.0;
        }
        Ok(v)
    }
}

/// OpenAI-compatible embeddings endpoint client.
pub struct ApiEmbeddingProvider {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl ApiEmbeddingProvider {
    pub fn new(
        id: &str,
        endpoint: &str,
        model: &str,
        api_key: Option<String>,
        dimension: usize,
        retry: RetryPolicy,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(true)
            .build();
        Self {
            id: id.to_string(),
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            dimension,
            retry,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    fn request_once(&self, text: &str) -> Result<Vec<f64>, RetrieverError> {
        #[derive(Deserialize)]
        struct EmbeddingResponse {
            data: Vec<EmbeddingEntry>,
        }
        #[derive(Deserialize)]
        struct EmbeddingEntry {
            embedding: Vec<f64>,
        }

        let body = serde_json::json!({ "model": self.model, "input": text }).to_string();
        let mut request = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("authorization", format!("Bearer {key}"));
        }
        let text_body = match request.send(body.as_str()) {
            Ok(mut response) => response.body_mut().read_to_string().map_err(|e| {
                RetrieverError::Transport {
                    message: format!("reading embedding body: {e}"),
                }
            })?,
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                return Err(RetrieverError::Transport {
                    message: format!("http status {code}"),
                })
            }
            Err(ureq::Error::StatusCode(code)) => {
                return Err(RetrieverError::InvalidProviderResponse {
                    message: format!("http status {code}"),
                })
            }
            Err(e) => {
                return Err(RetrieverError::Transport {
                    message: e.to_string(),
                })
            }
        };
        let parsed: EmbeddingResponse = serde_json::from_str(&text_body).map_err(|e| {
            RetrieverError::InvalidProviderResponse {
                message: format!("malformed embedding body: {e}"),
            }
        })?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|entry| entry.embedding)
            .ok_or_else(|| RetrieverError::InvalidProviderResponse {
                message: "embedding response has no data".into(),
            })
    }
}

impl EmbeddingProvider for ApiEmbeddingProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, RetrieverError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay_for(attempt - 1));
            }
            match self.request_once(text) {
                Ok(v) => return Ok(v),
                Err(RetrieverError::Transport { message }) => {
                    log::warn!(
                        "embedding provider {} transport failure (attempt {}): {message}",
                        self.id,
                        attempt + 1
                    );
                    last = message;
                }
                Err(other) => return Err(other),
            }
        }
        Err(RetrieverError::TransportExhausted { attempts, last })
    }
}

#[derive(Serialize, Deserialize)]
struct CachedEmbedding {
    text_sha256: String,
    dimension: usize,
    vector: Vec<f64>,
}

/// Read-through disk cache keyed by `(provider_id, sha256(context + text))`.
/// The context string (typically the model name) keeps entries from leaking
/// across a provider id re-pointed at a different model.
pub struct CachedEmbeddingProvider {
    inner: Box<dyn EmbeddingProvider>,
    cache_dir: PathBuf,
    context: String,
}

impl CachedEmbeddingProvider {
    pub fn new(
        inner: Box<dyn EmbeddingProvider>,
        cache_dir: PathBuf,
        context: impl Into<String>,
    ) -> Self {
        Self {
            inner,
            cache_dir,
            context: context.into(),
        }
    }

    fn cache_path(&self, text: &str) -> (PathBuf, String) {
        let digest = Sha256::digest(format!("{}\u{1f}{text}", self.context).as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let path = self
            .cache_dir
            .join(self.inner.provider_id())
            .join(&hex[..2])
            .join(format!("{hex}.json"));
        (path, hex)
    }
}

impl EmbeddingProvider for CachedEmbeddingProvider {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, RetrieverError> {
        let (path, hex) = self.cache_path(text);
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(cached) = serde_json::from_slice::<CachedEmbedding>(&bytes) {
                if cached.dimension == self.inner.dimension() {
                    return Ok(cached.vector);
                }
            }
        }
        let vector = self.inner.embed_text(text)?;
        let entry = CachedEmbedding {
            text_sha256: hex,
            dimension: self.inner.dimension(),
            vector: vector.clone(),
        };
        if let Some(parent) = path.parent() {
            let _ = fs::create_dir_all(parent);
        }
        let tmp = path.with_extension("tmp");
        if fs::write(&tmp, serde_json::to_vec(&entry).expect("serializable")).is_ok() {
            let _ = fs::rename(&tmp, &path);
        }
        Ok(vector)
    }
}

/// Wrap a provider with a disk cache rooted at `cache_dir`.
pub fn with_cache(
    inner: Box<dyn EmbeddingProvider>,
    cache_dir: &Path,
    context: &str,
) -> Box<dyn EmbeddingProvider> {
    Box::new(CachedEmbeddingProvider::new(
        inner,
        cache_dir.to_path_buf(),
        context,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_provider_is_pure_and_unit_norm() {
        let p = HashEmbeddingProvider::new("hash-8", 8);
        let a = embed(&p, "inst", "q", "answer one").unwrap();
        let b = embed(&p, "inst", "q", "answer one").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn different_answers_same_question_differ() {
        let p = HashEmbeddingProvider::new("hash-8", 8);
        let a = embed(&p, "inst", "q", "answer one").unwrap();
        let b = embed(&p, "inst", "q", "answer two").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn dimension_contract_enforced() {
        struct Broken;
        impl EmbeddingProvider for Broken {
            fn provider_id(&self) -> &str {
                "broken"
            }
            fn dimension(&self) -> usize {
                4
            }
            fn embed_text(&self, _text: &str) -> Result<Vec<f64>, RetrieverError> {
                Ok(vec![1.0, 2.0])
            }
        }
        assert!(matches!(
            embed(&Broken, "i", "q", "a"),
            Err(RetrieverError::ProviderDimensionMismatch { expected: 4, got: 2, .. })
        ));
    }

    #[test]
    fn cache_roundtrips_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let cached = with_cache(
            Box::new(HashEmbeddingProvider::new("hash-6", 6)),
            dir.path(),
            "emb-model",
        );
        let a = cached.embed_text("some text").unwrap();
        let b = cached.embed_text("some text").unwrap();
        assert_eq!(a, b);
        // A fresh wrapper over the same dir hits the persisted entry.
        let cached2 = with_cache(
            Box::new(HashEmbeddingProvider::new("hash-6", 6)),
            dir.path(),
            "emb-model",
        );
        assert_eq!(cached2.embed_text("some text").unwrap(), a);
        let files: Vec<_> = walk(dir.path());
        assert!(files.iter().any(|p| p.extension().is_some_and(|e| e == "json")));
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let Ok(entries) = fs::read_dir(dir) {
            for entry in entries.flatten() {
                let path = entry.path();
                if path.is_dir() {
                    out.extend(walk(&path));
                } else {
                    out.push(path);
                }
            }
        }
        out
    }
}
