//! TOML run configuration and construction of the backends it names.
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analyzer::AnalyzerConfig;
use crate::dense_index::{EmbeddingBackend, Embedder, HashEmbedding, ScriptedEmbedding};
use crate::error::{Error, Result};
use crate::http::{HttpChatBackend, HttpEmbeddingBackend, HttpEndpoint, HttpRerankBackend};
use crate::llm_gateway::{mock_backend, CallStats, ChatBackend, Limiter, LlmGateway, MockRule, ResponseCache, RetryPolicy};
use crate::pipeline::{Backends, PipelineConfig};
use crate::rerank::{BigramOverlapReranker, RerankBackend, Reranker};
use crate::sparse_index::Bm25Params;
use crate::stages::{PromptSet, TemplatePaths};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub chat_url: Option<String>,
    pub embedding_url: Option<String>,
    pub rerank_url: Option<String>,
    /// Environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub auth_header: String,
    /// Prefix put before the key in the auth header value.
    pub auth_scheme: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub max_concurrent_requests: usize,
    pub embedding_batch_size: usize,
    pub embedding_max_inflight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            chat_url: None,
            embedding_url: None,
            rerank_url: None,
            api_key_env: None,
            auth_header: "Authorization".into(),
            auth_scheme: "Bearer ".into(),
            timeout_secs: 120,
            retry: RetryPolicy::default(),
            max_concurrent_requests: 8,
            embedding_batch_size: 32,
            embedding_max_inflight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEmbeddingEntry {
    pub text: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Checked in order; the first rule whose pattern occurs in the prompt wins.
    pub rules: Vec<MockRule>,
    pub default_response: String,
    pub embedding_dim: usize,
    /// Fixed vectors for exact texts; other texts use hashed token vectors.
    pub embeddings: Vec<MockEmbeddingEntry>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { rules: Vec::new(), default_response: "Yes".into(), embedding_dim: 64, embeddings: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<String>,
    pub conversations: Option<String>,
    pub index_dir: Option<String>,
    pub cache_dir: Option<String>,
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub max_concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { max_concurrency: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub analyzer: AnalyzerConfig,
    pub bm25: Bm25Params,
    pub pipeline: PipelineConfig,
    pub backend: BackendConfig,
    pub mock: MockConfig,
    pub paths: PathsConfig,
    pub templates: TemplatePaths,
    pub run: RunConfig,
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: AppConfig,
    pub base_dir: PathBuf,
    pub source: Option<PathBuf>,
    /// SHA-256 of the file bytes, or of the empty string for defaults.
    pub digest: String,
}

impl LoadedConfig {
    pub fn defaults() -> Self {
        Self {
            config: AppConfig::default(),
            base_dir: PathBuf::from("."),
            source: None,
            digest: hex::encode(Sha256::digest(b"")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: AppConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(Self {
            config,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
            source: Some(path.to_path_buf()),
            digest: hex::encode(Sha256::digest(&bytes)),
        })
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn path_or(&self, configured: &Option<String>, fallback: &str) -> PathBuf {
        self.resolve(configured.as_deref().unwrap_or(fallback))
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.bm25.validate()?;
        if self.mock.embedding_dim == 0 {
            return Err(Error::Config("mock.embedding_dim must be at least 1".into()));
        }
        if self.backend.max_concurrent_requests == 0 {
            return Err(Error::Config("backend.max_concurrent_requests must be at least 1".into()));
        }
        if self.backend.kind == BackendKind::Http {
            for (name, url) in [
                ("chat_url", &self.backend.chat_url),
                ("embedding_url", &self.backend.embedding_url),
                ("rerank_url", &self.backend.rerank_url),
            ] {
                if url.is_none() {
                    return Err(Error::Config(format!("backend.{name} is required for http backends")));
                }
            }
        }
        Ok(())
    }
}

/// Chat, embedding and rerank backends sharing one cache, limiter and
/// call counters.
pub struct Services {
    pub backends: Backends,
    pub stats: Arc<CallStats>,
    pub cache: Arc<ResponseCache>,
}

fn endpoint(cfg: &BackendConfig, url: &Option<String>) -> Result<HttpEndpoint> {
    let url = url.clone().ok_or_else(|| Error::Config("missing backend url".into()))?;
    let mut ep = HttpEndpoint::new(url).with_timeout(Duration::from_secs(cfg.timeout_secs.max(1)));
    if let Some(var) = &cfg.api_key_env {
        let key = std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        ep = ep.with_auth(cfg.auth_header.clone(), format!("{}{key}", cfg.auth_scheme));
    }
    Ok(ep)
}

pub fn build_services(loaded: &LoadedConfig, cache: Arc<ResponseCache>) -> Result<Services> {
    let cfg = &loaded.config;
    let b = &cfg.backend;
    let models = &cfg.pipeline.models;
    let (chat, embedding, rerank): (Arc<dyn ChatBackend>, Arc<dyn EmbeddingBackend>, Arc<dyn RerankBackend>) = match b.kind {
        BackendKind::Mock => {
            let dim = cfg.mock.embedding_dim;
            let embedding: Arc<dyn EmbeddingBackend> = if cfg.mock.embeddings.is_empty() {
                Arc::new(HashEmbedding::new(dim))
            } else {
                let table = cfg.mock.embeddings.iter().map(|e| (e.text.clone(), e.vector.clone()));
                Arc::new(ScriptedEmbedding::new(dim, table)?)
            };
            (
                Arc::new(mock_backend(cfg.mock.rules.clone(), cfg.mock.default_response.clone())),
                embedding,
                Arc::new(BigramOverlapReranker::new(cfg.analyzer)),
            )
        }
        BackendKind::Http => (
            Arc::new(HttpChatBackend::new(endpoint(b, &b.chat_url)?)?),
            Arc::new(HttpEmbeddingBackend::new(endpoint(b, &b.embedding_url)?, models.embedding.clone())?),
            Arc::new(HttpRerankBackend::new(endpoint(b, &b.rerank_url)?, models.rerank.clone())?),
        ),
    };
    let stats = Arc::new(CallStats::default());
    let limiter = Arc::new(Limiter::new(b.max_concurrent_requests));
    let gateway = LlmGateway::new(chat, cache.clone())
        .with_retry(b.retry)
        .with_limiter(limiter.clone())
        .with_stats(stats.clone());
    let embedder = Embedder::new(embedding, models.embedding.clone())
        .with_cache(cache.clone())
        .with_retry(b.retry)
        .with_batching(b.embedding_batch_size, b.embedding_max_inflight)
        .with_limiter(limiter.clone())
        .with_stats(stats.clone());
    let reranker = Reranker::new(rerank, models.rerank.clone())
        .with_cache(cache.clone())
        .with_retry(b.retry)
        .with_limiter(limiter)
        .with_stats(stats.clone());
    let prompts = PromptSet::load(&cfg.templates, &loaded.base_dir)?;
    Ok(Services { backends: Backends { gateway, embedder, reranker, prompts }, stats, cache })
}
