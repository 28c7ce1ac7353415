//! Chat-completion chokepoint: request validation, retries with
//! exponential backoff, a content-addressed on-disk response cache, a
//! bounded in-flight limit and per-stage call accounting.
//!
//! Embedding and rerank calls reuse [`ResponseCache`], [`RetryPolicy`] and
//! [`CallStats`] from here.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

pub const DEFAULT_MAX_TOKENS: u32 = 2048;

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.messages.first() {
            None => return Err(Error::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::System => {
                return Err(Error::InvalidRequest("first message must be the system prompt".into()))
            }
            _ => {}
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidRequest("max_tokens must be > 0".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization (struct field order,
    /// message order preserved).
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::to_string(self).unwrap_or_default();
        digest_key("chat/v1", &canonical)
    }

    /// All message contents joined by newlines.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

pub(crate) fn digest_key(namespace: &str, payload: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(namespace.as_bytes());
    hasher.update(b"\n");
    hasher.update(payload.as_bytes());
    hex::encode(hasher.finalize())
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub response: String,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self { pattern: pattern.into(), response: response.into() }
    }
}

/// First rule whose pattern is a substring of the joined message contents
/// wins; otherwise the default response.
#[derive(Debug, Clone)]
pub struct MockChatBackend {
    rules: Vec<MockRule>,
    default: String,
}

pub fn mock_backend(rules: Vec<MockRule>, default: impl Into<String>) -> MockChatBackend {
    MockChatBackend { rules, default: default.into() }
}

impl MockChatBackend {
    pub fn respond(&self, prompt: &str) -> &str {
        self.rules
            .iter()
            .find(|r| prompt.contains(&r.pattern))
            .map(|r| r.response.as_str())
            .unwrap_or(&self.default)
    }
}

impl ChatBackend for MockChatBackend {
    fn id(&self) -> String {
        "mock-chat".into()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        Ok(self.respond(&request.prompt_text()).to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub response: String,
    pub backend_id: String,
    pub created_at: String,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Response cache keyed by request digest. With a root directory entries
/// live at `<root>/<key[..2]>/<key>.json` and are written via a temp file
/// plus rename, so concurrent writers of the same key never leave a torn
/// entry behind.
#[derive(Debug, Default)]
pub struct ResponseCache {
    root: Option<PathBuf>,
    memory: Mutex<HashMap<String, CacheEntry>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root: Some(root), memory: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn entry_path(&self, key: &str) -> Option<PathBuf> {
        let prefix = key.get(..2).unwrap_or("__");
        self.root
            .as_ref()
            .map(|r| r.join(prefix).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>> {
        if let Some(hit) = self.memory.lock().expect("cache lock").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.entry_path(key) else {
            return Ok(None);
        };
        match fs::read(&path) {
            Ok(bytes) => {
                let entry: CacheEntry = serde_json::from_slice(&bytes)?;
                self.memory
                    .lock()
                    .expect("cache lock")
                    .insert(key.to_string(), entry.clone());
                Ok(Some(entry))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, key: &str, entry: CacheEntry) -> Result<()> {
        if let Some(path) = self.entry_path(key) {
            let dir = path.parent().expect("entry has a parent");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let tmp = dir.join(format!(
                ".{key}.{}.{}.tmp",
                std::process::id(),
                TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
            ));
            let bytes = serde_json::to_vec(&entry)?;
            let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            file.sync_all().map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memory.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay_ms: 200 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_retries: 0, base_delay_ms: 0 }
    }

    pub fn run<T>(&self, request_hash: &str, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match call() {
                Ok(value) => return Ok(value),
                Err(err) => {
                    if attempt >= self.max_retries {
                        return Err(Error::RetriesExhausted {
                            request_hash: request_hash.to_string(),
                            attempts: attempt + 1,
                            last: err.to_string(),
                        });
                    }
                    let delay = self.base_delay_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("call {request_hash} attempt {} failed: {err}; retrying in {delay} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }
}

/// Labels for call accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rewrite,
    LiteratureFilter,
    ArticleFilter,
    Generate,
    Embed,
    Rerank,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Rewrite => "rewrite",
            Stage::LiteratureFilter => "literature_filter",
            Stage::ArticleFilter => "article_filter",
            Stage::Generate => "generate",
            Stage::Embed => "embed",
            Stage::Rerank => "rerank",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounters {
    pub requests: u64,
    pub cache_hits: u64,
    pub failures: u64,
}

impl StageCounters {
    pub fn hit_rate(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.requests as f64
        }
    }
}

#[derive(Debug, Default)]
pub struct CallStats {
    inner: Mutex<BTreeMap<Stage, StageCounters>>,
}

impl CallStats {
    pub fn record(&self, stage: Stage, requests: u64, hits: u64, failures: u64) {
        let mut map = self.inner.lock().expect("stats lock");
        let c = map.entry(stage).or_default();
        c.requests += requests;
        c.cache_hits += hits;
        c.failures += failures;
    }

    pub fn snapshot(&self) -> BTreeMap<Stage, StageCounters> {
        self.inner.lock().expect("stats lock").clone()
    }

    pub fn get(&self, stage: Stage) -> StageCounters {
        self.snapshot().get(&stage).copied().unwrap_or_default()
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct Limiter {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    pub fn new(max: usize) -> Self {
        Self { permits: Mutex::new(max.max(1)), cv: Condvar::new() }
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut p = self.permits.lock().expect("limiter lock");
            while *p == 0 {
                p = self.cv.wait(p).expect("limiter lock");
            }
            *p -= 1;
        }
        struct Release<'a>(&'a Limiter);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                *self.0.permits.lock().expect("limiter lock") += 1;
                self.0.cv.notify_one();
            }
        }
        let _release = Release(self);
        f()
    }
}

/// Returns the cached response for `request` or calls `backend` (with
/// retries), stores the answer and returns it. The boolean is `true` on a
/// cache hit.
pub fn complete_cached(
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    request: &ChatRequest,
    retry: &RetryPolicy,
) -> Result<(String, bool)> {
    request.validate()?;
    let key = request.cache_key();
    if let Some(entry) = cache.get(&key)? {
        return Ok((entry.response, true));
    }
    let response = retry.run(&key, || backend.complete(request))?;
    cache.put(
        &key,
        CacheEntry {
            response: response.clone(),
            backend_id: backend.id(),
            created_at: chrono::Utc::now().to_rfc3339(),
        },
    )?;
    Ok((response, false))
}

/// Chat gateway shared by every LLM stage of a run.
pub struct LlmGateway {
    backend: Arc<dyn ChatBackend>,
    cache: Arc<ResponseCache>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
    stats: Arc<CallStats>,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Arc<ResponseCache>) -> Self {
        Self {
            backend,
            cache,
            retry: RetryPolicy::default(),
            limiter: Arc::new(Limiter::new(8)),
            stats: Arc::new(CallStats::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<Limiter>) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn with_stats(mut self, stats: Arc<CallStats>) -> Self {
        self.stats = stats;
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn stats(&self) -> &Arc<CallStats> {
        &self.stats
    }

    pub fn complete(&self, stage: Stage, request: &ChatRequest) -> Result<String> {
        let result = self
            .limiter
            .run(|| complete_cached(self.backend.as_ref(), &self.cache, request, &self.retry));
        match &result {
            Ok((_, hit)) => self.stats.record(stage, 1, *hit as u64, 0),
            Err(_) => self.stats.record(stage, 1, 0, 1),
        }
        result.map(|(text, _)| text)
    }
}
