//! Embedding-backed semantic route: exact cosine top-k per literature.
//!
//! Vectors are L2-normalized on ingestion, so cosine similarity is the dot
//! product. Search is a flat scan; 17k vectors do not need an ANN.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::analyzer::{tokenize, AnalyzerConfig};
use crate::binfmt::{Decoder, Encoder};
use crate::corpus::{LegalArticle, Literature};
use crate::error::{Error, Result};
use crate::llm_gateway::{digest_key, CacheEntry, CallStats, Limiter, ResponseCache, RetryPolicy, Stage};
use crate::sparse_index::{sort_ranked, RankedCandidate, Route};

const MAGIC: &[u8; 8] = b"LXRGDENS";
const VERSION: u32 = 1;

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> String;
    /// One vector per input text, all of the same dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales to unit L2 norm. Fails on zero or non-finite vectors.
pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = dot(&v, &v).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::backend("embedding", "vector cannot be normalized"));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Deterministic offline embedder: each analyzer token maps to a
/// pseudo-random vector seeded by its SHA-256, a text is the normalized sum
/// of its token vectors.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    dim: usize,
    analyzer: AnalyzerConfig,
}

impl HashEmbedding {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1), analyzer: AnalyzerConfig::default() }
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let seed: [u8; 32] = Sha256::digest(token.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        for x in acc.iter_mut() {
            *x += rng.gen_range(-1.0..1.0);
        }
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let tokens = tokenize(text, &self.analyzer);
        if tokens.is_empty() {
            self.token_vector(text, &mut acc);
        } else {
            for token in tokens.iter() {
                self.token_vector(token, &mut acc);
            }
        }
        l2_normalize(acc)
    }
}

impl EmbeddingBackend for HashEmbedding {
    fn id(&self) -> String {
        format!("mock-hash-embedding-d{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Exact text → vector table with a hashing fallback for unlisted texts.
#[derive(Debug, Clone)]
pub struct ScriptedEmbedding {
    table: HashMap<String, Vec<f64>>,
    fallback: HashEmbedding,
}

impl ScriptedEmbedding {
    pub fn new(dim: usize, table: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let table: HashMap<String, Vec<f64>> = table.into_iter().collect();
        if let Some(v) = table.values().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        Ok(Self { table, fallback: HashEmbedding::new(dim) })
    }
}

impl EmbeddingBackend for ScriptedEmbedding {
    fn id(&self) -> String {
        format!("mock-scripted-embedding-d{}", self.fallback.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| match self.table.get(t) {
                Some(v) => Ok(v.clone()),
                None => self.fallback.embed_one(t),
            })
            .collect()
    }
}

/// Batched, cached, retrying front end for an [`EmbeddingBackend`].
pub struct Embedder {
    backend: Arc<dyn EmbeddingBackend>,
    model: String,
    cache: Option<Arc<ResponseCache>>,
    retry: RetryPolicy,
    batch_size: usize,
    max_inflight: usize,
    limiter: Option<Arc<Limiter>>,
    stats: Arc<CallStats>,
}

impl Embedder {
    pub fn new(backend: Arc<dyn EmbeddingBackend>, model: impl Into<String>) -> Self {
        Self {
            backend,
            model: model.into(),
            cache: None,
            retry: RetryPolicy::default(),
            batch_size: 32,
            max_inflight: 4,
            limiter: None,
            stats: Arc::new(CallStats::default()),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_batching(mut self, batch_size: usize, max_inflight: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self.max_inflight = max_inflight.max(1);
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<Limiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_stats(mut self, stats: Arc<CallStats>) -> Self {
        self.stats = stats;
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn key(&self, text: &str) -> String {
        let payload = serde_json::to_string(&(&self.model, text)).unwrap_or_default();
        digest_key("embed/v1", &payload)
    }

    fn call_batch(&self, batch_no: usize, start: usize, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let end = start + texts.len();
        let batch_err = |message: String| Error::EmbeddingBatch { batch: batch_no, start, end, message };
        let key = digest_key("embed-batch/v1", &serde_json::to_string(texts)?);
        let call = || self.retry.run(&key, || self.backend.embed(texts));
        let raw = match &self.limiter {
            Some(limiter) => limiter.run(call),
            None => call(),
        }
        .map_err(|e| batch_err(e.to_string()))?;
        if raw.len() != texts.len() {
            return Err(batch_err(format!("expected {} vectors, got {}", texts.len(), raw.len())));
        }
        raw.into_iter()
            .map(|v| l2_normalize(v).map_err(|e| batch_err(e.to_string())))
            .collect()
    }

    /// Unit-norm vectors for `texts`; cache hits skip the backend.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut pending: Vec<String> = Vec::new();
        let mut pending_slots: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, text) in texts.iter().enumerate() {
            if let Some(cache) = &self.cache {
                if let Some(entry) = cache.get(&self.key(text))? {
                    out[i] = Some(serde_json::from_str(&entry.response)?);
                    continue;
                }
            }
            let slots = pending_slots.entry(text.clone()).or_default();
            if slots.is_empty() {
                pending.push(text.clone());
            }
            slots.push(i);
        }
        let hits = texts.len() - pending_slots.values().map(Vec::len).sum::<usize>();

        let batches: Vec<(usize, usize, &[String])> = pending
            .chunks(self.batch_size)
            .enumerate()
            .map(|(n, chunk)| (n, n * self.batch_size, chunk))
            .collect();
        let mut results: Vec<Result<Vec<Vec<f64>>>> = Vec::with_capacity(batches.len());
        for wave in batches.chunks(self.max_inflight) {
            if wave.len() == 1 {
                let (n, start, chunk) = wave[0];
                results.push(self.call_batch(n, start, chunk));
                continue;
            }
            let wave_results: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&(n, start, chunk)| s.spawn(move || self.call_batch(n, start, chunk)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            });
            results.extend(wave_results);
        }
        let failures = results.iter().filter(|r| r.is_err()).count() as u64;
        self.stats
            .record(Stage::Embed, texts.len() as u64, hits as u64, failures);

        let mut expected_dim = out.iter().flatten().map(Vec::len).next();
        for ((_, _, chunk), result) in batches.iter().zip(results) {
            let vectors = result?;
            for (text, vector) in chunk.iter().zip(vectors) {
                match expected_dim {
                    None => expected_dim = Some(vector.len()),
                    Some(d) if d != vector.len() => {
                        return Err(Error::DimensionMismatch { expected: d, got: vector.len() })
                    }
                    _ => {}
                }
                if let Some(cache) = &self.cache {
                    cache.put(
                        &self.key(text),
                        CacheEntry {
                            response: serde_json::to_string(&vector)?,
                            backend_id: self.backend.id(),
                            created_at: chrono::Utc::now().to_rfc3339(),
                        },
                    )?;
                }
                for &slot in &pending_slots[text] {
                    out[slot] = Some(vector.clone());
                }
            }
        }
        if let Some(d) = expected_dim {
            if let Some(v) = out.iter().flatten().find(|v| v.len() != d) {
                return Err(Error::DimensionMismatch { expected: d, got: v.len() });
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every slot filled")).collect())
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = self.embed(&[text.to_string()])?;
        Ok(v.remove(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LiteratureGroup {
    name: String,
    entries: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    dimension: usize,
    groups: Vec<LiteratureGroup>,
    by_name: HashMap<String, usize>,
    by_article: HashMap<String, (usize, usize)>,
}

impl VectorIndex {
    fn from_groups(dimension: usize, groups: Vec<LiteratureGroup>) -> Result<Self> {
        let mut by_name = HashMap::new();
        let mut by_article = HashMap::new();
        for (g, group) in groups.iter().enumerate() {
            if by_name.insert(group.name.clone(), g).is_some() {
                return Err(Error::Validation(format!("duplicate literature {:?}", group.name)));
            }
            for (e, (id, v)) in group.entries.iter().enumerate() {
                if v.len() != dimension {
                    return Err(Error::DimensionMismatch { expected: dimension, got: v.len() });
                }
                if by_article.insert(id.clone(), (g, e)).is_some() {
                    return Err(Error::Validation(format!("article {id:?} indexed twice")));
                }
            }
        }
        Ok(Self { dimension, groups, by_name, by_article })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.by_article.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_article.is_empty()
    }

    pub fn literature_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn group_len(&self, literature: &str) -> Option<usize> {
        self.by_name.get(literature).map(|&g| self.groups[g].entries.len())
    }

    pub fn vector(&self, article_id: &str) -> Option<&[f64]> {
        self.by_article
            .get(article_id)
            .map(|&(g, e)| self.groups[g].entries[e].1.as_slice())
    }

    pub fn literature_of(&self, article_id: &str) -> Option<&str> {
        self.by_article
            .get(article_id)
            .map(|&(g, _)| self.groups[g].name.as_str())
    }

    /// Cosine score of one article against a unit query vector.
    pub fn score(&self, article_id: &str, query: &[f64]) -> Option<f64> {
        self.vector(article_id).map(|v| dot(v, query))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut enc = Encoder::with_header(MAGIC, VERSION);
        enc.u32(self.dimension as u32);
        enc.u32(self.groups.len() as u32);
        for group in &self.groups {
            enc.str(&group.name);
            enc.u32(group.entries.len() as u32);
            for (id, v) in &group.entries {
                enc.str(id);
                for &x in v {
                    enc.f64(x);
                }
            }
        }
        enc.write(path)
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut dec = Decoder::open(&bytes, path, MAGIC, VERSION)?;
        let dimension = dec.u32()? as usize;
        let n_groups = dec.u32()? as usize;
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let name = dec.str()?;
            let n = dec.u32()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let id = dec.str()?;
                let v = (0..dimension).map(|_| dec.f64()).collect::<Result<Vec<f64>>>()?;
                entries.push((id, v));
            }
            groups.push(LiteratureGroup { name, entries });
        }
        dec.finish()?;
        Self::from_groups(dimension, groups)
    }
}

/// Embeds every article text once and groups the vectors by literature.
pub fn build_vector_index(
    articles: &[LegalArticle],
    literatures: &[Literature],
    embedder: &Embedder,
) -> Result<VectorIndex> {
    if articles.is_empty() {
        return Err(Error::Validation("cannot index an empty article list".into()));
    }
    let texts: Vec<String> = articles.iter().map(|a| a.text.clone()).collect();
    let vectors = embedder.embed(&texts)?;
    let dimension = vectors[0].len();
    let mut by_id: HashMap<&str, (&LegalArticle, Vec<f64>)> = articles
        .iter()
        .zip(vectors)
        .map(|(a, v)| (a.article_id.as_str(), (a, v)))
        .collect();
    let mut groups = Vec::with_capacity(literatures.len());
    for lit in literatures {
        let mut entries = Vec::with_capacity(lit.article_ids.len());
        for id in &lit.article_ids {
            let (article, v) = by_id
                .remove(id.as_str())
                .ok_or_else(|| Error::Validation(format!("literature {:?} lists unknown or repeated article {id:?}", lit.name)))?;
            if article.literature_name != lit.name {
                return Err(Error::Validation(format!(
                    "article {id:?} belongs to {:?}, not {:?}",
                    article.literature_name, lit.name
                )));
            }
            entries.push((id.clone(), v));
        }
        groups.push(LiteratureGroup { name: lit.name.clone(), entries });
    }
    if !by_id.is_empty() {
        let mut missing: Vec<&str> = by_id.keys().copied().collect();
        missing.sort();
        return Err(Error::Validation(format!("articles without literature: {}", missing.join(", "))));
    }
    VectorIndex::from_groups(dimension, groups)
}

/// Per named literature, the top `k_per_literature` articles by cosine
/// similarity (ties by ascending id), concatenated in the given order.
pub fn dense_search(
    index: &VectorIndex,
    query_vector: &[f64],
    literature_names: &[String],
    k_per_literature: usize,
) -> Result<Vec<RankedCandidate>> {
    if query_vector.len() != index.dimension {
        return Err(Error::DimensionMismatch { expected: index.dimension, got: query_vector.len() });
    }
    let unknown: BTreeSet<&str> = literature_names
        .iter()
        .filter(|n| !index.by_name.contains_key(n.as_str()))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownLiteratures(unknown.into_iter().map(String::from).collect()));
    }
    let mut out = Vec::new();
    for name in literature_names {
        let group = &index.groups[index.by_name[name.as_str()]];
        let mut scored: Vec<RankedCandidate> = group
            .entries
            .iter()
            .map(|(id, v)| RankedCandidate::new(id.clone(), dot(v, query_vector), Route::Dense))
            .collect();
        sort_ranked(&mut scored);
        scored.truncate(k_per_literature);
        out.extend(scored);
    }
    Ok(out)
}
