//! Pairwise reranking behind a pluggable scorer, and export of reranker
//! fine-tuning data with hard negatives drawn from the filtered top-10.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analyzer::{tokenize, AnalyzerConfig};
use crate::corpus::{Conversation, Corpus, LegalArticle};
use crate::error::{Error, Result};
use crate::llm_gateway::{digest_key, CacheEntry, CallStats, Limiter, ResponseCache, RetryPolicy, Stage};
use crate::pipeline::TurnTrace;
use crate::sparse_index::{sort_ranked, RankedCandidate, Route};

pub const NEGATIVES_PER_EXAMPLE: usize = 5;

pub trait RerankBackend: Send + Sync {
    fn id(&self) -> String;
    /// One finite score per document, higher is more relevant.
    fn score_pairs(&self, query: &str, docs: &[String]) -> Result<Vec<f64>>;
}

/// Offline scorer: number of distinct query tokens that also occur in the
/// document.
#[derive(Debug, Clone, Default)]
pub struct BigramOverlapReranker {
    analyzer: AnalyzerConfig,
}

impl BigramOverlapReranker {
    pub fn new(analyzer: AnalyzerConfig) -> Self {
        Self { analyzer }
    }
}

impl RerankBackend for BigramOverlapReranker {
    fn id(&self) -> String {
        "mock-bigram-overlap".into()
    }

    fn score_pairs(&self, query: &str, docs: &[String]) -> Result<Vec<f64>> {
        let q: HashSet<String> = tokenize(query, &self.analyzer).into_iter().collect();
        Ok(docs
            .iter()
            .map(|d| {
                let doc: HashSet<String> = tokenize(d, &self.analyzer).into_iter().collect();
                q.intersection(&doc).count() as f64
            })
            .collect())
    }
}

/// Text handed to the pair scorer for an article.
pub fn document_text(article: &LegalArticle) -> String {
    format!("{} {} {}", article.literature_name, article.article_label, article.text)
}

/// Cached, retrying front end for a [`RerankBackend`].
pub struct Reranker {
    backend: Arc<dyn RerankBackend>,
    model: String,
    cache: Option<Arc<ResponseCache>>,
    retry: RetryPolicy,
    limiter: Option<Arc<Limiter>>,
    stats: Arc<CallStats>,
}

impl Reranker {
    pub fn new(backend: Arc<dyn RerankBackend>, model: impl Into<String>) -> Self {
        Self {
            backend,
            model: model.into(),
            cache: None,
            retry: RetryPolicy::default(),
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

    fn key(&self, query: &str, doc: &str) -> String {
        digest_key("rerank/v1", &serde_json::to_string(&(&self.model, query, doc)).unwrap_or_default())
    }

    pub fn score(&self, query: &str, docs: &[String]) -> Result<Vec<f64>> {
        let mut scores: Vec<Option<f64>> = vec![None; docs.len()];
        let mut misses: Vec<usize> = Vec::new();
        for (i, doc) in docs.iter().enumerate() {
            if let Some(cache) = &self.cache {
                if let Some(entry) = cache.get(&self.key(query, doc))? {
                    scores[i] = Some(serde_json::from_str(&entry.response)?);
                    continue;
                }
            }
            misses.push(i);
        }
        let hits = (docs.len() - misses.len()) as u64;
        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|&i| docs[i].clone()).collect();
            let batch_key = digest_key("rerank-batch/v1", &serde_json::to_string(&(query, &batch))?);
            let call = || self.retry.run(&batch_key, || self.backend.score_pairs(query, &batch));
            let fresh = match &self.limiter {
                Some(l) => l.run(call),
                None => call(),
            };
            let fresh = match fresh {
                Ok(f) => f,
                Err(e) => {
                    self.stats.record(Stage::Rerank, docs.len() as u64, hits, 1);
                    return Err(e);
                }
            };
            if fresh.len() != batch.len() || fresh.iter().any(|s| !s.is_finite()) {
                self.stats.record(Stage::Rerank, docs.len() as u64, hits, 1);
                return Err(Error::backend(
                    self.backend.id(),
                    format!("expected {} finite scores, got {:?}", batch.len(), fresh),
                ));
            }
            for (&i, s) in misses.iter().zip(fresh) {
                if let Some(cache) = &self.cache {
                    cache.put(
                        &self.key(query, &docs[i]),
                        CacheEntry {
                            response: serde_json::to_string(&s)?,
                            backend_id: self.backend.id(),
                            created_at: chrono::Utc::now().to_rfc3339(),
                        },
                    )?;
                }
                scores[i] = Some(s);
            }
        }
        self.stats.record(Stage::Rerank, docs.len() as u64, hits, 0);
        Ok(scores.into_iter().map(|s| s.expect("every score filled")).collect())
    }
}

/// Scores every candidate against the query and keeps the top `final_k`
/// (score descending, ties by ascending id). Input order does not matter.
pub fn rerank(
    reranker: &Reranker,
    corpus: &Corpus,
    rewritten_query: &str,
    candidates: &[RankedCandidate],
    final_k: usize,
) -> Result<Vec<RankedCandidate>> {
    let mut seen = HashSet::new();
    let mut ids: Vec<&str> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if seen.insert(c.article_id.as_str()) {
            ids.push(c.article_id.as_str());
        }
    }
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    // score order is independent of input order
    ids.sort_unstable();
    let docs: Vec<String> = ids
        .iter()
        .map(|id| {
            corpus
                .get(id)
                .map(document_text)
                .ok_or_else(|| Error::UnknownArticles(vec![id.to_string()]))
        })
        .collect::<Result<_>>()?;
    let scores = reranker.score(rewritten_query, &docs)?;
    let mut ranked: Vec<RankedCandidate> = ids
        .into_iter()
        .zip(scores)
        .map(|(id, s)| RankedCandidate::new(id, s, Route::Reranked))
        .collect();
    sort_ranked(&mut ranked);
    ranked.truncate(final_k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankTrainingExample {
    pub conversation_id: String,
    pub turn_index: u32,
    pub query: String,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
    pub seed: u64,
    pub flags: Vec<String>,
}

pub const FLAG_SHORT_POOL: &str = "short_pool";
pub const FLAG_NO_POSITIVES: &str = "no_positives";

fn example_seed(seed: u64, conversation_id: &str, turn_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(conversation_id.as_bytes());
    h.update([0]);
    h.update(turn_index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

/// One example per gold turn: positives are the gold ids, negatives are 5
/// ids sampled uniformly without replacement from the turn's recorded
/// filtered top-10 after removing positives. Smaller pools are emitted in
/// full and flagged `short_pool`.
pub fn export_training_data(
    traces: &[TurnTrace],
    gold: &[Conversation],
    seed: u64,
) -> Result<Vec<RerankTrainingExample>> {
    let by_turn: HashMap<(&str, u32), &TurnTrace> = traces
        .iter()
        .map(|t| ((t.conversation_id.as_str(), t.turn_index), t))
        .collect();
    let mut out = Vec::new();
    for conv in gold {
        for turn in &conv.turns {
            let trace = by_turn
                .get(&(conv.conversation_id.as_str(), turn.turn_index))
                .ok_or_else(|| {
                    Error::Trace(format!(
                        "turn {}#{} missing from trace",
                        conv.conversation_id, turn.turn_index
                    ))
                })?;
            let positives: HashSet<&str> = turn.gold_article_ids.iter().map(String::as_str).collect();
            let eligible: Vec<&String> = trace
                .hard_negative_pool
                .iter()
                .filter(|id| !positives.contains(id.as_str()))
                .collect();
            let example_seed = example_seed(seed, &conv.conversation_id, turn.turn_index);
            let mut flags = Vec::new();
            let negative_ids: Vec<String> = if eligible.len() >= NEGATIVES_PER_EXAMPLE {
                let mut rng = ChaCha8Rng::seed_from_u64(example_seed);
                let mut picks = rand::seq::index::sample(&mut rng, eligible.len(), NEGATIVES_PER_EXAMPLE).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| eligible[i].clone()).collect()
            } else {
                flags.push(FLAG_SHORT_POOL.to_string());
                eligible.into_iter().cloned().collect()
            };
            if turn.gold_article_ids.is_empty() {
                flags.push(FLAG_NO_POSITIVES.to_string());
            }
            out.push(RerankTrainingExample {
                conversation_id: conv.conversation_id.clone(),
                turn_index: turn.turn_index,
                query: trace.effective_query().to_string(),
                positive_ids: turn.gold_article_ids.clone(),
                negative_ids,
                seed: example_seed,
                flags,
            });
        }
    }
    Ok(out)
}

/// Line record consumed by external reranker trainers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub conversation_id: String,
    pub turn_index: u32,
    pub query: String,
    pub positive_texts: Vec<String>,
    pub negative_texts: Vec<String>,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
    pub flags: Vec<String>,
}

pub fn training_records(examples: &[RerankTrainingExample], corpus: &Corpus) -> Result<Vec<TrainingRecord>> {
    let text = |id: &String| {
        corpus
            .get(id)
            .map(document_text)
            .ok_or_else(|| Error::UnknownArticles(vec![id.clone()]))
    };
    examples
        .iter()
        .map(|e| {
            Ok(TrainingRecord {
                conversation_id: e.conversation_id.clone(),
                turn_index: e.turn_index,
                query: e.query.clone(),
                positive_texts: e.positive_ids.iter().map(text).collect::<Result<_>>()?,
                negative_texts: e.negative_ids.iter().map(text).collect::<Result<_>>()?,
                positive_ids: e.positive_ids.clone(),
                negative_ids: e.negative_ids.clone(),
                flags: e.flags.clone(),
            })
        })
        .collect()
}

pub fn write_training_records(path: &Path, records: &[TrainingRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
