//! Per-turn orchestration of rewrite, literature selection, multi-route
//! retrieval, fusion, article filtering, reranking and generation, plus the
//! run-level trace that records every intermediate result.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, ConversationTurn, Corpus, LegalArticle};
use crate::dense_index::{dense_search, Embedder, VectorIndex};
use crate::error::{Error, Result};
use crate::llm_gateway::{LlmGateway, Stage};
use crate::rerank::{rerank, Reranker};
use crate::sparse_index::{bm25_search, sort_ranked, InvertedIndex, RankedCandidate, Route};
use crate::stages::{
    article_verdict, build_generation_prompt, build_rewrite_prompt, literature_verdict, parse_rewrite, FilterVerdict,
    PromptSet, RewriteResult,
};

/// Size of the recorded post-filter pool used for hard negatives.
pub const HARD_NEGATIVE_POOL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub rewrite: bool,
    pub literature_filter: bool,
    pub sparse_route: bool,
    pub article_filter: bool,
    pub rerank: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { rewrite: true, literature_filter: true, sparse_route: true, article_filter: true, rerank: true }
    }
}

impl StageToggles {
    pub fn none() -> Self {
        Self { rewrite: false, literature_filter: false, sparse_route: false, article_filter: false, rerank: false }
    }

    /// Names of the enabled optional stages.
    pub fn active(&self) -> Vec<&'static str> {
        [
            ("rewrite", self.rewrite),
            ("literature_filter", self.literature_filter),
            ("sparse_route", self.sparse_route),
            ("article_filter", self.article_filter),
            ("rerank", self.rerank),
        ]
        .into_iter()
        .filter_map(|(name, on)| on.then_some(name))
        .collect()
    }
}

/// Cumulative ablation presets, each adding to the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "+rewrite")]
    Rewrite,
    #[serde(rename = "+rerank")]
    Rerank,
    #[serde(rename = "+multiroute")]
    MultiRoute,
    #[serde(rename = "+filtering")]
    Filtering,
}

impl Ablation {
    pub const LADDER: [Ablation; 5] =
        [Ablation::Vanilla, Ablation::Rewrite, Ablation::Rerank, Ablation::MultiRoute, Ablation::Filtering];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Vanilla => "vanilla",
            Ablation::Rewrite => "+rewrite",
            Ablation::Rerank => "+rerank",
            Ablation::MultiRoute => "+multiroute",
            Ablation::Filtering => "+filtering",
        }
    }

    pub fn toggles(self) -> StageToggles {
        let mut t = StageToggles::none();
        for step in Self::LADDER {
            match step {
                Ablation::Vanilla => {}
                Ablation::Rewrite => t.rewrite = true,
                Ablation::Rerank => t.rerank = true,
                Ablation::MultiRoute => t.sparse_route = true,
                Ablation::Filtering => {
                    t.literature_filter = true;
                    t.article_filter = true;
                }
            }
            if step == self {
                break;
            }
        }
        t
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::LADDER
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation preset {s:?} (expected vanilla, +rewrite, +rerank, +multiroute or +filtering)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelIds {
    pub rewrite: String,
    pub literature_filter: String,
    pub article_filter: String,
    pub generate: String,
    pub embedding: String,
    pub rerank: String,
}

impl Default for ModelIds {
    fn default() -> Self {
        Self {
            rewrite: "qwen3-235b-a22b".into(),
            literature_filter: "qwen3-14b".into(),
            article_filter: "qwen3-14b".into(),
            generate: "qwen3-235b-a22b".into(),
            embedding: "Qwen3-Embedding-8B".into(),
            rerank: "Qwen3-Reranker-8B".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k_dense_per_literature: usize,
    pub k_sparse: usize,
    pub alpha: f64,
    pub filter_top_n: usize,
    pub final_k: usize,
    pub toggles: StageToggles,
    pub article_filter_yes_means_keep: bool,
    pub literature_filter_applies_to_sparse: bool,
    pub seed: u64,
    pub models: ModelIds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_dense_per_literature: 50,
            k_sparse: 1000,
            alpha: 1.0,
            filter_top_n: 500,
            final_k: 5,
            toggles: StageToggles::default(),
            article_filter_yes_means_keep: true,
            literature_filter_applies_to_sparse: false,
            seed: 0,
            models: ModelIds::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_dense_per_literature", self.k_dense_per_literature),
            ("k_sparse", self.k_sparse),
            ("filter_top_n", self.filter_top_n),
            ("final_k", self.final_k),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Immutable retrieval state shared by all turns of a run.
pub struct Indexes {
    pub corpus: Corpus,
    pub sparse: InvertedIndex,
    pub dense: VectorIndex,
}

/// Model-backed services shared by all turns of a run.
pub struct Backends {
    pub gateway: LlmGateway,
    pub embedder: Embedder,
    pub reranker: Reranker,
    pub prompts: PromptSet,
}

impl Backends {
    pub fn ids(&self) -> BackendIds {
        BackendIds {
            chat: self.gateway.backend_id(),
            embedding: self.embedder.backend_id(),
            rerank: self.reranker.backend_id(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIds {
    pub chat: String,
    pub embedding: String,
    pub rerank: String,
}

/// `(article_id, score)`, serialized as a two-element array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored(pub String, pub f64);

impl From<&RankedCandidate> for Scored {
    fn from(c: &RankedCandidate) -> Self {
        Scored(c.article_id.clone(), c.score)
    }
}

fn scored(list: &[RankedCandidate]) -> Vec<Scored> {
    list.iter().map(Scored::from).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiteratureVerdict {
    pub literature: String,
    #[serde(flatten)]
    pub verdict: FilterVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleVerdict {
    pub article_id: String,
    #[serde(flatten)]
    pub verdict: FilterVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnError {
    pub stage: String,
    pub message: String,
}

/// Everything one turn produced. Stages that were switched off leave their
/// field absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub conversation_id: String,
    pub turn_index: u32,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<RewriteResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub literature_verdicts: Option<Vec<LiteratureVerdict>>,
    #[serde(default)]
    pub selected_literatures: Vec<String>,
    #[serde(default)]
    pub dense: Vec<Scored>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse: Option<Vec<Scored>>,
    #[serde(default)]
    pub fused: Vec<Scored>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub article_verdicts: Option<Vec<ArticleVerdict>>,
    #[serde(default)]
    pub survivors: Vec<String>,
    /// Top of the survivor list, in fused order.
    #[serde(default)]
    pub hard_negative_pool: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranked: Option<Vec<Scored>>,
    #[serde(default)]
    pub final_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<TurnError>,
}

impl TurnTrace {
    pub fn new(conversation_id: &str, turn_index: u32, query: &str) -> Self {
        Self {
            conversation_id: conversation_id.to_string(),
            turn_index,
            query: query.to_string(),
            rewrite: None,
            literature_verdicts: None,
            selected_literatures: Vec::new(),
            dense: Vec::new(),
            sparse: None,
            fused: Vec::new(),
            article_verdicts: None,
            survivors: Vec::new(),
            hard_negative_pool: Vec::new(),
            reranked: None,
            final_ids: Vec::new(),
            response: None,
            error: None,
        }
    }

    pub fn effective_query(&self) -> &str {
        match &self.rewrite {
            Some(r) => &r.rewritten_query,
            None => self.query.trim(),
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    /// Every downstream id must come from the stage before it.
    pub fn check_provenance(&self) -> Result<()> {
        let fail = |what: &str, id: &str| {
            Err(Error::Trace(format!(
                "{}#{}: {what} id {id:?} has no upstream source",
                self.conversation_id, self.turn_index
            )))
        };
        let mut retrieved: HashSet<&str> = self.dense.iter().map(|s| s.0.as_str()).collect();
        if let Some(sparse) = &self.sparse {
            retrieved.extend(sparse.iter().map(|s| s.0.as_str()));
        }
        for s in &self.fused {
            if !retrieved.contains(s.0.as_str()) {
                return fail("fused", &s.0);
            }
        }
        let fused: HashSet<&str> = self.fused.iter().map(|s| s.0.as_str()).collect();
        for id in &self.survivors {
            if !fused.contains(id.as_str()) {
                return fail("survivor", id);
            }
        }
        let survivors: HashSet<&str> = self.survivors.iter().map(String::as_str).collect();
        let reranked = self.reranked.iter().flatten().map(|s| &s.0);
        for id in self.hard_negative_pool.iter().chain(reranked).chain(&self.final_ids) {
            if !survivors.contains(id.as_str()) {
                return fail("final", id);
            }
        }
        Ok(())
    }
}

/// Wall-clock milliseconds per stage for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTimings {
    pub conversation_id: String,
    pub turn_index: u32,
    pub stages_ms: BTreeMap<String, f64>,
}

/// Minimum-maximum scaling to [0, 1]. A constant list maps to 1.0.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if scores.is_empty() {
        return Vec::new();
    }
    if hi - lo <= 0.0 {
        return vec![1.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// Linear fusion over the union of both routes. Candidates without a dense
/// score get one from `dense_score`; missing sparse scores count as 0. The
/// result is sorted (score descending, id ascending) and truncated to `top_n`.
pub fn fuse(
    dense: &[RankedCandidate],
    sparse: &[RankedCandidate],
    alpha: f64,
    top_n: usize,
    mut dense_score: impl FnMut(&str) -> Result<f64>,
) -> Result<Vec<RankedCandidate>> {
    let normalized = minmax_normalize(&sparse.iter().map(|c| c.score).collect::<Vec<_>>());
    let sparse_norm: HashMap<&str, f64> = sparse
        .iter()
        .zip(normalized)
        .map(|(c, n)| (c.article_id.as_str(), n))
        .collect();
    let mut dense_by_id: HashMap<&str, f64> = HashMap::with_capacity(dense.len());
    for c in dense {
        dense_by_id.entry(c.article_id.as_str()).or_insert(c.score);
    }
    let mut ids: Vec<&str> = dense_by_id.keys().copied().collect();
    ids.extend(sparse_norm.keys().filter(|id| !dense_by_id.contains_key(*id)).copied());
    let mut fused = Vec::with_capacity(ids.len());
    for id in ids {
        let d = match dense_by_id.get(id) {
            Some(&d) => d,
            None => dense_score(id)?,
        };
        let s = sparse_norm.get(id).copied().unwrap_or(0.0);
        fused.push(RankedCandidate::new(id, alpha * d + (1.0 - alpha) * s, Route::Fused));
    }
    sort_ranked(&mut fused);
    fused.truncate(top_n);
    Ok(fused)
}

struct StageClock {
    stages: BTreeMap<String, f64>,
}

impl StageClock {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages.insert(stage.to_string(), start.elapsed().as_secs_f64() * 1000.0);
        out
    }
}

fn lookup<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a LegalArticle> {
    corpus.get(id).ok_or_else(|| Error::UnknownArticles(vec![id.to_string()]))
}

fn execute(
    config: &PipelineConfig,
    indexes: &Indexes,
    backends: &Backends,
    history: &[TurnTrace],
    turn: &ConversationTurn,
    trace: &mut TurnTrace,
    clock: &mut StageClock,
    stage: &mut &'static str,
) -> Result<()> {
    let corpus = &indexes.corpus;
    let toggles = config.toggles;

    *stage = "rewrite";
    if toggles.rewrite {
        let past: Vec<String> = history.iter().map(|t| t.query.clone()).collect();
        let result = clock.time("rewrite", || -> Result<RewriteResult> {
            let request = build_rewrite_prompt(&backends.prompts, &config.models.rewrite, &past, &turn.query)?;
            parse_rewrite(&backends.gateway.complete(Stage::Rewrite, &request)?)
        })?;
        trace.rewrite = Some(result);
    }
    let query = trace.effective_query().to_string();
    let sparse_query = match &trace.rewrite {
        Some(r) => r.sparse_query(),
        None => query.clone(),
    };

    *stage = "literature_filter";
    if toggles.literature_filter {
        let verdicts = clock.time("literature_filter", || {
            corpus
                .literatures()
                .par_iter()
                .map(|lit| {
                    literature_verdict(&backends.gateway, &backends.prompts, &config.models.literature_filter, &query, &lit.name)
                        .map(|verdict| LiteratureVerdict { literature: lit.name.clone(), verdict })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        trace.selected_literatures = verdicts.iter().filter(|v| v.verdict.keep).map(|v| v.literature.clone()).collect();
        trace.literature_verdicts = Some(verdicts);
    } else {
        trace.selected_literatures = corpus.literatures().iter().map(|l| l.name.clone()).collect();
    }

    *stage = "dense";
    let query_vector = clock.time("embed_query", || backends.embedder.embed_one(&query))?;
    let dense = clock.time("dense", || {
        dense_search(&indexes.dense, &query_vector, &trace.selected_literatures, config.k_dense_per_literature)
    })?;
    trace.dense = scored(&dense);

    *stage = "sparse";
    let sparse = if toggles.sparse_route {
        let mut hits = clock.time("sparse", || bm25_search(&indexes.sparse, &sparse_query, config.k_sparse));
        if toggles.literature_filter && config.literature_filter_applies_to_sparse {
            let selected: HashSet<&str> = trace.selected_literatures.iter().map(String::as_str).collect();
            hits.retain(|c| corpus.get(&c.article_id).is_some_and(|a| selected.contains(a.literature_name.as_str())));
        }
        trace.sparse = Some(scored(&hits));
        hits
    } else {
        Vec::new()
    };

    *stage = "fusion";
    let fused = clock.time("fusion", || {
        fuse(&dense, &sparse, config.alpha, config.filter_top_n, |id| {
            indexes
                .dense
                .score(id, &query_vector)
                .ok_or_else(|| Error::UnknownArticles(vec![id.to_string()]))
        })
    })?;
    trace.fused = scored(&fused);

    *stage = "article_filter";
    let survivors: Vec<RankedCandidate> = if toggles.article_filter {
        let verdicts = clock.time("article_filter", || {
            fused
                .par_iter()
                .map(|c| {
                    let article = lookup(corpus, &c.article_id)?;
                    article_verdict(
                        &backends.gateway,
                        &backends.prompts,
                        &config.models.article_filter,
                        &query,
                        article,
                        config.article_filter_yes_means_keep,
                    )
                    .map(|verdict| ArticleVerdict { article_id: c.article_id.clone(), verdict })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let kept: Vec<RankedCandidate> = fused
            .iter()
            .zip(&verdicts)
            .filter(|(_, v)| v.verdict.keep)
            .map(|(c, _)| c.clone())
            .collect();
        trace.article_verdicts = Some(verdicts);
        kept
    } else {
        fused
    };
    trace.survivors = survivors.iter().map(|c| c.article_id.clone()).collect();
    trace.hard_negative_pool = trace.survivors.iter().take(HARD_NEGATIVE_POOL).cloned().collect();

    *stage = "rerank";
    let final_ids: Vec<String> = if toggles.rerank {
        let reranked = clock.time("rerank", || rerank(&backends.reranker, corpus, &query, &survivors, config.final_k))?;
        trace.reranked = Some(scored(&reranked));
        reranked.into_iter().map(|c| c.article_id).collect()
    } else {
        survivors.iter().take(config.final_k).map(|c| c.article_id.clone()).collect()
    };
    trace.final_ids = final_ids;

    *stage = "generate";
    let articles: Vec<&LegalArticle> = trace.final_ids.iter().map(|id| lookup(corpus, id)).collect::<Result<_>>()?;
    let past: Vec<(String, String)> = history
        .iter()
        .filter_map(|t| t.response.as_ref().map(|r| (t.query.clone(), r.clone())))
        .collect();
    let response = clock.time("generate", || -> Result<String> {
        let request = build_generation_prompt(&backends.prompts, &config.models.generate, &past, &turn.query, &articles)?;
        backends.gateway.complete(Stage::Generate, &request)
    })?;
    trace.response = Some(response);
    Ok(())
}

/// Runs one turn. A failing stage stops the turn; the trace keeps what the
/// earlier stages produced and names the failing one.
pub fn run_turn(
    config: &PipelineConfig,
    indexes: &Indexes,
    backends: &Backends,
    history: &[TurnTrace],
    conversation_id: &str,
    turn: &ConversationTurn,
) -> (TurnTrace, TurnTimings) {
    let mut trace = TurnTrace::new(conversation_id, turn.turn_index, &turn.query);
    let mut clock = StageClock { stages: BTreeMap::new() };
    let mut stage = "rewrite";
    if let Err(e) = execute(config, indexes, backends, history, turn, &mut trace, &mut clock, &mut stage) {
        log::warn!("{conversation_id}#{} failed at {stage}: {e}", turn.turn_index);
        trace.error = Some(TurnError { stage: stage.to_string(), message: e.to_string() });
    }
    let timings = TurnTimings { conversation_id: conversation_id.to_string(), turn_index: turn.turn_index, stages_ms: clock.stages };
    (trace, timings)
}

/// The deterministic part of a run: config, corpus identity, backends and
/// the ordered turn traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: PipelineConfig,
    pub corpus_digest: String,
    pub backends: BackendIds,
    pub turns: Vec<TurnTrace>,
}

impl RunTrace {
    /// One turn per line.
    pub fn to_jsonl(&self) -> Result<String> {
        turns_to_jsonl(&self.turns)
    }

    pub fn failed_turns(&self) -> Vec<&TurnTrace> {
        self.turns.iter().filter(|t| t.failed()).collect()
    }
}

pub fn turns_to_jsonl(turns: &[TurnTrace]) -> Result<String> {
    let mut out = String::new();
    for t in turns {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_turns(path: &Path, turns: &[TurnTrace]) -> Result<()> {
    std::fs::write(path, turns_to_jsonl(turns)?).map_err(|e| Error::io(path, e))
}

pub fn read_turns(path: &Path) -> Result<Vec<TurnTrace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub struct RunOutput {
    pub trace: RunTrace,
    pub timings: Vec<TurnTimings>,
}

impl RunOutput {
    /// Fails only when there were turns and none of them succeeded.
    pub fn status(&self) -> Result<()> {
        let failed = self.trace.failed_turns().len();
        if failed > 0 && failed == self.trace.turns.len() {
            return Err(Error::AllTurnsFailed(failed));
        }
        Ok(())
    }
}

fn run_conversation(
    config: &PipelineConfig,
    indexes: &Indexes,
    backends: &Backends,
    conversation: &Conversation,
) -> Vec<(TurnTrace, TurnTimings)> {
    let mut done: Vec<TurnTrace> = Vec::with_capacity(conversation.turns.len());
    let mut out = Vec::with_capacity(conversation.turns.len());
    for turn in &conversation.turns {
        let (trace, timings) = run_turn(config, indexes, backends, &done, &conversation.conversation_id, turn);
        done.push(trace.clone());
        out.push((trace, timings));
    }
    out
}

/// Conversations run concurrently on up to `max_concurrency` threads; turns
/// inside a conversation run in order. Output follows dataset order.
pub fn run_dataset(
    config: &PipelineConfig,
    indexes: &Indexes,
    backends: &Backends,
    conversations: &[Conversation],
    max_concurrency: usize,
) -> Result<RunOutput> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_concurrency.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let per_conversation: Vec<Vec<(TurnTrace, TurnTimings)>> = pool.install(|| {
        conversations
            .par_iter()
            .map(|c| run_conversation(config, indexes, backends, c))
            .collect()
    });
    let (turns, timings) = per_conversation.into_iter().flatten().unzip();
    Ok(RunOutput {
        trace: RunTrace {
            config: config.clone(),
            corpus_digest: indexes.corpus.digest(),
            backends: backends.ids(),
            turns,
        },
        timings,
    })
}
