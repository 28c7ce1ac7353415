//! Retrieval and generation scoring: NDCG@5 over the final ids, keyword
//! accuracy and token-level BERT-F1 over the response, and the composite.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyzer::{normalize, tokenize, AnalyzerConfig};
use crate::corpus::Conversation;
use crate::dense_index::{dot, Embedder};
use crate::error::{Error, Result};
use crate::pipeline::TurnTrace;

pub const NDCG_CUTOFF: usize = 5;

/// Binary-gain NDCG@5. `None` when `gold` is empty. A repeated id only
/// earns gain at its first position.
pub fn ndcg_at_5(ranked_ids: &[String], gold_ids: &HashSet<String>) -> Option<f64> {
    if gold_ids.is_empty() {
        return None;
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let mut seen = HashSet::new();
    let dcg: f64 = ranked_ids
        .iter()
        .take(NDCG_CUTOFF)
        .enumerate()
        .filter(|(_, id)| gold_ids.contains(*id) && seen.insert(id.as_str()))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..gold_ids.len().min(NDCG_CUTOFF)).map(discount).sum();
    Some(dcg / idcg)
}

/// Share of keywords whose normalized form occurs in the normalized response.
/// `None` when there are no keywords.
pub fn keyword_accuracy(response: &str, keywords: &[String]) -> Option<f64> {
    if keywords.is_empty() {
        return None;
    }
    let haystack = normalize(response);
    let hits = keywords.iter().filter(|k| haystack.contains(&normalize(k))).count();
    Some(hits as f64 / keywords.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn greedy(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / from.len() as f64
}

/// Precision and recall by greedy maximum cosine matching over token vectors.
pub fn greedy_match(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> (f64, f64) {
    (greedy(candidate, reference), greedy(reference, candidate))
}

pub fn f1_from_vectors(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let (p, r) = greedy_match(candidate, reference);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Token-embedding F1 between two texts. Each analyzer token is embedded on
/// its own. `None` when either side has no tokens.
pub fn bert_f1(candidate: &str, reference: &str, embedder: &Embedder, analyzer: &AnalyzerConfig) -> Result<Option<f64>> {
    let c: Vec<String> = tokenize(candidate, analyzer).into_iter().collect();
    let r: Vec<String> = tokenize(reference, analyzer).into_iter().collect();
    if c.is_empty() || r.is_empty() {
        return Ok(None);
    }
    let mut unique: Vec<String> = c.iter().chain(&r).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let vectors = embedder.embed(&unique)?;
    let table: HashMap<String, Vec<f64>> = unique.drain(..).zip(vectors).collect();
    let cv: Vec<Vec<f64>> = c.iter().map(|t| table[t].clone()).collect();
    let rv: Vec<Vec<f64>> = r.iter().map(|t| table[t].clone()).collect();
    Ok(Some(f1_from_vectors(&cv, &rv)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub conversation_id: String,
    pub turn_index: u32,
    pub ndcg_at_5: Option<f64>,
    pub keyword_accuracy: Option<f64>,
    pub bert_f1: Option<f64>,
    pub retrieval_score: Option<f64>,
    pub generation_score: Option<f64>,
    pub total: Option<f64>,
}

impl TurnScore {
    /// Applies the three linear formulas to whichever components exist.
    pub fn new(
        conversation_id: &str,
        turn_index: u32,
        ndcg_at_5: Option<f64>,
        bert_f1: Option<f64>,
        keyword_accuracy: Option<f64>,
    ) -> Self {
        let retrieval_score = ndcg_at_5.map(retrieval_score);
        let generation_score = bert_f1.zip(keyword_accuracy).map(|(f, k)| generation_score(f, k));
        let total = retrieval_score.zip(generation_score).map(|(r, g)| total_score(r, g));
        Self {
            conversation_id: conversation_id.to_string(),
            turn_index,
            ndcg_at_5,
            keyword_accuracy,
            bert_f1,
            retrieval_score,
            generation_score,
            total,
        }
    }
}

pub fn retrieval_score(ndcg: f64) -> f64 {
    100.0 * ndcg
}

pub fn generation_score(bert_f1: f64, keyword_accuracy: f64) -> f64 {
    50.0 * bert_f1 + 50.0 * keyword_accuracy
}

pub fn total_score(retrieval: f64, generation: f64) -> f64 {
    0.5 * retrieval + 0.5 * generation
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub conversation_id: String,
    pub turn_index: u32,
    pub metric: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub ndcg_at_5: Option<f64>,
    pub keyword_accuracy: Option<f64>,
    pub bert_f1: Option<f64>,
    pub retrieval_score: Option<f64>,
    pub generation_score: Option<f64>,
    pub total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub turns: Vec<TurnScore>,
    /// Each mean covers only the turns that have that component.
    pub means: Means,
    pub scored_turns: usize,
    pub failed_turns: usize,
    pub skipped: Vec<SkipRecord>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates per-turn scores. The dataset total is the mean of the
/// per-turn totals.
pub fn composite(turn_scores: Vec<TurnScore>, skipped: Vec<SkipRecord>, failed_turns: usize) -> MetricReport {
    let means = Means {
        ndcg_at_5: mean(turn_scores.iter().map(|t| t.ndcg_at_5)),
        keyword_accuracy: mean(turn_scores.iter().map(|t| t.keyword_accuracy)),
        bert_f1: mean(turn_scores.iter().map(|t| t.bert_f1)),
        retrieval_score: mean(turn_scores.iter().map(|t| t.retrieval_score)),
        generation_score: mean(turn_scores.iter().map(|t| t.generation_score)),
        total: mean(turn_scores.iter().map(|t| t.total)),
    };
    MetricReport {
        scored_turns: turn_scores.iter().filter(|t| t.total.is_some()).count(),
        turns: turn_scores,
        means,
        failed_turns,
        skipped,
    }
}

/// Scores a trace against gold conversations. Every gold turn must have a
/// trace turn and vice versa.
pub fn evaluate(
    traces: &[TurnTrace],
    gold: &[Conversation],
    embedder: &Embedder,
    analyzer: &AnalyzerConfig,
) -> Result<MetricReport> {
    let by_turn: HashMap<(&str, u32), &TurnTrace> = traces
        .iter()
        .map(|t| ((t.conversation_id.as_str(), t.turn_index), t))
        .collect();
    let gold_keys: HashSet<(&str, u32)> = gold
        .iter()
        .flat_map(|c| c.turns.iter().map(move |t| (c.conversation_id.as_str(), t.turn_index)))
        .collect();
    let mut unmatched: Vec<String> = gold_keys
        .iter()
        .filter(|k| !by_turn.contains_key(*k))
        .map(|(c, t)| format!("{c}#{t} (missing from trace)"))
        .collect();
    unmatched.extend(
        by_turn
            .keys()
            .filter(|k| !gold_keys.contains(*k))
            .map(|(c, t)| format!("{c}#{t} (not in gold)")),
    );
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::TurnMismatch(unmatched));
    }

    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    let mut failed = 0;
    for conv in gold {
        for turn in &conv.turns {
            let trace = by_turn[&(conv.conversation_id.as_str(), turn.turn_index)];
            let mut skip = |metric: &str, reason: &str| {
                skipped.push(SkipRecord {
                    conversation_id: conv.conversation_id.clone(),
                    turn_index: turn.turn_index,
                    metric: metric.to_string(),
                    reason: reason.to_string(),
                })
            };
            if let Some(err) = &trace.error {
                failed += 1;
                skip("all", &format!("turn failed at {}", err.stage));
                scores.push(TurnScore::new(&conv.conversation_id, turn.turn_index, None, None, None));
                continue;
            }
            let gold_ids: HashSet<String> = turn.gold_article_ids.iter().cloned().collect();
            let ndcg = ndcg_at_5(&trace.final_ids, &gold_ids);
            if ndcg.is_none() {
                skip("ndcg_at_5", "no gold articles");
            }
            let response = trace.response.as_deref().unwrap_or("");
            let ka = keyword_accuracy(response, &turn.reference_keywords);
            if ka.is_none() {
                skip("keyword_accuracy", "no reference keywords");
            }
            let f1 = bert_f1(response, &turn.reference_response, embedder, analyzer)?;
            if f1.is_none() {
                skip("bert_f1", "empty tokenization");
            }
            scores.push(TurnScore::new(&conv.conversation_id, turn.turn_index, ndcg, f1, ka));
        }
    }
    Ok(composite(scores, skipped, failed))
}

pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("metrics.csv");
    let csv_err = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for t in &report.turns {
        w.serialize(t).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}
