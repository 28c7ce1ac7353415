//! BM25 inverted index over the article corpus: the keyword route.
//!
//! Scoring is Okapi BM25 with the Lucene-style IDF
//! `ln((N - df + 0.5) / (df + 0.5) + 1)`, which stays positive for every
//! term present in the index.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyzer::{tokenize, AnalyzerConfig, TokenizerMode};
use crate::binfmt::{Decoder, Encoder};
use crate::corpus::LegalArticle;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LXRGBM25";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(Error::Config(format!("bm25.k1 must be >= 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("bm25.b must be in [0,1], got {}", self.b)));
        }
        Ok(())
    }
}

/// Which stage produced a candidate's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Sparse,
    Dense,
    Fused,
    Reranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub article_id: String,
    pub score: f64,
    pub route: Route,
}

impl RankedCandidate {
    pub fn new(article_id: impl Into<String>, score: f64, route: Route) -> Self {
        Self {
            article_id: article_id.into(),
            score,
            route,
        }
    }
}

/// Sorts by score descending, then article id ascending.
pub fn sort_ranked(candidates: &mut [RankedCandidate]) {
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.article_id.cmp(&b.article_id))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    analyzer: AnalyzerConfig,
    params: Bm25Params,
}

pub fn build_index(
    articles: &[LegalArticle],
    analyzer: &AnalyzerConfig,
    params: Bm25Params,
) -> Result<InvertedIndex> {
    if articles.is_empty() {
        return Err(Error::Validation("cannot index an empty article list".into()));
    }
    params.validate()?;
    let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
    let mut doc_ids = Vec::with_capacity(articles.len());
    let mut doc_lengths = Vec::with_capacity(articles.len());
    for (doc, article) in articles.iter().enumerate() {
        let tokens = tokenize(&article.text, analyzer);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for token in tokens.iter() {
            *tf.entry(token.to_string()).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push(Posting {
                doc: doc as u32,
                tf: count,
            });
        }
        doc_ids.push(article.article_id.clone());
        doc_lengths.push(tokens.len() as u32);
    }
    for list in postings.values_mut() {
        list.sort_by_key(|p| p.doc);
    }
    let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    if total == 0 {
        return Err(Error::Validation("corpus produced no tokens".into()));
    }
    let avg_doc_length = total as f64 / doc_lengths.len() as f64;
    Ok(InvertedIndex {
        postings,
        doc_ids,
        doc_lengths,
        avg_doc_length,
        analyzer: *analyzer,
        params,
    })
}

impl InvertedIndex {
    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn analyzer(&self) -> &AnalyzerConfig {
        &self.analyzer
    }

    pub fn doc_length(&self, article_id: &str) -> Option<u32> {
        self.doc_ids
            .iter()
            .position(|id| id == article_id)
            .map(|i| self.doc_lengths[i])
    }

    /// `(article_id, tf)` pairs for a term, in corpus order.
    pub fn term_postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|list| {
                list.iter()
                    .map(|p| (self.doc_ids[p.doc as usize].as_str(), p.tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores every document matching at least one query token. Each query
    /// token occurrence contributes once.
    fn score_all(&self, query: &str) -> Vec<(u32, f64)> {
        let tokens = tokenize(query, &self.analyzer);
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for token in tokens.iter() {
            let Some(list) = self.postings.get(token) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let tf = p.tf as f64;
                let len = self.doc_lengths[p.doc as usize] as f64;
                let norm = tf + k1 * (1.0 - b + b * len / self.avg_doc_length);
                *scores.entry(p.doc).or_insert(0.0) += idf * tf * (k1 + 1.0) / norm;
            }
        }
        scores.into_iter().collect()
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut enc = Encoder::with_header(MAGIC, VERSION);
        enc.u8(match self.analyzer.mode {
            TokenizerMode::CjkBigram => 0,
            TokenizerMode::Whitespace => 1,
        });
        enc.u8(self.analyzer.lowercase as u8);
        enc.u8(self.analyzer.strip_punctuation as u8);
        enc.f64(self.params.k1);
        enc.f64(self.params.b);
        enc.u32(self.doc_ids.len() as u32);
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            enc.str(id);
            enc.u32(*len);
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        enc.u32(terms.len() as u32);
        for term in terms {
            let list = &self.postings[term];
            enc.str(term);
            enc.u32(list.len() as u32);
            for p in list {
                enc.u32(p.doc);
                enc.u32(p.tf);
            }
        }
        enc.write(path)
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut dec = Decoder::open(&bytes, path, MAGIC, VERSION)?;
        let mode = match dec.u8()? {
            0 => TokenizerMode::CjkBigram,
            1 => TokenizerMode::Whitespace,
            _ => return Err(dec.err("unknown analyzer mode")),
        };
        let analyzer = AnalyzerConfig {
            mode,
            lowercase: dec.u8()? != 0,
            strip_punctuation: dec.u8()? != 0,
        };
        let params = Bm25Params {
            k1: dec.f64()?,
            b: dec.f64()?,
        };
        let n_docs = dec.u32()? as usize;
        let mut doc_ids = Vec::with_capacity(n_docs);
        let mut doc_lengths = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            doc_ids.push(dec.str()?);
            doc_lengths.push(dec.u32()?);
        }
        let n_terms = dec.u32()? as usize;
        let mut postings = HashMap::with_capacity(n_terms);
        for _ in 0..n_terms {
            let term = dec.str()?;
            let n = dec.u32()? as usize;
            let mut list = Vec::with_capacity(n);
            for _ in 0..n {
                let doc = dec.u32()?;
                if doc as usize >= n_docs {
                    return Err(dec.err("posting references unknown document"));
                }
                list.push(Posting { doc, tf: dec.u32()? });
            }
            postings.insert(term, list);
        }
        dec.finish()?;
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        if n_docs == 0 || total == 0 {
            return Err(Error::IndexFormat {
                path: path.to_path_buf(),
                message: "empty index".into(),
            });
        }
        Ok(Self {
            postings,
            avg_doc_length: total as f64 / n_docs as f64,
            doc_ids,
            doc_lengths,
            analyzer,
            params,
        })
    }
}

/// Top-`k` documents by BM25, descending, ties by ascending article id.
/// Only documents with a positive score are returned.
pub fn bm25_search(index: &InvertedIndex, query: &str, k: usize) -> Vec<RankedCandidate> {
    let mut ranked: Vec<RankedCandidate> = index
        .score_all(query)
        .into_iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|(doc, s)| RankedCandidate::new(index.doc_ids[doc as usize].clone(), s, Route::Sparse))
        .collect();
    sort_ranked(&mut ranked);
    ranked.truncate(k);
    ranked
}
