//! Legal corpus and conversation dataset loading.
//!
//! Both files are line-delimited JSON. Articles are grouped into
//! literatures (codes) by their `literature` field in order of first
//! appearance.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegalArticle {
    pub article_id: String,
    #[serde(rename = "literature")]
    pub literature_name: String,
    #[serde(rename = "label")]
    pub article_label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Literature {
    pub name: String,
    pub article_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub turn_index: u32,
    pub query: String,
    #[serde(default)]
    pub reference_response: String,
    #[serde(default)]
    pub gold_article_ids: Vec<String>,
    #[serde(default, rename = "keywords")]
    pub reference_keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: String,
    pub turns: Vec<ConversationTurn>,
}

/// Loaded articles plus the derived literature grouping and an id lookup.
#[derive(Debug, Clone)]
pub struct Corpus {
    articles: Vec<LegalArticle>,
    literatures: Vec<Literature>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus from in-memory articles, enforcing id uniqueness.
    pub fn new(articles: Vec<LegalArticle>) -> Result<Self> {
        if articles.is_empty() {
            return Err(Error::Validation("corpus has no articles".into()));
        }
        let mut by_id = HashMap::with_capacity(articles.len());
        for (i, article) in articles.iter().enumerate() {
            validate_article(article).map_err(Error::Validation)?;
            if by_id.insert(article.article_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate article_id {:?}",
                    article.article_id
                )));
            }
        }
        let literatures = group_literatures(&articles);
        Ok(Self {
            articles,
            literatures,
            by_id,
        })
    }

    pub fn articles(&self) -> &[LegalArticle] {
        &self.articles
    }

    pub fn literatures(&self) -> &[Literature] {
        &self.literatures
    }

    pub fn get(&self, article_id: &str) -> Option<&LegalArticle> {
        self.by_id.get(article_id).map(|&i| &self.articles[i])
    }

    pub fn contains(&self, article_id: &str) -> bool {
        self.by_id.contains_key(article_id)
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    /// SHA-256 over the canonical JSONL serialization.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for article in &self.articles {
            // serialization of a plain struct of strings cannot fail
            hasher.update(serde_json::to_string(article).unwrap_or_default());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

fn validate_article(article: &LegalArticle) -> std::result::Result<(), String> {
    if article.article_id.trim().is_empty() {
        return Err("article_id is empty".into());
    }
    if article.literature_name.trim().is_empty() {
        return Err(format!("article {:?}: literature is empty", article.article_id));
    }
    if article.text.trim().is_empty() {
        return Err(format!("article {:?}: text is empty", article.article_id));
    }
    Ok(())
}

fn group_literatures(articles: &[LegalArticle]) -> Vec<Literature> {
    let mut order: Vec<Literature> = Vec::new();
    let mut position: HashMap<&str, usize> = HashMap::new();
    for article in articles {
        let slot = *position
            .entry(article.literature_name.as_str())
            .or_insert_with(|| {
                order.push(Literature {
                    name: article.literature_name.clone(),
                    article_ids: Vec::new(),
                });
                order.len() - 1
            });
        order[slot].article_ids.push(article.article_id.clone());
    }
    order
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<(usize, String)> = content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(lines)
}

/// Loads `articles.jsonl`. Articles keep file order; literatures are
/// ordered by first appearance.
pub fn load_corpus(path: &Path) -> Result<(Vec<LegalArticle>, Vec<Literature>)> {
    let mut articles = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in read_lines(path)? {
        let article: LegalArticle =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        validate_article(&article).map_err(|message| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message,
        })?;
        if let Some(&first_line) = first_seen.get(&article.article_id) {
            return Err(Error::DuplicateArticle {
                path: path.to_path_buf(),
                line: line_no,
                first_line,
                article_id: article.article_id,
            });
        }
        first_seen.insert(article.article_id.clone(), line_no);
        articles.push(article);
    }
    let literatures = group_literatures(&articles);
    Ok((articles, literatures))
}

/// Convenience wrapper returning a [`Corpus`].
pub fn open_corpus(path: &Path) -> Result<Corpus> {
    let (articles, _) = load_corpus(path)?;
    Corpus::new(articles)
}

fn check_conversation(conv: &Conversation) -> std::result::Result<(), String> {
    if conv.conversation_id.trim().is_empty() {
        return Err("conversation_id is empty".into());
    }
    if conv.turns.is_empty() {
        return Err(format!("conversation {:?} has no turns", conv.conversation_id));
    }
    for pair in conv.turns.windows(2) {
        if pair[1].turn_index <= pair[0].turn_index {
            return Err(format!(
                "conversation {:?}: turn_index not strictly increasing ({} then {})",
                conv.conversation_id, pair[0].turn_index, pair[1].turn_index
            ));
        }
    }
    for turn in &conv.turns {
        if turn.query.trim().is_empty() {
            return Err(format!(
                "conversation {:?} turn {}: empty query",
                conv.conversation_id, turn.turn_index
            ));
        }
        if turn.reference_keywords.iter().any(|k| k.trim().is_empty()) {
            return Err(format!(
                "conversation {:?} turn {}: empty keyword",
                conv.conversation_id, turn.turn_index
            ));
        }
    }
    Ok(())
}

/// Loads `conversations.jsonl`. Gold ids are not checked against a corpus
/// here; call [`validate_conversations`] for that.
pub fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let mut conversations = Vec::new();
    let mut ids = HashSet::new();
    for (line_no, line) in read_lines(path)? {
        let conv: Conversation =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        check_conversation(&conv).map_err(|message| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message,
        })?;
        if !ids.insert(conv.conversation_id.clone()) {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("duplicate conversation_id {:?}", conv.conversation_id),
            });
        }
        conversations.push(conv);
    }
    Ok(conversations)
}

/// Checks structural invariants and that every gold id resolves.
pub fn validate_conversations(conversations: &[Conversation], corpus: &Corpus) -> Result<()> {
    for conv in conversations {
        check_conversation(conv).map_err(Error::Validation)?;
    }
    let unknown: BTreeSet<String> = conversations
        .iter()
        .flat_map(|c| c.turns.iter())
        .flat_map(|t| t.gold_article_ids.iter())
        .filter(|id| !corpus.contains(id))
        .cloned()
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::UnknownArticles(unknown.into_iter().collect()))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn write_articles(path: &Path, articles: &[LegalArticle]) -> Result<()> {
    write_jsonl(path, articles)
}

pub fn write_conversations(path: &Path, conversations: &[Conversation]) -> Result<()> {
    write_jsonl(path, conversations)
}

/// Dataset aggregates. Lengths are in characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total_conversations: usize,
    pub total_queries: usize,
    pub total_articles: usize,
    pub total_literatures: usize,
    pub avg_query_length: f64,
    pub avg_response_length: f64,
    pub avg_relevant_articles_per_query: f64,
    pub avg_keywords_per_query: f64,
}

impl std::fmt::Display for StatsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Total Conversations               {}", self.total_conversations)?;
        writeln!(f, "Total Queries                     {}", self.total_queries)?;
        writeln!(f, "Total Legal Articles              {}", self.total_articles)?;
        writeln!(f, "Total Legal Literature            {}", self.total_literatures)?;
        writeln!(f, "Avg. Query Length                 {:.2}", self.avg_query_length)?;
        writeln!(f, "Avg. Response Length              {:.2}", self.avg_response_length)?;
        writeln!(
            f,
            "Avg. Relevant Articles per Query  {:.2}",
            self.avg_relevant_articles_per_query
        )?;
        write!(f, "Avg. Keywords per Query           {:.2}", self.avg_keywords_per_query)
    }
}

pub fn corpus_stats(articles: &[LegalArticle], conversations: &[Conversation]) -> Result<StatsReport> {
    let turns: Vec<&ConversationTurn> = conversations.iter().flat_map(|c| c.turns.iter()).collect();
    if turns.is_empty() {
        return Err(Error::NoData);
    }
    let n = turns.len() as f64;
    let mean = |f: &dyn Fn(&ConversationTurn) -> usize| -> f64 {
        turns.iter().map(|t| f(t)).sum::<usize>() as f64 / n
    };
    let literatures: HashSet<&str> = articles.iter().map(|a| a.literature_name.as_str()).collect();
    Ok(StatsReport {
        total_conversations: conversations.len(),
        total_queries: turns.len(),
        total_articles: articles.len(),
        total_literatures: literatures.len(),
        avg_query_length: mean(&|t| t.query.chars().count()),
        avg_response_length: mean(&|t| t.reference_response.chars().count()),
        avg_relevant_articles_per_query: mean(&|t| t.gold_article_ids.len()),
        avg_keywords_per_query: mean(&|t| t.reference_keywords.len()),
    })
}
