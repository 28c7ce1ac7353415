use serde::{Deserialize, Serialize};

use super::PromptSet;
use crate::corpus::LegalArticle;
use crate::error::Result;
use crate::llm_gateway::{ChatMessage, ChatRequest, LlmGateway, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub keep: bool,
    /// Model output exactly as returned.
    pub raw: String,
    /// True when the output was neither yes nor no and the candidate was kept.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

/// `Some(true)` for output starting with yes/是, `Some(false)` for no/否,
/// `None` otherwise. Leading whitespace and case are ignored.
pub fn parse_verdict(raw: &str) -> Option<bool> {
    let folded = raw.trim().to_lowercase();
    if folded.starts_with("yes") || folded.starts_with('是') {
        Some(true)
    } else if folded.starts_with("no") || folded.starts_with('否') {
        Some(false)
    } else {
        None
    }
}

pub(crate) fn verdict_from_raw(raw: String, yes_means_keep: bool) -> FilterVerdict {
    match parse_verdict(&raw) {
        Some(yes) => FilterVerdict { keep: yes == yes_means_keep, raw, fallback: false },
        None => {
            log::info!("unparseable verdict {raw:?}; keeping candidate");
            FilterVerdict { keep: true, raw, fallback: true }
        }
    }
}

pub(crate) fn build_literature_prompt(
    prompts: &PromptSet,
    model_id: &str,
    rewritten_query: &str,
    literature_name: &str,
) -> Result<ChatRequest> {
    let t = &prompts.literature_filter;
    let user = t.render_user(&[("query", rewritten_query), ("literature", literature_name)])?;
    Ok(ChatRequest::new(model_id, vec![ChatMessage::system(t.system_text.clone()), ChatMessage::user(user)]))
}

pub(crate) fn build_article_prompt(
    prompts: &PromptSet,
    model_id: &str,
    rewritten_query: &str,
    article: &LegalArticle,
) -> Result<ChatRequest> {
    let t = &prompts.article_filter;
    let user = t.render_user(&[
        ("query", rewritten_query),
        ("label", &article.article_label),
        ("literature", &article.literature_name),
        ("text", &article.text),
        ("article_id", &article.article_id),
    ])?;
    Ok(ChatRequest::new(model_id, vec![ChatMessage::system(t.system_text.clone()), ChatMessage::user(user)]))
}

/// Asks whether the query may involve a literature. Unparseable output keeps it.
pub fn literature_verdict(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    model_id: &str,
    rewritten_query: &str,
    literature_name: &str,
) -> Result<FilterVerdict> {
    let request = build_literature_prompt(prompts, model_id, rewritten_query, literature_name)?;
    let raw = gateway.complete(Stage::LiteratureFilter, &request)?;
    Ok(verdict_from_raw(raw, true))
}

/// Asks the article-filter question. With `yes_means_keep` a "Yes" keeps
/// the article; with it unset the literal reading applies and "No" keeps.
pub fn article_verdict(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    model_id: &str,
    rewritten_query: &str,
    article: &LegalArticle,
    yes_means_keep: bool,
) -> Result<FilterVerdict> {
    let request = build_article_prompt(prompts, model_id, rewritten_query, article)?;
    let raw = gateway.complete(Stage::ArticleFilter, &request)?;
    Ok(verdict_from_raw(raw, yes_means_keep))
}
