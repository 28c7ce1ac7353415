use super::PromptSet;
use crate::corpus::LegalArticle;
use crate::error::Result;
use crate::llm_gateway::{ChatMessage, ChatRequest};

/// Numbered reference block in rank order, or the `no_clauses` line.
pub(crate) fn render_references(prompts: &PromptSet, articles: &[&LegalArticle]) -> Result<String> {
    let t = &prompts.generate;
    if articles.is_empty() {
        return t.render_section("no_clauses", &[]);
    }
    let mut lines = Vec::with_capacity(articles.len());
    for (i, article) in articles.iter().enumerate() {
        let rank = (i + 1).to_string();
        lines.push(t.render_section(
            "clause",
            &[
                ("rank", &rank),
                ("label", &article.article_label),
                ("literature", &article.literature_name),
                ("text", &article.text),
                ("article_id", &article.article_id),
            ],
        )?);
    }
    Ok(lines.join("\n"))
}

/// Prior turns become alternating user/assistant messages using the
/// pipeline's own earlier responses.
pub fn build_generation_prompt(
    prompts: &PromptSet,
    model_id: &str,
    history: &[(String, String)],
    current_query: &str,
    top_articles: &[&LegalArticle],
) -> Result<ChatRequest> {
    let t = &prompts.generate;
    let references = render_references(prompts, top_articles)?;
    let user = t.render_user(&[("query", current_query), ("references", &references)])?;
    let mut messages = Vec::with_capacity(2 + 2 * history.len());
    messages.push(ChatMessage::system(t.system_text.clone()));
    for (query, response) in history {
        messages.push(ChatMessage::user(query.clone()));
        messages.push(ChatMessage::assistant(response.clone()));
    }
    messages.push(ChatMessage::user(user));
    Ok(ChatRequest::new(model_id, messages))
}
