use serde::{Deserialize, Serialize};

use super::PromptSet;
use crate::error::{Error, Result};
use crate::llm_gateway::{ChatMessage, ChatRequest};

pub const MAX_KEYWORDS: usize = 8;

const OPEN: &str = "<keyword>";
const CLOSE: &str = "</keyword>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub rewritten_query: String,
    pub keywords: Vec<String>,
}

impl RewriteResult {
    pub fn passthrough(query: &str) -> Self {
        Self { rewritten_query: query.trim().to_string(), keywords: Vec::new() }
    }

    /// BM25 query string: rewritten text followed by the keywords.
    pub fn sparse_query(&self) -> String {
        let mut q = self.rewritten_query.clone();
        for k in &self.keywords {
            q.push(' ');
            q.push_str(k);
        }
        q
    }
}

fn render_history(history: &[String]) -> String {
    if history.is_empty() {
        return String::new();
    }
    let lines: Vec<String> = history.iter().map(|q| format!("User: {q}")).collect();
    format!("Historical Question: {}\n", lines.join("\n"))
}

pub fn build_rewrite_prompt(
    prompts: &PromptSet,
    model_id: &str,
    history: &[String],
    current_query: &str,
) -> Result<ChatRequest> {
    let history = render_history(history);
    let user = prompts
        .rewrite
        .render_user(&[("history", &history), ("query", current_query)])?;
    Ok(ChatRequest::new(
        model_id,
        vec![ChatMessage::system(prompts.rewrite.system_text.clone()), ChatMessage::user(user)],
    ))
}

/// Removes every well-formed `<keyword>…</keyword>` span.
fn strip_spans(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(open) = rest.find(OPEN) {
        match rest[open + OPEN.len()..].find(CLOSE) {
            Some(close) => {
                out.push_str(&rest[..open]);
                rest = &rest[open + OPEN.len() + close + CLOSE.len()..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

/// Drops a trailing run of punctuation left orphaned after span removal,
/// e.g. the `.` in `"… reduced. <keyword>…</keyword>."`.
fn drop_orphan_tail(text: &str) -> &str {
    let trimmed = text.trim();
    if let Some(ws) = trimmed.rfind(char::is_whitespace) {
        let tail = &trimmed[ws..].trim_start();
        if !tail.is_empty() && tail.chars().all(|c| !c.is_alphanumeric()) {
            let head = trimmed[..ws].trim_end();
            if !head.is_empty() {
                return head;
            }
        }
    }
    trimmed
}

/// Keywords come from the first `<keyword>` span, split on ASCII or
/// full-width commas, trimmed and deduplicated in order. The query text is
/// everything outside the spans.
pub fn parse_rewrite(raw: &str) -> Result<RewriteResult> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyRewrite);
    }
    let span = trimmed.find(OPEN).and_then(|open| {
        let body_start = open + OPEN.len();
        trimmed[body_start..]
            .find(CLOSE)
            .map(|close| &trimmed[body_start..body_start + close])
    });
    let Some(body) = span else {
        return Ok(RewriteResult { rewritten_query: trimmed.to_string(), keywords: Vec::new() });
    };
    let mut keywords: Vec<String> = Vec::new();
    for piece in body.split([',', '，']) {
        let k = piece.replace(OPEN, "").replace(CLOSE, "");
        let k = k.trim();
        if !k.is_empty() && !keywords.iter().any(|existing| existing == k) {
            keywords.push(k.to_string());
        }
    }
    keywords.truncate(MAX_KEYWORDS);
    if !keywords.is_empty() && !(3..=5).contains(&keywords.len()) {
        log::warn!("rewrite produced {} keywords (expected 3 to 5)", keywords.len());
    }
    let stripped = strip_spans(trimmed);
    let mut rewritten = drop_orphan_tail(&stripped).to_string();
    if rewritten.is_empty() {
        rewritten = if keywords.is_empty() { trimmed.to_string() } else { keywords.join(" ") };
    }
    Ok(RewriteResult { rewritten_query: rewritten, keywords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE_HISTORY: &str = "Hello, my health certificate has expired, and I was told that I will be fined 10,000 yuan. How should I deal with it?";
    const EXAMPLE_CURRENT: &str = "I have re-applied for a health certificate and submitted a medical examination report. Can the penalty be reduced or waived?";
    const EXAMPLE_OUTPUT: &str = "Whether re-applying for a health certificate and submitting a medical examination report belong to the circumstances where an administrative penalty can be reduced. <keyword>Re-applying for health certificate, Submitting medical examination report, Reduction of administrative penalty, Timely correction of illegal act, Mitigation of harmful consequences</keyword>.";

    #[test]
    fn empty_history_has_only_current_line() {
        let req = build_rewrite_prompt(&PromptSet::default(), "m", &[], "罚款怎么办").unwrap();
        assert_eq!(req.messages.len(), 2);
        assert_eq!(req.user_text().unwrap(), "Current Question: 罚款怎么办");
    }

    #[test]
    fn history_in_order_before_current() {
        let history = vec!["第一".to_string(), "第二".to_string()];
        let req = build_rewrite_prompt(&PromptSet::default(), "m", &history, "第三").unwrap();
        let user = req.user_text().unwrap();
        let a = user.find("第一").unwrap();
        let b = user.find("第二").unwrap();
        let c = user.find("Current Question: 第三").unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn health_certificate_dialogue_layout() {
        let req = build_rewrite_prompt(&PromptSet::default(), "m", &[EXAMPLE_HISTORY.to_string()], EXAMPLE_CURRENT).unwrap();
        assert_eq!(
            req.user_text().unwrap(),
            format!("Historical Question: User: {EXAMPLE_HISTORY}\nCurrent Question: {EXAMPLE_CURRENT}")
        );
        assert!(req.messages[0].content.contains("3 to 5 key legal terms"));
        assert!(req.messages[0].content.contains("<keyword></keyword>"));
    }

    #[test]
    fn parse_basic() {
        let r = parse_rewrite("Q text <keyword>a, b, c</keyword>").unwrap();
        assert_eq!(r.rewritten_query, "Q text");
        assert_eq!(r.keywords, vec!["a", "b", "c"]);
    }

    #[test]
    fn parse_worked_example_output() {
        let r = parse_rewrite(EXAMPLE_OUTPUT).unwrap();
        assert_eq!(r.keywords.len(), 5);
        assert!(r.keywords.iter().any(|k| k == "Reduction of administrative penalty"));
        assert_eq!(
            r.rewritten_query,
            "Whether re-applying for a health certificate and submitting a medical examination report belong to the circumstances where an administrative penalty can be reduced."
        );
    }

    #[test]
    fn parse_dedup_and_chinese_commas() {
        assert_eq!(parse_rewrite("Q <keyword>a,a, b</keyword>").unwrap().keywords, vec!["a", "b"]);
        assert_eq!(
            parse_rewrite("健康证 <keyword>健康证，罚款，行政处罚</keyword>").unwrap().keywords,
            vec!["健康证", "罚款", "行政处罚"]
        );
    }

    #[test]
    fn first_span_wins_and_all_spans_removed() {
        let r = parse_rewrite("A <keyword>x,y</keyword> B <keyword>z</keyword>").unwrap();
        assert_eq!(r.keywords, vec!["x", "y"]);
        assert_eq!(r.rewritten_query, "A  B");
    }

    #[test]
    fn no_tags_or_unclosed() {
        let r = parse_rewrite("  just a query  ").unwrap();
        assert_eq!(r, RewriteResult { rewritten_query: "just a query".into(), keywords: vec![] });
        let r = parse_rewrite("query <keyword>a, b").unwrap();
        assert_eq!(r.rewritten_query, "query <keyword>a, b");
        assert!(r.keywords.is_empty());
    }

    #[test]
    fn empty_rewrite_is_an_error() {
        assert!(matches!(parse_rewrite("   \n"), Err(Error::EmptyRewrite)));
    }

    #[test]
    fn only_keywords() {
        let r = parse_rewrite("<keyword>a, b</keyword>").unwrap();
        assert_eq!(r.rewritten_query, "a b");
        let r = parse_rewrite("<keyword></keyword>").unwrap();
        assert_eq!(r.rewritten_query, "<keyword></keyword>");
    }

    #[test]
    fn sparse_query_concatenates_keywords() {
        let r = RewriteResult { rewritten_query: "q".into(), keywords: vec!["a".into(), "b".into()] };
        assert_eq!(r.sparse_query(), "q a b");
    }

    proptest! {
        #[test]
        fn parse_is_total(raw in "(\\PC|<keyword>|</keyword>|,|，){0,60}") {
            match parse_rewrite(&raw) {
                Ok(r) => {
                    prop_assert!(!r.rewritten_query.is_empty());
                    prop_assert!(r.keywords.len() <= MAX_KEYWORDS);
                    for k in &r.keywords {
                        prop_assert!(!k.is_empty());
                        prop_assert_eq!(k.trim(), k.as_str());
                        prop_assert!(!k.contains("<keyword>") && !k.contains("</keyword>"));
                    }
                }
                Err(_) => prop_assert!(raw.trim().is_empty()),
            }
        }

        #[test]
        fn prompt_injective(a in "[a-z行政处罚]{1,8}", b in "[a-z行政处罚]{1,8}", h in proptest::collection::vec("[a-z民事]{1,5}", 0..3)) {
            let set = PromptSet::default();
            let ra = build_rewrite_prompt(&set, "m", &h, &a).unwrap();
            let rb = build_rewrite_prompt(&set, "m", &h, &b).unwrap();
            prop_assert_eq!(a == b, ra.user_text() == rb.user_text());
        }
    }
}
