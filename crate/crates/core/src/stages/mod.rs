//! Prompt construction and output parsing for the four LLM stages.
//!
//! Templates are plain text files split into `[section]` blocks (`system`,
//! `user`, and for generation `clause` / `no_clauses`). Named `{slot}`
//! placeholders are filled in a single pass; `{{` and `}}` escape literal
//! braces. Any slot left without a value is an error.

mod filter;
mod generate;
mod rewrite;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{article_verdict, literature_verdict, parse_verdict, FilterVerdict};
pub use generate::build_generation_prompt;
pub use rewrite::{build_rewrite_prompt, parse_rewrite, RewriteResult, MAX_KEYWORDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Rewrite,
    LiteratureFilter,
    ArticleFilter,
    Generate,
}

impl PromptStage {
    fn builtin(self) -> &'static str {
        match self {
            PromptStage::Rewrite => include_str!("../../templates/rewrite.txt"),
            PromptStage::LiteratureFilter => include_str!("../../templates/literature_filter.txt"),
            PromptStage::ArticleFilter => include_str!("../../templates/article_filter.txt"),
            PromptStage::Generate => include_str!("../../templates/generate.txt"),
        }
    }

    fn name(self) -> &'static str {
        match self {
            PromptStage::Rewrite => "rewrite",
            PromptStage::LiteratureFilter => "literature_filter",
            PromptStage::ArticleFilter => "article_filter",
            PromptStage::Generate => "generate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: PromptStage,
    pub system_text: String,
    pub user_template: String,
    /// Extra named sections beyond `system` and `user`.
    pub sections: BTreeMap<String, String>,
}

impl PromptTemplate {
    pub fn parse(stage: PromptStage, source: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, String> = BTreeMap::new();
        let mut current: Option<String> = None;
        let mut body = String::new();
        for line in source.lines() {
            let trimmed = line.trim();
            if trimmed.len() > 2
                && trimmed.starts_with('[')
                && trimmed.ends_with(']')
                && trimmed[1..trimmed.len() - 1]
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c == '_')
            {
                if let Some(name) = current.take() {
                    sections.insert(name, std::mem::take(&mut body));
                }
                current = Some(trimmed[1..trimmed.len() - 1].to_string());
                continue;
            }
            if current.is_none() {
                if trimmed.is_empty() {
                    continue;
                }
                return Err(Error::Config(format!(
                    "template {}: text before the first [section]",
                    stage.name()
                )));
            }
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(line);
        }
        if let Some(name) = current {
            sections.insert(name, body);
        }
        let mut take = |name: &str| {
            sections.remove(name).ok_or_else(|| {
                Error::Config(format!("template {}: missing [{name}] section", stage.name()))
            })
        };
        let system_text = take("system")?;
        let user_template = take("user")?;
        Ok(Self { stage, system_text, user_template, sections })
    }

    pub fn builtin(stage: PromptStage) -> Self {
        Self::parse(stage, stage.builtin()).expect("built-in templates are well formed")
    }

    pub fn load(stage: PromptStage, path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(stage, &source)
    }

    pub fn render_user(&self, vars: &[(&str, &str)]) -> Result<String> {
        render(self.stage.name(), &self.user_template, vars)
    }

    pub fn render_section(&self, section: &str, vars: &[(&str, &str)]) -> Result<String> {
        let template = self.sections.get(section).ok_or_else(|| {
            Error::Config(format!("template {}: missing [{section}] section", self.stage.name()))
        })?;
        render(self.stage.name(), template, vars)
    }
}

/// Single-pass `{name}` substitution. Substituted values are not rescanned.
pub fn render(template_name: &str, template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") {
            out.push('{');
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with("}}") {
            out.push('}');
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(end) = tail[1..].find('}') {
                let name = &tail[1..1 + end];
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    let value = vars
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| Error::UnresolvedPlaceholder {
                            template: template_name.to_string(),
                            placeholder: name.to_string(),
                        })?;
                    out.push_str(value);
                    rest = &tail[end + 2..];
                    continue;
                }
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// The four stage templates used by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub rewrite: PromptTemplate,
    pub literature_filter: PromptTemplate,
    pub article_filter: PromptTemplate,
    pub generate: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            rewrite: PromptTemplate::builtin(PromptStage::Rewrite),
            literature_filter: PromptTemplate::builtin(PromptStage::LiteratureFilter),
            article_filter: PromptTemplate::builtin(PromptStage::ArticleFilter),
            generate: PromptTemplate::builtin(PromptStage::Generate),
        }
    }
}

/// Template file overrides; unset stages use the built-in text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplatePaths {
    pub rewrite: Option<String>,
    pub literature_filter: Option<String>,
    pub article_filter: Option<String>,
    pub generate: Option<String>,
}

impl PromptSet {
    pub fn load(paths: &TemplatePaths, base_dir: &Path) -> Result<Self> {
        let pick = |stage: PromptStage, path: &Option<String>| match path {
            Some(p) => PromptTemplate::load(stage, &base_dir.join(p)),
            None => Ok(PromptTemplate::builtin(stage)),
        };
        Ok(Self {
            rewrite: pick(PromptStage::Rewrite, &paths.rewrite)?,
            literature_filter: pick(PromptStage::LiteratureFilter, &paths.literature_filter)?,
            article_filter: pick(PromptStage::ArticleFilter, &paths.article_filter)?,
            generate: pick(PromptStage::Generate, &paths.generate)?,
        })
    }
}
