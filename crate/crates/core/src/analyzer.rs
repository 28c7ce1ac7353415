//! Text normalization and tokenization.
//!
//! The same analyzer feeds the BM25 index, the BERT-F1 token split and
//! the keyword-accuracy substring match, so every function here is pure.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// Overlapping character bigrams over CJK runs, word split elsewhere.
    CjkBigram,
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzerConfig {
    pub mode: TokenizerMode,
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::CjkBigram,
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl AnalyzerConfig {
    pub fn whitespace() -> Self {
        Self {
            mode: TokenizerMode::Whitespace,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<String>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

impl IntoIterator for TokenStream {
    type Item = String;
    type IntoIter = std::vec::IntoIter<String>;

    fn into_iter(self) -> Self::IntoIter {
        self.tokens.into_iter()
    }
}

/// Han ideographs, kana and hangul syllables.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F)
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

fn push_token(tokens: &mut Vec<String>, raw: &str, lowercase: bool) {
    if raw.is_empty() {
        return;
    }
    if lowercase {
        let lowered = raw.to_lowercase();
        if !lowered.is_empty() {
            tokens.push(lowered);
        }
    } else {
        tokens.push(raw.to_string());
    }
}

fn flush_cjk_run(tokens: &mut Vec<String>, run: &mut Vec<char>, lowercase: bool) {
    match run.len() {
        0 => {}
        1 => push_token(tokens, &run[0].to_string(), lowercase),
        _ => {
            for pair in run.windows(2) {
                let bigram: String = pair.iter().collect();
                push_token(tokens, &bigram, lowercase);
            }
        }
    }
    run.clear();
}

pub fn tokenize(text: &str, config: &AnalyzerConfig) -> TokenStream {
    let mut tokens = Vec::new();
    match config.mode {
        TokenizerMode::Whitespace => {
            for word in text.split_whitespace() {
                if config.strip_punctuation {
                    let kept: String = word.chars().filter(|c| !is_punctuation(*c)).collect();
                    push_token(&mut tokens, &kept, config.lowercase);
                } else {
                    push_token(&mut tokens, word, config.lowercase);
                }
            }
        }
        TokenizerMode::CjkBigram => {
            let mut cjk_run: Vec<char> = Vec::new();
            let mut word = String::new();
            for c in text.chars() {
                if is_cjk(c) {
                    push_token(&mut tokens, &word, config.lowercase);
                    word.clear();
                    cjk_run.push(c);
                    continue;
                }
                flush_cjk_run(&mut tokens, &mut cjk_run, config.lowercase);
                if c.is_alphanumeric() {
                    word.push(c);
                } else {
                    push_token(&mut tokens, &word, config.lowercase);
                    word.clear();
                    if !c.is_whitespace() && !config.strip_punctuation {
                        push_token(&mut tokens, &c.to_string(), config.lowercase);
                    }
                }
            }
            flush_cjk_run(&mut tokens, &mut cjk_run, config.lowercase);
            push_token(&mut tokens, &word, config.lowercase);
        }
    }
    TokenStream { tokens }
}

fn normalize_once(text: &str) -> String {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    let folded: String = folded.nfkc().collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// NFKC, lowercase, collapse whitespace runs to a single space and trim.
pub fn normalize(text: &str) -> String {
    // Lowercasing can leave a few code points outside NFKC; iterate to a fixed point.
    let mut current = normalize_once(text);
    for _ in 0..4 {
        let next = normalize_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}
