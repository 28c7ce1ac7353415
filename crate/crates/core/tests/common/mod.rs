#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use lexrag::config::{build_services, LoadedConfig, Services};
use lexrag::corpus::{load_conversations, load_corpus, Conversation, Corpus};
use lexrag::dense_index::build_vector_index;
use lexrag::llm_gateway::ResponseCache;
use lexrag::pipeline::{run_dataset, Indexes, PipelineConfig, RunOutput};
use lexrag::sparse_index::build_index;

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub fn toy_config_path() -> PathBuf {
    toy_dir().join("config.toml")
}

pub struct Toy {
    pub loaded: LoadedConfig,
    pub services: Services,
    pub indexes: Indexes,
    pub conversations: Vec<Conversation>,
}

pub fn toy_with_cache(cache: ResponseCache) -> Toy {
    let loaded = LoadedConfig::load(&toy_config_path()).unwrap();
    let services = build_services(&loaded, Arc::new(cache)).unwrap();
    let (articles, literatures) = load_corpus(&toy_dir().join("articles.jsonl")).unwrap();
    let sparse = build_index(&articles, &loaded.config.analyzer, loaded.config.bm25).unwrap();
    let dense = build_vector_index(&articles, &literatures, &services.backends.embedder).unwrap();
    let corpus = Corpus::new(articles).unwrap();
    let conversations = load_conversations(&toy_dir().join("conversations.jsonl")).unwrap();
    Toy { loaded, services, indexes: Indexes { corpus, sparse, dense }, conversations }
}

pub fn toy() -> Toy {
    toy_with_cache(ResponseCache::in_memory())
}

impl Toy {
    pub fn run(&self, config: &PipelineConfig) -> RunOutput {
        run_dataset(config, &self.indexes, &self.services.backends, &self.conversations, 2).unwrap()
    }

    pub fn run_conversations(&self, config: &PipelineConfig, convs: &[Conversation]) -> RunOutput {
        run_dataset(config, &self.indexes, &self.services.backends, convs, 2).unwrap()
    }
}

/// Runs the CLI in-process, returning (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["lexrag"];
    full.extend_from_slice(args);
    let code = lexrag::cli::run_cli(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
