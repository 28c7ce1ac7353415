//! Command-line front end: `ingest`, `index`, `run`, `eval`,
//! `export-rerank` and `stats`.
//!
//! Exit codes: 0 success (including partial runs), 1 validation or usage
//! errors, 2 backend errors, 3 when every turn of a run failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{build_services, LoadedConfig, Services};
use crate::corpus::{
    corpus_stats, load_conversations, load_corpus, validate_conversations, write_articles, write_conversations,
    Corpus, LegalArticle, Literature,
};
use crate::dense_index::{build_vector_index, Embedder, VectorIndex};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, write_report};
use crate::llm_gateway::ResponseCache;
use crate::pipeline::{read_turns, run_dataset, Ablation, BackendIds, Indexes, PipelineConfig, TurnTimings};
use crate::rerank::{export_training_data, training_records, write_training_records};
use crate::sparse_index::{build_index, InvertedIndex};

#[derive(Debug, Parser)]
#[command(name = "lexrag", version, about = "Multi-turn legal consultation RAG pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Conversations processed in parallel.
    #[arg(long, global = true)]
    pub max_concurrency: Option<usize>,
    /// Seed for negative sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the corpus and conversations and store canonical copies.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        conversations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and persist the sparse and dense indexes.
    Index {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rebuild even when the stored indexes match.
        #[arg(long)]
        force: bool,
    },
    /// Run the pipeline over a dataset and write trace.jsonl and manifest.json.
    Run {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        index_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// vanilla, +rewrite, +rerank, +multiroute or +filtering.
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Score a trace against gold conversations.
    Eval {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Directory for metrics.json and metrics.csv; defaults to the trace's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write reranker training records with sampled hard negatives.
    ExportRerank {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print dataset statistics.
    Stats {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        conversations: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

const SPARSE_FILE: &str = "sparse.idx";
const DENSE_FILE: &str = "dense.idx";
const META_FILE: &str = "index.json";

/// Identity of a persisted index pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub corpus_digest: String,
    pub analyzer: crate::analyzer::AnalyzerConfig,
    pub bm25: crate::sparse_index::Bm25Params,
    pub embedding_model: String,
    pub embedding_backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatsEntry {
    pub requests: u64,
    pub cache_hits: u64,
    pub failures: u64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub conversation_id: String,
    pub turn_index: u32,
    pub stage: String,
    pub message: String,
}

/// Everything about a run that is not part of the deterministic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_path: Option<String>,
    pub config_digest: String,
    pub ablation: Option<Ablation>,
    pub pipeline_config: PipelineConfig,
    pub corpus_digest: String,
    pub backends: BackendIds,
    pub trace_file: String,
    pub trace_digest: String,
    pub started_at: String,
    pub finished_at: String,
    pub turns: usize,
    pub failed_turns: Vec<FailureEntry>,
    pub stage_stats: BTreeMap<String, StageStatsEntry>,
    pub timings: Vec<TurnTimings>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    /// Recomputes the trace digest and, when the config file still exists,
    /// its digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let trace_path = dir.join(&self.trace_file);
        let bytes = std::fs::read(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
        if sha256_hex(&bytes) != self.trace_digest {
            return Err(Error::Trace(format!("{} does not match the manifest digest", trace_path.display())));
        }
        if let Some(p) = &self.config_path {
            if let Ok(cfg) = std::fs::read(p) {
                if sha256_hex(&cfg) != self.config_digest {
                    return Err(Error::Config(format!("{p} changed since the run")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    loaded: LoadedConfig,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn input(&self, flag: &Option<PathBuf>, configured: &Option<String>, name: &str) -> Result<PathBuf> {
        match (flag, configured) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(c)) => Ok(self.loaded.resolve(c)),
            (None, None) => Err(Error::Validation(format!("--{name} is required (or set paths.{name} in the config)"))),
        }
    }

    fn corpus_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        self.input(flag, &self.loaded.config.paths.corpus, "corpus")
    }

    fn conversations_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        self.input(flag, &self.loaded.config.paths.conversations, "conversations")
    }

    fn index_dir(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone().unwrap_or_else(|| self.loaded.path_or(&self.loaded.config.paths.index_dir, "index"))
    }

    fn cache(&self) -> Result<Arc<ResponseCache>> {
        let dir = match &self.cli.cache_dir {
            Some(d) => d.clone(),
            None => self.loaded.path_or(&self.loaded.config.paths.cache_dir, ".lexrag-cache"),
        };
        Ok(Arc::new(ResponseCache::on_disk(dir)?))
    }

    fn services(&self) -> Result<Services> {
        build_services(&self.loaded, self.cache()?)
    }

    fn pipeline_config(&self, ablation: Option<Ablation>) -> PipelineConfig {
        let mut cfg = self.loaded.config.pipeline.clone();
        if let Some(a) = ablation {
            cfg.toggles = a.toggles();
        }
        if let Some(seed) = self.cli.seed {
            cfg.seed = seed;
        }
        cfg
    }
}

fn index_meta(loaded: &LoadedConfig, corpus: &Corpus, embedder: &Embedder) -> IndexMeta {
    IndexMeta {
        corpus_digest: corpus.digest(),
        analyzer: loaded.config.analyzer,
        bm25: loaded.config.bm25,
        embedding_model: embedder.model().to_string(),
        embedding_backend: embedder.backend_id(),
    }
}

fn stored_meta(dir: &Path) -> Option<IndexMeta> {
    let text = std::fs::read_to_string(dir.join(META_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn build_indexes(
    loaded: &LoadedConfig,
    articles: &[LegalArticle],
    literatures: &[Literature],
    embedder: &Embedder,
) -> Result<(InvertedIndex, VectorIndex)> {
    let sparse = build_index(articles, &loaded.config.analyzer, loaded.config.bm25)?;
    let dense = build_vector_index(articles, literatures, embedder)?;
    Ok((sparse, dense))
}

fn write_indexes(dir: &Path, meta: &IndexMeta, sparse: &InvertedIndex, dense: &VectorIndex) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sparse.write_to(&dir.join(SPARSE_FILE))?;
    dense.write_to(&dir.join(DENSE_FILE))?;
    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&meta_path, e))
}

fn cmd_ingest(ctx: &mut Ctx, corpus: &Option<PathBuf>, conversations: &Option<PathBuf>, out: &Path) -> Result<()> {
    let (articles, _) = load_corpus(&ctx.corpus_path(corpus)?)?;
    let convs = load_conversations(&ctx.conversations_path(conversations)?)?;
    let corpus = Corpus::new(articles.clone())?;
    validate_conversations(&convs, &corpus)?;
    let stats = corpus_stats(&articles, &convs)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_articles(&out.join("articles.jsonl"), &articles)?;
    write_conversations(&out.join("conversations.jsonl"), &convs)?;
    let stats_path = out.join("stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)? + "\n").map_err(|e| Error::io(&stats_path, e))?;
    writeln!(ctx.out, "{stats}").ok();
    Ok(())
}

fn cmd_index(ctx: &mut Ctx, corpus: &Option<PathBuf>, out: &Option<PathBuf>, force: bool) -> Result<()> {
    let (articles, literatures) = load_corpus(&ctx.corpus_path(corpus)?)?;
    let corpus = Corpus::new(articles.clone())?;
    let dir = ctx.index_dir(out);
    let services = ctx.services()?;
    let meta = index_meta(&ctx.loaded, &corpus, &services.backends.embedder);
    if !force && stored_meta(&dir).as_ref() == Some(&meta) && dir.join(SPARSE_FILE).exists() && dir.join(DENSE_FILE).exists() {
        writeln!(ctx.out, "indexes in {} are up to date", dir.display()).ok();
        return Ok(());
    }
    let (sparse, dense) = build_indexes(&ctx.loaded, &articles, &literatures, &services.backends.embedder)?;
    write_indexes(&dir, &meta, &sparse, &dense)?;
    writeln!(
        ctx.out,
        "indexed {} articles ({} terms, {}-dim vectors) into {}",
        corpus.len(),
        sparse.term_count(),
        dense.dimension(),
        dir.display()
    )
    .ok();
    Ok(())
}

fn cmd_run(
    ctx: &mut Ctx,
    corpus_flag: &Option<PathBuf>,
    dataset: &Option<PathBuf>,
    index_dir: &Option<PathBuf>,
    out: &Option<PathBuf>,
    ablation: Option<Ablation>,
) -> Result<()> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let (articles, literatures) = load_corpus(&ctx.corpus_path(corpus_flag)?)?;
    let convs = load_conversations(&ctx.conversations_path(dataset)?)?;
    let corpus = Corpus::new(articles.clone())?;
    validate_conversations(&convs, &corpus)?;
    let services = ctx.services()?;
    let config = ctx.pipeline_config(ablation);

    let dir = ctx.index_dir(index_dir);
    let meta = index_meta(&ctx.loaded, &corpus, &services.backends.embedder);
    let (sparse, dense) = if stored_meta(&dir).as_ref() == Some(&meta) {
        (InvertedIndex::read_from(&dir.join(SPARSE_FILE))?, VectorIndex::read_from(&dir.join(DENSE_FILE))?)
    } else {
        log::info!("no matching indexes in {}; building in memory", dir.display());
        build_indexes(&ctx.loaded, &articles, &literatures, &services.backends.embedder)?
    };
    let indexes = Indexes { corpus, sparse, dense };
    let max_concurrency = ctx.cli.max_concurrency.unwrap_or(ctx.loaded.config.run.max_concurrency);
    let output = run_dataset(&config, &indexes, &services.backends, &convs, max_concurrency)?;

    let out_dir = out.clone().unwrap_or_else(|| ctx.loaded.path_or(&ctx.loaded.config.paths.out_dir, "runs/latest"));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let trace_text = output.trace.to_jsonl()?;
    let trace_path = out_dir.join("trace.jsonl");
    std::fs::write(&trace_path, &trace_text).map_err(|e| Error::io(&trace_path, e))?;

    let failed_turns: Vec<FailureEntry> = output
        .trace
        .failed_turns()
        .into_iter()
        .map(|t| {
            let e = t.error.as_ref().expect("failed turn has an error");
            FailureEntry {
                conversation_id: t.conversation_id.clone(),
                turn_index: t.turn_index,
                stage: e.stage.clone(),
                message: e.message.clone(),
            }
        })
        .collect();
    let stage_stats = services
        .stats
        .snapshot()
        .into_iter()
        .map(|(stage, c)| {
            (
                stage.to_string(),
                StageStatsEntry { requests: c.requests, cache_hits: c.cache_hits, failures: c.failures, hit_rate: c.hit_rate() },
            )
        })
        .collect();
    let config_json = serde_json::to_string(&config)?;
    let manifest = RunManifest {
        run_id: format!(
            "{}-{}",
            chrono::Utc::now().format("%Y%m%dT%H%M%S"),
            &sha256_hex(format!("{}{}", config_json, output.trace.corpus_digest).as_bytes())[..8]
        ),
        config_path: ctx.loaded.source.as_ref().map(|p| p.display().to_string()),
        config_digest: ctx.loaded.digest.clone(),
        ablation,
        pipeline_config: config,
        corpus_digest: output.trace.corpus_digest.clone(),
        backends: output.trace.backends.clone(),
        trace_file: "trace.jsonl".into(),
        trace_digest: sha256_hex(trace_text.as_bytes()),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        turns: output.trace.turns.len(),
        failed_turns,
        stage_stats,
        timings: output.timings.clone(),
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&manifest_path, e))?;

    writeln!(
        ctx.out,
        "{} turns, {} failed; trace written to {}",
        manifest.turns,
        manifest.failed_turns.len(),
        trace_path.display()
    )
    .ok();
    for f in &manifest.failed_turns {
        writeln!(ctx.out, "  failed {}#{} at {}: {}", f.conversation_id, f.turn_index, f.stage, f.message).ok();
    }
    output.status()
}

fn cmd_eval(ctx: &mut Ctx, trace: &Path, gold: &Path, out: &Option<PathBuf>) -> Result<()> {
    let turns = read_turns(trace)?;
    let convs = load_conversations(gold)?;
    let services = ctx.services()?;
    let report = evaluate(&turns, &convs, &services.backends.embedder, &ctx.loaded.config.analyzer)?;
    let dir = out
        .clone()
        .unwrap_or_else(|| trace.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")));
    write_report(&dir, &report)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    writeln!(ctx.out, "NDCG@5            {}", fmt(report.means.ndcg_at_5)).ok();
    writeln!(ctx.out, "BERT-F1           {}", fmt(report.means.bert_f1)).ok();
    writeln!(ctx.out, "Keyword accuracy  {}", fmt(report.means.keyword_accuracy)).ok();
    writeln!(ctx.out, "Retrieval score   {}", fmt(report.means.retrieval_score)).ok();
    writeln!(ctx.out, "Generation score  {}", fmt(report.means.generation_score)).ok();
    writeln!(ctx.out, "Total             {}", fmt(report.means.total)).ok();
    writeln!(ctx.out, "scored {} turns, {} failed, {} skips", report.scored_turns, report.failed_turns, report.skipped.len()).ok();
    Ok(())
}

fn cmd_export_rerank(ctx: &mut Ctx, trace: &Path, gold: &Path, corpus: &Option<PathBuf>, out: &Path) -> Result<()> {
    let turns = read_turns(trace)?;
    let convs = load_conversations(gold)?;
    let (articles, _) = load_corpus(&ctx.corpus_path(corpus)?)?;
    let corpus = Corpus::new(articles)?;
    let seed = ctx.cli.seed.unwrap_or(ctx.loaded.config.pipeline.seed);
    let examples = export_training_data(&turns, &convs, seed)?;
    let records = training_records(&examples, &corpus)?;
    write_training_records(out, &records)?;
    let short = examples.iter().filter(|e| e.flags.iter().any(|f| f == crate::rerank::FLAG_SHORT_POOL)).count();
    writeln!(ctx.out, "wrote {} examples ({short} short) to {}", examples.len(), out.display()).ok();
    Ok(())
}

fn cmd_stats(ctx: &mut Ctx, corpus: &Option<PathBuf>, conversations: &Option<PathBuf>, json: bool) -> Result<()> {
    let (articles, _) = load_corpus(&ctx.corpus_path(corpus)?)?;
    let convs = load_conversations(&ctx.conversations_path(conversations)?)?;
    let stats = corpus_stats(&articles, &convs)?;
    if json {
        writeln!(ctx.out, "{}", serde_json::to_string_pretty(&stats)?).ok();
    } else {
        writeln!(ctx.out, "{stats}").ok();
    }
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let loaded = match &cli.config {
        Some(p) => LoadedConfig::load(p)?,
        None => LoadedConfig::defaults(),
    };
    let mut ctx = Ctx { cli, loaded, out };
    match &cli.command {
        Command::Ingest { corpus, conversations, out } => cmd_ingest(&mut ctx, corpus, conversations, out),
        Command::Index { corpus, out, force } => cmd_index(&mut ctx, corpus, out, *force),
        Command::Run { corpus, dataset, index_dir, out, ablation } => {
            cmd_run(&mut ctx, corpus, dataset, index_dir, out, *ablation)
        }
        Command::Eval { trace, gold, out } => cmd_eval(&mut ctx, trace, gold, out),
        Command::ExportRerank { trace, gold, corpus, out } => cmd_export_rerank(&mut ctx, trace, gold, corpus, out),
        Command::Stats { corpus, conversations, json } => cmd_stats(&mut ctx, corpus, conversations, *json),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                write!(err, "{rendered}").ok();
            } else {
                write!(out, "{rendered}").ok();
            }
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            e.exit_code()
        }
    }
}
