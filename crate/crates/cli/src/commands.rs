use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use densekit::encoder::{write_checkpoint, Encoder};
use densekit::evalkit::{
    accuracy, entity_f1, pearson, qa_exact_match, qa_f1, read_iob, read_qa_json, read_sts_tsv, MetricReport,
};
use densekit::objectives::KdConfig;
use densekit::retrieval::{
    build_index, document_text, ndcg_at_k, read_corpus, read_qrels, read_queries, read_run, recall_at_k,
    search_batch, timed_run_text, write_run, Index,
};
use densekit::tokenizer::{corpus_token_stats, read_documents, read_samples, train_bpe, vocab_overlap_sets, TokenizerError};
use densekit::training::{
    distill_embedder, train_embedder, AdamConfig, DataSource, DistillConfig, LogRecord, Objective, StagePlan,
    TrainError, TrainOutput,
};
use serde::Serialize;

use crate::config::{ConfigSources, RunConfig};
use crate::data::{check_vocab, embed_texts, load_encoder, load_source, load_tokenizer, read_vocab};
use crate::error::{input_err, runtime_err, CliError, CliResult};
use crate::run::Run;

#[derive(Parser, Debug)]
#[command(name = "densekit", version, about = "Tokenizer, encoder, and dense retrieval pipeline at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML). Without it, defaults apply.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable. Example: --set train.lr=1e-3
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a byte-level BPE tokenizer on `paths.corpus`.
    TrainTokenizer(TrainTokenizerArgs),
    /// Compare two vocabularies and print the overlap report.
    AnalyzeVocab(AnalyzeVocabArgs),
    /// Count the tokens several tokenizers produce on the same samples.
    TokenStats(TokenStatsArgs),
    /// Pretrain an encoder with masked-token prediction.
    PretrainMlm(TrainArgs),
    /// Run the configured training stages.
    TrainEmbedder(TrainEmbedderArgs),
    /// Distill a teacher checkpoint into a student built from `[encoder]`.
    Distill(DistillArgs),
    /// Embed `paths.corpus` and write a search index.
    Index(IndexArgs),
    /// Search the index with `paths.queries` and write a run file.
    Search(SearchArgs),
    /// Score a run file against qrels with Recall@k and nDCG@k.
    EvalRetrieval(EvalRetrievalArgs),
    /// Score downstream predictions or aggregate per-dataset scores.
    EvalMetrics(EvalMetricsArgs),
}

#[derive(Args, Debug)]
pub struct TrainTokenizerArgs {
    #[command(flatten)]
    pub common: Common,
    /// Overrides paths.corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Overrides tokenizer.vocab_size.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Defaults to <checkpoints>/tokenizer.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeVocabArgs {
    #[command(flatten)]
    pub common: Common,
    /// First vocabulary: tokenizer model, {token: id} JSON, token list, or one token per line.
    #[arg(long)]
    pub a: PathBuf,
    /// Second vocabulary, same formats.
    #[arg(long)]
    pub b: PathBuf,
    /// Print a text table instead of JSON.
    #[arg(long)]
    pub table: bool,
}

#[derive(Args, Debug)]
pub struct TokenStatsArgs {
    #[command(flatten)]
    pub common: Common,
    /// A tokenizer as NAME=PATH; repeatable. The first is the baseline.
    #[arg(long = "tokenizer", value_name = "NAME=PATH", required = true)]
    pub tokenizers: Vec<String>,
    /// Sample file (lines or {"text", "source"} JSONL); repeatable.
    #[arg(long = "samples", value_name = "PATH", required = true)]
    pub samples: Vec<PathBuf>,
    #[arg(long)]
    pub table: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Defaults to <checkpoints>/tokenizer.json.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh encoder.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output checkpoint; defaults under <checkpoints>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides train.steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainEmbedderArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Frozen teacher for distillation stages.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Defaults to <checkpoints>/embedder.dkt.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Defaults to <checkpoints>/student.dkt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Defaults to <checkpoints>/embedder.dkt.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Overrides paths.corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Defaults to <checkpoints>/index.dkt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Defaults to <checkpoints>/index.dkt.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Overrides paths.queries.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Overrides retrieval.k.
    #[arg(long)]
    pub k: Option<usize>,
    /// Defaults to <reports>/run.tsv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also time corpus encoding, query encoding, and search over
    /// paths.corpus, writing <reports>/timing.json.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug)]
pub struct EvalRetrievalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Defaults to <reports>/run.tsv.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Overrides paths.qrels.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Overrides retrieval.k.
    #[arg(long)]
    pub k: Option<usize>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricTask {
    /// Strict entity F1 over IOB files.
    Ner,
    /// Token F1 and exact match; gold QA JSON, predictions a JSON list of strings.
    Qa,
    /// Pearson correlation; gold STS TSV, predictions one score per line.
    Sts,
    /// Accuracy over one label per line.
    Accuracy,
    /// Micro/macro averages of {task: {dataset: score | [per-seed scores]}}.
    Aggregate,
}

#[derive(Args, Debug)]
pub struct EvalMetricsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub task: MetricTask,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Score file for `aggregate`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Metric label used by `aggregate`.
    #[arg(long, default_value = "score")]
    pub metric: String,
    #[arg(long)]
    pub table: bool,
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn int_value(name: &str, v: u64) -> CliResult<toml::Value> {
    i64::try_from(v)
        .map(toml::Value::Integer)
        .map_err(|_| CliError::Usage(format!("--{name} {v} is too large")))
}

/// Builds the config from file, environment, `--set`, and command flags.
fn resolve(common: &Common, flags: Vec<(&str, Option<toml::Value>)>) -> CliResult<RunConfig> {
    ConfigSources {
        file: common.config.clone(),
        env: ConfigSources::process_env(),
        sets: common.sets.clone(),
        flags: flags
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect(),
    }
    .resolve()
}

fn json_line<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(runtime_err)
}

/// Errors found while checking a plan are validation errors; anything
/// raised once steps are running is a runtime error.
fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NoSources
        | TrainError::EmptySource(_)
        | TrainError::UnknownSource(_)
        | TrainError::DuplicateSource(_)
        | TrainError::ZeroBatch
        | TrainError::InvalidStage { .. }
        | TrainError::MissingTeacher(_)
        | TrainError::MaskProbability(_) => CliError::Validation(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn report_losses(log: &[LogRecord]) {
    let mut stages: Vec<(&str, f64, f64, usize)> = Vec::new();
    for r in log {
        match stages.last_mut() {
            Some(s) if s.0 == r.stage => {
                s.2 = r.loss;
                s.3 += 1;
            }
            _ => stages.push((&r.stage, r.loss, r.loss, 1)),
        }
    }
    for (name, first, last, steps) in stages {
        eprintln!("stage {name}: {steps} steps, loss {first:.6} -> {last:.6}");
    }
}

fn checkpoint_bytes(encoder: &Encoder) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(encoder, &mut buf).map_err(runtime_err)?;
    Ok(buf)
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::TrainTokenizer(a) => train_tokenizer(a),
        Command::AnalyzeVocab(a) => analyze_vocab(a),
        Command::TokenStats(a) => token_stats(a),
        Command::PretrainMlm(a) => train_stages("pretrain-mlm", a, None, true),
        Command::TrainEmbedder(a) => train_stages("train-embedder", a.train, a.teacher, false),
        Command::Distill(a) => distill(a),
        Command::Index(a) => index(a),
        Command::Search(a) => search(a),
        Command::EvalRetrieval(a) => eval_retrieval(a),
        Command::EvalMetrics(a) => eval_metrics(a),
    }
}

fn train_tokenizer(a: TrainTokenizerArgs) -> CliResult<()> {
    let config = resolve(
        &a.common,
        vec![
            ("paths.corpus", a.corpus.as_deref().map(path_value)),
            ("tokenizer.vocab_size", a.vocab_size.map(|v| int_value("vocab-size", v as u64)).transpose()?),
        ],
    )?;
    let mut run = Run::new("train-tokenizer", config);
    let corpus = run.config.paths.require("corpus")?.to_path_buf();
    run.input(&corpus)?;
    let out = a.out.unwrap_or_else(|| run.config.paths.checkpoint("tokenizer.json"));
    let slot = run.output(out)?;
    let docs = read_documents(&corpus).map_err(|e| input_err(&corpus, e))?;
    let model = train_bpe(&docs, &run.config.tokenizer.trainer_config()).map_err(|e| match e {
        TokenizerError::EmptyCorpus => input_err(&corpus, e),
        other => runtime_err(other),
    })?;
    eprintln!(
        "trained {} merges on {} documents; vocabulary size {}",
        model.merges().len(),
        docs.len(),
        model.vocab_size()
    );
    run.put(slot, model.to_json().into_bytes());
    run.finish()
}

fn analyze_vocab(a: AnalyzeVocabArgs) -> CliResult<()> {
    let mut run = Run::new("analyze-vocab", resolve(&a.common, vec![])?);
    let va = read_vocab(&mut run, &a.a)?;
    let vb = read_vocab(&mut run, &a.b)?;
    let report = vocab_overlap_sets(va.iter().map(String::as_str), vb.iter().map(String::as_str));
    let text = if a.table {
        report.render_table()
    } else {
        json_line(&report)?
    };
    run.print(&text);
    run.finish()
}

fn token_stats(a: TokenStatsArgs) -> CliResult<()> {
    let mut run = Run::new("token-stats", resolve(&a.common, vec![])?);
    let mut models = Vec::new();
    for spec in &a.tokenizers {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--tokenizer `{spec}` is not NAME=PATH")))?;
        models.push((name.to_string(), load_tokenizer(&mut run, Path::new(path))?));
    }
    let mut samples = Vec::new();
    for path in &a.samples {
        run.input(path)?;
        samples.extend(read_samples(path).map_err(|e| input_err(path, e))?);
    }
    let named: Vec<(&str, &_)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let report = corpus_token_stats(&named, &samples).map_err(|e| CliError::Input(e.to_string()))?;
    let text = if a.table {
        report.render_table()
    } else {
        json_line(&report)?
    };
    run.print(&text);
    run.finish()
}

fn default_tokenizer(run: &Run, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| run.config.paths.checkpoint("tokenizer.json"))
}

/// Loads the configured sources that `names` refers to.
fn load_sources(
    run: &mut Run,
    names: &[String],
    tok: &densekit::tokenizer::TokenizerModel,
    max_len: usize,
) -> CliResult<Vec<DataSource>> {
    if run.config.sources.is_empty() {
        return Err(CliError::Validation("no training data: [sources] is empty".into()));
    }
    let wanted: Vec<(String, PathBuf)> = run
        .config
        .sources
        .iter()
        .filter(|(n, _)| names.contains(n))
        .map(|(n, p)| (n.clone(), p.clone()))
        .collect();
    wanted
        .iter()
        .map(|(name, path)| load_source(run, name, path, tok, max_len))
        .collect()
}

fn train_stages(command: &'static str, a: TrainArgs, teacher: Option<PathBuf>, mlm_only: bool) -> CliResult<()> {
    let config = resolve(
        &a.common,
        vec![
            ("train.steps", a.steps.map(|v| int_value("steps", v as u64)).transpose()?),
            ("train.seed", a.seed.map(|v| int_value("seed", v)).transpose()?),
        ],
    )?;
    let mut run = Run::new(command, config);
    let seed = run.config.train.seed;
    run.seed(seed);
    let tok_path = default_tokenizer(&run, a.tokenizer);
    let tok = load_tokenizer(&mut run, &tok_path)?;

    let stages = run.config.stages(mlm_only.then_some(Objective::Mlm));
    if mlm_only {
        if let Some(s) = stages.iter().find(|s| s.objective != Objective::Mlm) {
            return Err(CliError::Validation(format!(
                "pretrain-mlm runs only mlm stages; stage `{}` is {}",
                s.name,
                s.objective.name()
            )));
        }
    }
    let encoder = match &a.init {
        Some(p) => {
            run.arg("init", p.display());
            let e = load_encoder(&mut run, p)?;
            check_vocab("--init checkpoint", &e, &tok)?;
            e
        }
        None => Encoder::new(run.config.encoder.encoder_config(tok.vocab_size()), seed)
            .map_err(|e| CliError::Validation(e.to_string()))?,
    };
    let teacher = if stages.iter().any(|s| s.objective.needs_teacher()) {
        let path = teacher.ok_or_else(|| CliError::Validation("distillation stages need --teacher".into()))?;
        run.arg("teacher", path.display());
        let t = load_encoder(&mut run, &path)?;
        check_vocab("teacher", &t, &tok)?;
        Some(t)
    } else {
        None
    };
    let used: Vec<String> = stages.iter().flat_map(|s| s.sources.clone()).collect();
    let sources = load_sources(&mut run, &used, &tok, encoder.config.max_seq_len)?;
    let plan = StagePlan {
        stages,
        adam: AdamConfig::default(),
        num_special: tok.special_tokens().len(),
    };
    plan.validate(&sources).map_err(train_err)?;

    let default_out = if mlm_only { "mlm.dkt" } else { "embedder.dkt" };
    let out = a.out.unwrap_or_else(|| run.config.paths.checkpoint(default_out));
    let ckpt = run.output(out)?;
    let log_slot = run.output(run.config.paths.report(&format!("{command}.log.jsonl")))?;

    let mut log = Vec::new();
    let TrainOutput { encoder, log: records } =
        train_embedder(&plan, encoder, &sources, teacher.as_ref(), Some(&mut log)).map_err(train_err)?;
    report_losses(&records);
    run.put(ckpt, checkpoint_bytes(&encoder)?);
    run.put(log_slot, log);
    run.finish()
}

fn distill(a: DistillArgs) -> CliResult<()> {
    let config = resolve(
        &a.common,
        vec![
            ("train.steps", a.steps.map(|v| int_value("steps", v as u64)).transpose()?),
            ("train.seed", a.seed.map(|v| int_value("seed", v)).transpose()?),
        ],
    )?;
    let mut run = Run::new("distill", config);
    let t = run.config.train.clone();
    run.seed(t.seed);
    let tok_path = default_tokenizer(&run, a.tokenizer);
    let tok = load_tokenizer(&mut run, &tok_path)?;
    let teacher_path = a.teacher.unwrap_or_else(|| run.config.paths.checkpoint("embedder.dkt"));
    let teacher = load_encoder(&mut run, &teacher_path)?;
    check_vocab("teacher", &teacher, &tok)?;
    let student = Encoder::new(run.config.encoder.encoder_config(tok.vocab_size()), t.seed)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let names: Vec<String> = run.config.sources.keys().cloned().collect();
    let max_len = student.config.max_seq_len.min(teacher.config.max_seq_len);
    let sources = load_sources(&mut run, &names, &tok, max_len)?;
    let cfg = DistillConfig {
        kd: KdConfig {
            tau_kd: t.tau_kd,
            similarity_tau: t.tau,
            ..KdConfig::default()
        },
        steps: t.steps,
        batch_size: t.batch_size,
        lr: run.config.distill_lr(),
        warmup_frac: t.warmup_frac,
        seed: t.seed,
        relation_weight: t.relation_weight,
        relation_heads: t.relation_heads,
        num_special: tok.special_tokens().len(),
    };
    let out = a.out.unwrap_or_else(|| run.config.paths.checkpoint("student.dkt"));
    let ckpt = run.output(out)?;
    let log_slot = run.output(run.config.paths.report("distill.log.jsonl"))?;
    let mut log = Vec::new();
    let result = distill_embedder(&teacher, student, &sources, &cfg, Some(&mut log)).map_err(train_err)?;
    report_losses(&result.log);
    run.put(ckpt, checkpoint_bytes(&result.encoder)?);
    run.put(log_slot, log);
    run.finish()
}

fn index(a: IndexArgs) -> CliResult<()> {
    let config = resolve(&a.common, vec![("paths.corpus", a.corpus.as_deref().map(path_value))])?;
    let mut run = Run::new("index", config);
    let tok_path = default_tokenizer(&run, a.tokenizer);
    let tok = load_tokenizer(&mut run, &tok_path)?;
    let enc_path = a.encoder.unwrap_or_else(|| run.config.paths.checkpoint("embedder.dkt"));
    let encoder = load_encoder(&mut run, &enc_path)?;
    check_vocab("encoder", &encoder, &tok)?;
    let corpus_path = run.config.paths.require("corpus")?.to_path_buf();
    run.input(&corpus_path)?;
    let docs = read_corpus(&corpus_path).map_err(|e| input_err(&corpus_path, e))?;
    let out = a.out.unwrap_or_else(|| run.config.paths.checkpoint("index.dkt"));
    let slot = run.output(out)?;

    let texts: Vec<String> = docs.iter().map(document_text).collect();
    let vectors = embed_texts(&encoder, &tok, &texts)?;
    let index = build_index(docs.iter().map(|d| d.id.clone()).zip(vectors)).map_err(runtime_err)?;
    let mut buf = Vec::new();
    index.write_to(&mut buf).map_err(runtime_err)?;
    eprintln!("indexed {} documents (dimension {})", index.len(), encoder.config.model_dim);
    run.put(slot, buf);
    run.finish()
}

fn worker_pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(runtime_err)
}

fn search(a: SearchArgs) -> CliResult<()> {
    let config = resolve(
        &a.common,
        vec![
            ("paths.queries", a.queries.as_deref().map(path_value)),
            ("retrieval.k", a.k.map(|v| int_value("k", v as u64)).transpose()?),
        ],
    )?;
    let mut run = Run::new("search", config);
    let k = run.config.retrieval.k;
    let workers = run.config.retrieval.workers;
    let tok_path = default_tokenizer(&run, a.tokenizer);
    let tok = load_tokenizer(&mut run, &tok_path)?;
    let enc_path = a.encoder.unwrap_or_else(|| run.config.paths.checkpoint("embedder.dkt"));
    let encoder = load_encoder(&mut run, &enc_path)?;
    check_vocab("encoder", &encoder, &tok)?;
    let index_path = a.index.unwrap_or_else(|| run.config.paths.checkpoint("index.dkt"));
    run.input(&index_path)?;
    let index = Index::load(&index_path).map_err(|e| input_err(&index_path, e))?;
    if let Some(dim) = index.dim().filter(|d| *d != encoder.config.model_dim) {
        return Err(CliError::Validation(format!(
            "index dimension {dim} does not match encoder dimension {}",
            encoder.config.model_dim
        )));
    }
    let queries_path = run.config.paths.require("queries")?.to_path_buf();
    run.input(&queries_path)?;
    let queries = read_queries(&queries_path).map_err(|e| input_err(&queries_path, e))?;
    let corpus = if a.timing {
        let p = run.config.paths.require("corpus")?.to_path_buf();
        run.input(&p)?;
        Some(read_corpus(&p).map_err(|e| input_err(&p, e))?)
    } else {
        None
    };
    let out = a.out.unwrap_or_else(|| run.config.paths.report("run.tsv"));
    let run_slot = run.output(out)?;
    let timing_slot = match corpus {
        Some(_) => Some(run.output(run.config.paths.report("timing.json"))?),
        None => None,
    };

    let texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
    let vectors = embed_texts(&encoder, &tok, &texts)?;
    let batch: Vec<(String, Vec<f64>)> = queries.iter().map(|q| q.id.clone()).zip(vectors).collect();
    let runs = worker_pool(workers)?
        .install(|| search_batch(&index, &batch, k))
        .map_err(runtime_err)?;
    let mut buf = Vec::new();
    write_run(&runs, &mut buf).map_err(runtime_err)?;
    run.put(run_slot, buf);
    eprintln!("searched {} queries against {} documents (k = {k})", runs.len(), index.len());

    if let (Some(slot), Some(corpus)) = (timing_slot, corpus) {
        let (_, report) = timed_run_text(&encoder, &tok, &corpus, &queries, k, workers).map_err(runtime_err)?;
        eprintln!(
            "per query: encode {:.3e}s, search {:.3e}s, end to end {:.3e}s",
            report.query_encode_per_query, report.search_per_query, report.end_to_end_per_query
        );
        run.put(slot, json_line(&report)?.into_bytes());
    }
    run.finish()
}

fn eval_retrieval(a: EvalRetrievalArgs) -> CliResult<()> {
    let config = resolve(
        &a.common,
        vec![
            ("paths.qrels", a.qrels.as_deref().map(path_value)),
            ("retrieval.k", a.k.map(|v| int_value("k", v as u64)).transpose()?),
        ],
    )?;
    let mut run = Run::new("eval-retrieval", config);
    let k = run.config.retrieval.k;
    let run_path = a.run.unwrap_or_else(|| run.config.paths.report("run.tsv"));
    run.input(&run_path)?;
    let qrels_path = run.config.paths.require("qrels")?.to_path_buf();
    run.input(&qrels_path)?;
    let runs = read_run(&run_path).map_err(|e| input_err(&run_path, e))?;
    let qrels = read_qrels(&qrels_path).map_err(|e| input_err(&qrels_path, e))?;
    let slot = a.out.map(|p| run.output(p)).transpose()?;

    let recall = recall_at_k(&runs, &qrels, k).map_err(|e| CliError::Input(e.to_string()))?;
    let ndcg = ndcg_at_k(&runs, &qrels, k).map_err(|e| CliError::Input(e.to_string()))?;
    let mut report = serde_json::Map::new();
    report.insert("k".into(), k.into());
    report.insert(format!("recall@{k}"), recall.mean.into());
    report.insert(format!("ndcg@{k}"), ndcg.mean.into());
    report.insert("evaluated".into(), recall.evaluated.into());
    report.insert("excluded".into(), recall.excluded.into());
    let per_query: serde_json::Map<String, serde_json::Value> = recall
        .per_query
        .iter()
        .map(|(q, r)| {
            let n = ndcg.per_query.get(q).copied().unwrap_or(0.0);
            (q.clone(), serde_json::json!({ "recall": r, "ndcg": n }))
        })
        .collect();
    report.insert("per_query".into(), per_query.into());
    let text = json_line(&report)?;
    if let Some(slot) = slot {
        run.put(slot, format!("{text}\n").into_bytes());
    }
    run.print(&text);
    run.finish()
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn need<'a>(flag: &str, p: &'a Option<PathBuf>, task: MetricTask) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--task {task:?} needs --{flag}").to_lowercase()))
}

fn eval_metrics(a: EvalMetricsArgs) -> CliResult<()> {
    let mut run = Run::new("eval-metrics", resolve(&a.common, vec![])?);
    let inval = |e: densekit::evalkit::EvalError| CliError::Input(e.to_string());
    let text = match a.task {
        MetricTask::Aggregate => {
            let path = need("scores", &a.scores, a.task)?;
            run.input(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
            #[derive(serde::Deserialize)]
            #[serde(untagged)]
            enum Scores {
                One(f64),
                Seeds(Vec<f64>),
            }
            let raw: BTreeMap<String, BTreeMap<String, Scores>> =
                serde_json::from_str(&text).map_err(|e| input_err(path, e))?;
            let scores = raw
                .into_iter()
                .map(|(task, ds)| {
                    let ds = ds
                        .into_iter()
                        .map(|(d, s)| match s {
                            Scores::One(v) => (d, vec![v]),
                            Scores::Seeds(v) => (d, v),
                        })
                        .collect();
                    (task, ds)
                })
                .collect();
            let report = MetricReport::from_seeds(a.metric.clone(), &scores).map_err(inval)?;
            if a.table {
                report.render_table()
            } else {
                json_line(&report)?
            }
        }
        task => {
            let pred = need("pred", &a.pred, task)?.to_path_buf();
            let gold = need("gold", &a.gold, task)?.to_path_buf();
            run.input(&pred)?;
            run.input(&gold)?;
            let value = match task {
                MetricTask::Ner => {
                    let p = read_iob(&pred).map_err(|e| input_err(&pred, e))?;
                    let g = read_iob(&gold).map_err(|e| input_err(&gold, e))?;
                    serde_json::to_value(entity_f1(&p, &g).map_err(inval)?).map_err(runtime_err)?
                }
                MetricTask::Qa => {
                    let g = read_qa_json(&gold).map_err(|e| input_err(&gold, e))?;
                    let text = std::fs::read_to_string(&pred).map_err(|e| input_err(&pred, e))?;
                    let p: Vec<String> = serde_json::from_str(&text).map_err(|e| input_err(&pred, e))?;
                    if p.len() != g.len() || g.is_empty() {
                        return Err(CliError::Input(format!(
                            "{} predictions for {} questions",
                            p.len(),
                            g.len()
                        )));
                    }
                    let n = g.len() as f64;
                    let f1 = p.iter().zip(&g).map(|(p, g)| qa_f1(p, &g.answers)).sum::<f64>() / n;
                    let em = p.iter().zip(&g).map(|(p, g)| qa_exact_match(p, &g.answers)).sum::<f64>() / n;
                    serde_json::json!({ "questions": g.len(), "f1": f1, "exact_match": em })
                }
                MetricTask::Sts => {
                    let g = read_sts_tsv(&gold).map_err(|e| input_err(&gold, e))?;
                    let p: Vec<f64> = read_lines(&pred)?
                        .iter()
                        .map(|l| l.parse::<f64>().map_err(|e| input_err(&pred, format!("`{l}`: {e}"))))
                        .collect::<CliResult<_>>()?;
                    let gs: Vec<f64> = g.iter().map(|s| s.score).collect();
                    serde_json::json!({ "pairs": g.len(), "pearson": pearson(&p, &gs).map_err(inval)? })
                }
                MetricTask::Accuracy => {
                    let p = read_lines(&pred)?;
                    let g = read_lines(&gold)?;
                    serde_json::json!({ "items": g.len(), "accuracy": accuracy(&p, &g).map_err(inval)? })
                }
                MetricTask::Aggregate => unreachable!(),
            };
            json_line(&value)?
        }
    };
    run.print(&text);
    run.finish()
}
