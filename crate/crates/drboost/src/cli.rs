//! Command-line pipeline.
//!
//! One binary, subcommand per stage: `gen`, `train`, `embed`, `index`,
//! `search`, `eval`, `sweep`, `margins`, `distill`. Values resolve as
//! flags > config file (TOML sections named after the subcommand) >
//! built-in defaults. Every run writes a manifest next to its outputs
//! (resolved config, seeds, input/output hashes, no timestamps), so a
//! run is reproducible from the manifest alone and repeated runs
//! produce identical directories.
//!
//! Exit codes: 0 success, 1 pipeline error, 2 usage error.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::boosting::{
    self, BoostConfig, BoostMode, DevMetric, Ensemble, Side,
};
use crate::data;
use crate::distill::DistillConfig;
use crate::encoder::TrainConfig;
use crate::error::{Error, Result};
use crate::eval;
use crate::featurizer::FeaturizerConfig;
use crate::index::{self, IvfIndex};
use crate::io::{self, IndexFile, ModelFile};
use crate::synthgen::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "drboost", version, about = "Boosted dense retrieval pipeline")]
struct Cli {
    /// TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap worker threads (falls back to env DRBOOST_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print a machine-readable JSON summary to stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Gen(GenArgs),
    /// Train a retriever (boost, iterative, or bagging mode).
    Train(TrainArgs),
    /// Embed a corpus with a model or ensemble.
    Embed(EmbedArgs),
    /// Build a search index over saved embeddings.
    Index(IndexArgs),
    /// Run queries against an index.
    Search(SearchArgs),
    /// Evaluate retrieval quality against gold pairs.
    Eval(EvalArgs),
    /// Sweep IVF probe counts and report the accuracy curve.
    Sweep(SweepArgs),
    /// Per-round top-k margin quantiles of an ensemble.
    Margins(MarginsArgs),
    /// Distill an ensemble into a single query encoder.
    Distill(DistillArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    passages_per_topic: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    words_per_passage: Option<usize>,
    #[arg(long)]
    queries_per_topic: Option<usize>,
    #[arg(long)]
    query_len: Option<usize>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    dev_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long = "train")]
    train_pairs: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Output model file (`.drbe` for ensembles, `.drbm` for a single
    /// iterative model).
    #[arg(long)]
    out: PathBuf,
    /// History TSV path (default: `<out>.history.tsv`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    mine_top_n: Option<usize>,
    #[arg(long)]
    mine_temperature: Option<f64>,
    #[arg(long)]
    dev_metric: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    buckets: Option<u64>,
    #[arg(long)]
    bigrams: Option<bool>,
    #[arg(long)]
    lowercase: Option<bool>,
    #[arg(long)]
    hash_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    /// EXACT index file produced by `embed`.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long = "type")]
    index_type: String,
    #[arg(long)]
    out: PathBuf,
    /// IVF cluster count (default: round(sqrt(rows))).
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// PQ subvector width.
    #[arg(long)]
    sub_dim: Option<usize>,
    /// After building an IVF index, verify that full-probe search
    /// reproduces exact search on sampled queries.
    #[arg(long)]
    nprobe_check: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// JSONL with query_id / query_text per line.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    nprobes: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Gold pairs JSONL (query_id / query_text / positive_ids).
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated recall depths, e.g. "10,20,100".
    #[arg(long)]
    ks: Option<String>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(long)]
    nprobes: Option<usize>,
    /// Dataset label used in report file names (default: pairs stem).
    #[arg(long)]
    dataset_name: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// IVF index file.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated probe counts (default: powers of two up to K).
    #[arg(long)]
    probes: Option<String>,
}

#[derive(Args)]
struct MarginsArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long = "train")]
    train_pairs: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    passage_term_weight: Option<f64>,
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    gen: Option<GenFile>,
    train: Option<TrainFile>,
    index: Option<IndexFile_>,
    search: Option<SearchFile>,
    eval: Option<EvalFile>,
    sweep: Option<SweepFile>,
    margins: Option<MarginsFile>,
    distill: Option<DistillFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenFile {
    seed: Option<u64>,
    topics: Option<usize>,
    passages_per_topic: Option<usize>,
    vocab_size: Option<usize>,
    words_per_passage: Option<usize>,
    queries_per_topic: Option<usize>,
    query_len: Option<usize>,
    noise_rate: Option<f64>,
    dev_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    mode: Option<String>,
    rounds: Option<usize>,
    dim: Option<usize>,
    tolerance: Option<f64>,
    negatives: Option<usize>,
    mine_top_n: Option<usize>,
    mine_temperature: Option<f64>,
    dev_metric: Option<String>,
    seed: Option<u64>,
    buckets: Option<u64>,
    bigrams: Option<bool>,
    lowercase: Option<bool>,
    hash_seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    grad_clip: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile_ {
    clusters: Option<usize>,
    iters: Option<usize>,
    seed: Option<u64>,
    sub_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchFile {
    k: Option<usize>,
    nprobes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    ks: Option<String>,
    nprobes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    k: Option<usize>,
    probes: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarginsFile {
    k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistillFile {
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    passage_term_weight: Option<f64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Parse `argv` and run. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    match dispatch(&cli) {
        Ok(summary) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&summary).unwrap());
            } else if let Some(lines) = summary.get("summary").and_then(|v| v.as_str()) {
                println!("{lines}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Run with the process arguments and environment.
pub fn run_from_env() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    run(std::env::args_os())
}

static THREAD_POOL: OnceLock<()> = OnceLock::new();

fn init_threads(flag: Option<usize>) {
    let from_env = std::env::var("DRBOOST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = flag.or(from_env) {
        THREAD_POOL.get_or_init(|| {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        });
    }
}

fn dispatch(cli: &Cli) -> Result<serde_json::Value> {
    let file = load_file_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Gen(args) => cmd_gen(args, file.gen.unwrap_or_default()),
        Command::Train(args) => cmd_train(args, file.train.unwrap_or_default()),
        Command::Embed(args) => cmd_embed(args),
        Command::Index(args) => cmd_index(args, file.index.unwrap_or_default()),
        Command::Search(args) => cmd_search(args, file.search.unwrap_or_default()),
        Command::Eval(args) => cmd_eval(args, file.eval.unwrap_or_default()),
        Command::Sweep(args) => cmd_sweep(args, file.sweep.unwrap_or_default()),
        Command::Margins(args) => cmd_margins(args, file.margins.unwrap_or_default()),
        Command::Distill(args) => cmd_distill(args, file.distill.unwrap_or_default()),
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string())
}

/// Write `<target>.manifest.json`: resolved config plus input/output
/// names and hashes. Content is deterministic for identical runs.
fn write_manifest(
    target: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let hash_list = |paths: &[&Path]| -> Result<serde_json::Value> {
        let mut map = serde_json::Map::new();
        for p in paths {
            map.insert(file_name(p), json!(io::sha256_file(p)?));
        }
        Ok(serde_json::Value::Object(map))
    };
    let manifest = json!({
        "command": command,
        "config": config,
        "inputs": hash_list(inputs)?,
        "outputs": hash_list(outputs)?,
    });
    let path = manifest_path(target);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap() + "\n")
        .map_err(|e| Error::io(&path, e))
}

fn manifest_path(target: &Path) -> PathBuf {
    if target.is_dir() {
        target.join("manifest.json")
    } else {
        let mut name = file_name(target);
        name.push_str(".manifest.json");
        target.with_file_name(name)
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen(args: &GenArgs, file: GenFile) -> Result<serde_json::Value> {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        num_topics: pick(args.topics, file.topics, defaults.num_topics),
        passages_per_topic: pick(
            args.passages_per_topic,
            file.passages_per_topic,
            defaults.passages_per_topic,
        ),
        vocab_size: pick(args.vocab_size, file.vocab_size, defaults.vocab_size),
        words_per_passage: pick(
            args.words_per_passage,
            file.words_per_passage,
            defaults.words_per_passage,
        ),
        queries_per_topic: pick(
            args.queries_per_topic,
            file.queries_per_topic,
            defaults.queries_per_topic,
        ),
        query_len: pick(args.query_len, file.query_len, defaults.query_len),
        noise_rate: pick(args.noise_rate, file.noise_rate, defaults.noise_rate),
        dev_fraction: pick(args.dev_fraction, file.dev_fraction, defaults.dev_fraction),
        seed: pick(args.seed, file.seed, defaults.seed),
    };
    let dataset = synthgen::generate(&config)?;
    synthgen::write_dataset(&dataset, &args.out)?;

    let config_echo = json!({
        "topics": config.num_topics,
        "passages_per_topic": config.passages_per_topic,
        "vocab_size": config.vocab_size,
        "words_per_passage": config.words_per_passage,
        "queries_per_topic": config.queries_per_topic,
        "query_len": config.query_len,
        "noise_rate": config.noise_rate,
        "dev_fraction": config.dev_fraction,
        "seed": config.seed,
    });
    let outputs: Vec<PathBuf> = ["corpus.jsonl", "train.jsonl", "dev.jsonl", "topics.tsv"]
        .iter()
        .map(|n| args.out.join(n))
        .collect();
    let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&args.out, "gen", config_echo.clone(), &[], &output_refs)?;

    Ok(json!({
        "command": "gen",
        "config": config_echo,
        "out": args.out.display().to_string(),
        "corpus_size": dataset.corpus.len(),
        "train_pairs": dataset.train.len(),
        "dev_pairs": dataset.dev.len(),
        "summary": format!(
            "generated {} passages, {} train / {} dev queries into {}",
            dataset.corpus.len(),
            dataset.train.len(),
            dataset.dev.len(),
            args.out.display()
        ),
    }))
}

fn resolve_train_configs(
    args: &TrainArgs,
    file: &TrainFile,
) -> Result<(BoostMode, BoostConfig, TrainConfig, usize)> {
    let mode = BoostMode::from_str(&pick(
        args.mode.clone(),
        file.mode.clone(),
        "boost".to_string(),
    ))?;
    let fz_defaults = FeaturizerConfig::default();
    let featurizer = FeaturizerConfig {
        num_buckets: pick(args.buckets, file.buckets, fz_defaults.num_buckets),
        use_bigrams: pick(args.bigrams, file.bigrams, fz_defaults.use_bigrams),
        lowercase: pick(args.lowercase, file.lowercase, fz_defaults.lowercase),
        hash_seed: pick(args.hash_seed, file.hash_seed, fz_defaults.hash_seed),
    };
    let bc_defaults = BoostConfig::default();
    let rounds = pick(args.rounds, file.rounds, bc_defaults.max_rounds);
    let boost = BoostConfig {
        featurizer,
        max_rounds: rounds,
        tolerance: pick(args.tolerance, file.tolerance, bc_defaults.tolerance),
        dim_per_round: pick(args.dim, file.dim, bc_defaults.dim_per_round),
        negatives_n: pick(args.negatives, file.negatives, bc_defaults.negatives_n),
        mine_top_n: pick(args.mine_top_n, file.mine_top_n, bc_defaults.mine_top_n),
        mine_temperature: pick(
            args.mine_temperature,
            file.mine_temperature,
            bc_defaults.mine_temperature,
        ),
        dev_metric: DevMetric::from_str(&pick(
            args.dev_metric.clone(),
            file.dev_metric.clone(),
            "r@10".to_string(),
        ))?,
        mode,
        seed: pick(args.seed, file.seed, bc_defaults.seed),
    };
    let tc_defaults = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: pick(args.lr, file.lr, tc_defaults.learning_rate),
        epochs: pick(args.epochs, file.epochs, tc_defaults.epochs),
        batch_size: pick(args.batch_size, file.batch_size, tc_defaults.batch_size),
        grad_clip: args.grad_clip.or(file.grad_clip),
        ..tc_defaults
    };
    Ok((mode, boost, train, rounds))
}

fn train_config_echo(mode: BoostMode, boost: &BoostConfig, train: &TrainConfig) -> serde_json::Value {
    json!({
        "mode": mode.to_string(),
        "rounds": boost.max_rounds,
        "dim": boost.dim_per_round,
        "tolerance": boost.tolerance,
        "negatives": boost.negatives_n,
        "mine_top_n": boost.mine_top_n,
        "mine_temperature": boost.mine_temperature,
        "dev_metric": boost.dev_metric.to_string(),
        "seed": boost.seed,
        "featurizer": boost.featurizer,
        "epochs": train.epochs,
        "lr": train.learning_rate,
        "batch_size": train.batch_size,
        "grad_clip": train.grad_clip,
    })
}

fn cmd_train(args: &TrainArgs, file: TrainFile) -> Result<serde_json::Value> {
    let (mode, boost_cfg, train_cfg, rounds) = resolve_train_configs(args, &file)?;
    let corpus = data::load_corpus(&args.corpus)?;
    let train_pairs = data::load_train_pairs(&args.train_pairs, &corpus)?;
    let dev_pairs = data::load_train_pairs(&args.dev, &corpus)?;

    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| args.out.with_file_name(format!("{}.history.tsv", stem(&args.out))));

    let (history, selected, dev_metric_value) = match mode {
        BoostMode::Boost => {
            let (ensemble, history) =
                boosting::run_boosting(&train_pairs, &dev_pairs, &corpus, &boost_cfg, &train_cfg)?;
            let selected = ensemble.len();
            io::save_ensemble(&ensemble, &args.out)?;
            let metric = history[selected - 1].dev_metric;
            (history, selected, metric)
        }
        BoostMode::Iterative => {
            let (model, history) =
                boosting::run_iterative(&train_pairs, &dev_pairs, &corpus, &boost_cfg, &train_cfg)?;
            io::save_model(&model, &args.out)?;
            let metric = history
                .iter()
                .map(|r| r.dev_metric)
                .fold(f64::NEG_INFINITY, f64::max);
            (history, 1, metric)
        }
        BoostMode::Bagging => {
            let ensemble = boosting::run_bagging(
                &train_pairs,
                &dev_pairs,
                &corpus,
                rounds,
                &boost_cfg,
                &train_cfg,
            )?;
            io::save_ensemble(&ensemble, &args.out)?;
            let feats = boosting::CorpusFeatures::build(&corpus, &boost_cfg.featurizer);
            let metric =
                boosting::evaluate_ensemble(&ensemble, &feats, &dev_pairs, boost_cfg.dev_metric)?;
            let history = vec![boosting::RoundRecord {
                round: rounds,
                dev_metric: metric,
                train_nll: f64::NAN,
            }];
            (history, rounds, metric)
        }
    };
    io::write_history(&history, &history_path)?;

    let config_echo = train_config_echo(mode, &boost_cfg, &train_cfg);
    write_manifest(
        &args.out,
        "train",
        config_echo.clone(),
        &[&args.corpus, &args.train_pairs, &args.dev],
        &[&args.out, &history_path],
    )?;

    Ok(json!({
        "command": "train",
        "config": config_echo,
        "out": args.out.display().to_string(),
        "history": history_path.display().to_string(),
        "rounds_trained": history.len(),
        "selected_rounds": selected,
        "dev_metric": dev_metric_value,
        "summary": format!(
            "{mode} training done: {} round(s), dev {} = {:.4}, model at {}",
            history.len(),
            boost_cfg.dev_metric,
            dev_metric_value,
            args.out.display()
        ),
    }))
}

fn cmd_embed(args: &EmbedArgs) -> Result<serde_json::Value> {
    let corpus = data::load_corpus(&args.corpus)?;
    let matrix = match io::load_model_file(&args.model)? {
        ModelFile::Single(model) => crate::encoder::embed_corpus(&model, &corpus),
        ModelFile::Ensemble(ensemble) => boosting::embed_corpus_ensemble(&ensemble, &corpus),
    };
    io::save_exact_index(&matrix, &args.out)?;

    let config_echo = json!({
        "model": file_name(&args.model),
        "corpus": file_name(&args.corpus),
    });
    write_manifest(
        &args.out,
        "embed",
        config_echo.clone(),
        &[&args.model, &args.corpus],
        &[&args.out],
    )?;
    Ok(json!({
        "command": "embed",
        "config": config_echo,
        "rows": matrix.num_rows,
        "dim": matrix.dim,
        "out": args.out.display().to_string(),
        "summary": format!(
            "embedded {} passages at dim {} into {}",
            matrix.num_rows,
            matrix.dim,
            args.out.display()
        ),
    }))
}

fn load_matrix(path: &Path) -> Result<index::EmbeddingMatrix> {
    match io::load_index(path)? {
        IndexFile::Exact(m) => Ok(m),
        other => Err(Error::Argument(format!(
            "{} is a {} index; expected exact embeddings",
            path.display(),
            other.type_name()
        ))),
    }
}

fn cmd_index(args: &IndexArgs, file: IndexFile_) -> Result<serde_json::Value> {
    let matrix = load_matrix(&args.embeddings)?;
    let seed = pick(args.seed, file.seed, 0);
    let iters = pick(args.iters, file.iters, index::kmeans::DEFAULT_ITERS);

    let (type_name, detail) = match args.index_type.to_lowercase().as_str() {
        "exact" => {
            io::save_exact_index(&matrix, &args.out)?;
            ("exact", json!({}))
        }
        "ivf" => {
            let k = pick(
                args.clusters,
                file.clusters,
                index::ivf::default_clusters(matrix.num_rows),
            );
            let ivf = index::build_ivf(&matrix, k, iters, seed)?;
            if args.nprobe_check {
                nprobe_check(&ivf, &matrix)?;
            }
            io::save_ivf_index(&matrix, &ivf, &args.out)?;
            ("ivf", json!({"clusters": k, "iters": iters, "seed": seed}))
        }
        "pq" => {
            let sub_dim = pick(args.sub_dim, file.sub_dim, 4);
            let pq = index::build_pq(&matrix, sub_dim, seed)?;
            io::save_pq_index(&pq, &args.out)?;
            (
                "pq",
                json!({
                    "sub_dim": sub_dim,
                    "seed": seed,
                    "num_centroids": pq.num_centroids,
                    "bytes_per_vector": pq.bytes_per_vector(),
                }),
            )
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown index type '{other}' (expected exact, ivf, or pq)"
            )))
        }
    };

    let config_echo = json!({
        "type": type_name,
        "embeddings": file_name(&args.embeddings),
        "detail": detail,
    });
    write_manifest(
        &args.out,
        "index",
        config_echo.clone(),
        &[&args.embeddings],
        &[&args.out],
    )?;
    Ok(json!({
        "command": "index",
        "config": config_echo,
        "out": args.out.display().to_string(),
        "summary": format!("built {type_name} index at {}", args.out.display()),
    }))
}

/// Full-probe IVF search must reproduce exact search; checked on up to
/// 16 deterministic probe queries drawn from the matrix rows.
fn nprobe_check(ivf: &IvfIndex, matrix: &index::EmbeddingMatrix) -> Result<()> {
    let step = (matrix.num_rows / 16).max(1);
    for row in (0..matrix.num_rows).step_by(step) {
        let query: Vec<f32> = matrix.row(row).to_vec();
        let exact = index::exact_search(matrix, &query, 10)?;
        let full = index::ivf_search(ivf, matrix, &query, 10, ivf.k())?;
        if exact != full {
            return Err(Error::Validation(format!(
                "full-probe IVF search diverged from exact search on row {row}"
            )));
        }
    }
    Ok(())
}

/// Lenient query line: positives optional (required only by eval).
#[derive(Debug, Deserialize)]
struct QueryLine {
    query_id: String,
    query_text: String,
    #[serde(default)]
    positive_ids: Vec<String>,
}

fn load_queries(path: &Path) -> Result<Vec<QueryLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    if out.is_empty() {
        return Err(Error::Argument(format!("no queries in {}", path.display())));
    }
    Ok(out)
}

fn embed_queries(ensemble: &Ensemble, queries: &[QueryLine]) -> Vec<Vec<f32>> {
    use rayon::prelude::*;
    queries
        .par_iter()
        .map(|q| boosting::ensemble_embed(ensemble, &q.query_text, Side::Query))
        .collect()
}

fn search_index(
    index_file: &IndexFile,
    query_vecs: &[Vec<f32>],
    k: usize,
    nprobes: Option<usize>,
) -> Result<Vec<index::SearchResult>> {
    use rayon::prelude::*;
    match index_file {
        IndexFile::Exact(matrix) => query_vecs
            .par_iter()
            .map(|q| index::exact_search(matrix, q, k))
            .collect(),
        IndexFile::Ivf(matrix, ivf) => {
            let probes = nprobes
                .unwrap_or_else(|| ((ivf.k() as f64).sqrt().round() as usize).clamp(1, ivf.k()));
            query_vecs
                .par_iter()
                .map(|q| index::ivf_search(ivf, matrix, q, k, probes))
                .collect()
        }
        IndexFile::Pq(pq) => query_vecs
            .par_iter()
            .map(|q| index::pq_search(pq, q, k))
            .collect(),
    }
}

fn cmd_search(args: &SearchArgs, file: SearchFile) -> Result<serde_json::Value> {
    let index_file = io::load_index(&args.index)?;
    let ensemble = io::load_model_file(&args.model)?.into_ensemble();
    if ensemble.total_dim() != index_file.dim() {
        return Err(Error::Argument(format!(
            "model dim {} does not match index dim {}",
            ensemble.total_dim(),
            index_file.dim()
        )));
    }
    let queries = load_queries(&args.queries)?;
    let k = pick(args.k, file.k, 10);
    let nprobes = args.nprobes.or(file.nprobes);

    let query_vecs = embed_queries(&ensemble, &queries);
    let results = search_index(&index_file, &query_vecs, k, nprobes)?;

    let mut out = String::from("query_id\trank\tpassage_id\tscore\n");
    for (q, r) in queries.iter().zip(&results) {
        for (rank, (id, score)) in r.entries.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", q.query_id, rank + 1, id, score));
        }
    }
    std::fs::write(&args.out, out).map_err(|e| Error::io(&args.out, e))?;

    let config_echo = json!({
        "index": file_name(&args.index),
        "index_type": index_file.type_name(),
        "model": file_name(&args.model),
        "k": k,
        "nprobes": nprobes,
    });
    write_manifest(
        &args.out,
        "search",
        config_echo.clone(),
        &[&args.index, &args.model, &args.queries],
        &[&args.out],
    )?;
    Ok(json!({
        "command": "search",
        "config": config_echo,
        "queries": queries.len(),
        "out": args.out.display().to_string(),
        "summary": format!(
            "searched {} queries (top {k}) against {} index into {}",
            queries.len(),
            index_file.type_name(),
            args.out.display()
        ),
    }))
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Argument(format!("bad integer '{t}' in list")))
        })
        .collect()
}

fn cmd_eval(args: &EvalArgs, file: EvalFile) -> Result<serde_json::Value> {
    let index_file = io::load_index(&args.index)?;
    let ensemble = io::load_model_file(&args.model)?.into_ensemble();
    if ensemble.total_dim() != index_file.dim() {
        return Err(Error::Argument(format!(
            "model dim {} does not match index dim {}",
            ensemble.total_dim(),
            index_file.dim()
        )));
    }
    let queries = load_queries(&args.pairs)?;
    for q in &queries {
        if q.positive_ids.is_empty() {
            return Err(Error::Validation(format!(
                "query '{}' carries no positive ids",
                q.query_id
            )));
        }
    }
    let ks = parse_usize_list(&pick(args.ks.clone(), file.ks, "10,20,100".to_string()))?;
    if ks.is_empty() {
        return Err(Error::Argument("empty ks list".to_string()));
    }
    let depth = ks.iter().copied().max().unwrap().max(10);
    let nprobes = args.nprobes.or(file.nprobes);

    let query_vecs = embed_queries(&ensemble, &queries);
    let results = search_index(&index_file, &query_vecs, depth, nprobes)?;
    let golds: Vec<HashSet<String>> = queries
        .iter()
        .map(|q| q.positive_ids.iter().cloned().collect())
        .collect();
    let query_ids: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();

    let qrels_by_query: Option<Vec<std::collections::HashMap<String, u32>>> =
        match &args.qrels {
            None => None,
            Some(path) => {
                let qrels = data::load_qrels(path)?;
                Some(
                    query_ids
                        .iter()
                        .map(|qid| qrels.get(qid).cloned().unwrap_or_default())
                        .collect(),
                )
            }
        };

    let report = eval::evaluate_results(
        &query_ids,
        &results,
        &golds,
        &ks,
        qrels_by_query.as_deref(),
    )?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let dataset = args
        .dataset_name
        .clone()
        .unwrap_or_else(|| stem(&args.pairs));
    let base = format!(
        "eval.{dataset}.{}.{}.k{}",
        stem(&args.model),
        index_file.type_name(),
        depth
    );
    let tsv_path = args.out_dir.join(format!("{base}.tsv"));
    let json_path = args.out_dir.join(format!("{base}.json"));

    let mut tsv = String::from("query_id\tfirst_gold_rank\n");
    for row in &report.per_query {
        tsv.push_str(&format!(
            "{}\t{}\n",
            row.query_id,
            row.first_gold_rank.map_or(0, |r| r)
        ));
    }
    std::fs::write(&tsv_path, tsv).map_err(|e| Error::io(&tsv_path, e))?;
    let metrics_json = serde_json::to_value(&report.metrics).unwrap();
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&json!({
            "dataset": dataset,
            "model": stem(&args.model),
            "index_type": index_file.type_name(),
            "k": depth,
            "metrics": metrics_json,
        }))
        .unwrap()
            + "\n",
    )
    .map_err(|e| Error::io(&json_path, e))?;

    let config_echo = json!({
        "index": file_name(&args.index),
        "model": file_name(&args.model),
        "pairs": file_name(&args.pairs),
        "ks": ks,
        "nprobes": nprobes,
        "qrels": args.qrels.as_deref().map(file_name),
    });
    write_manifest(
        &tsv_path,
        "eval",
        config_echo.clone(),
        &[&args.index, &args.model, &args.pairs],
        &[&tsv_path, &json_path],
    )?;

    let mut lines = String::new();
    for (name, value) in &report.metrics {
        lines.push_str(&format!("{name} = {value:.4}\n"));
    }
    Ok(json!({
        "command": "eval",
        "config": config_echo,
        "metrics": report.metrics,
        "tsv": tsv_path.display().to_string(),
        "json": json_path.display().to_string(),
        "summary": lines.trim_end().to_string(),
    }))
}

fn cmd_sweep(args: &SweepArgs, file: SweepFile) -> Result<serde_json::Value> {
    let (matrix, ivf) = match io::load_index(&args.index)? {
        IndexFile::Ivf(m, ivf) => (m, ivf),
        other => {
            return Err(Error::Argument(format!(
                "sweep expects an IVF index, got {}",
                other.type_name()
            )))
        }
    };
    let ensemble = io::load_model_file(&args.model)?.into_ensemble();
    let queries = load_queries(&args.pairs)?;
    let k = pick(args.k, file.k, 10);

    let probes = match pick(args.probes.clone(), file.probes, String::new()) {
        p if p.is_empty() => {
            let mut list = Vec::new();
            let mut v = 1usize;
            while v < ivf.k() {
                list.push(v);
                v *= 2;
            }
            list.push(ivf.k());
            list
        }
        p => parse_usize_list(&p)?,
    };

    let query_vecs = embed_queries(&ensemble, &queries);
    let golds: Vec<HashSet<String>> = queries
        .iter()
        .map(|q| q.positive_ids.iter().cloned().collect())
        .collect();
    let rows = eval::probe_sweep(&ivf, &matrix, &query_vecs, &golds, k, &probes)?;

    let mut tsv = String::from("n_probes\tmetric\trecall_vs_exact\n");
    for row in &rows {
        tsv.push_str(&format!(
            "{}\t{:.6}\t{:.6}\n",
            row.n_probes, row.metric, row.recall_vs_exact
        ));
    }
    std::fs::write(&args.out, tsv).map_err(|e| Error::io(&args.out, e))?;

    let config_echo = json!({
        "index": file_name(&args.index),
        "model": file_name(&args.model),
        "pairs": file_name(&args.pairs),
        "k": k,
        "probes": probes,
    });
    write_manifest(
        &args.out,
        "sweep",
        config_echo.clone(),
        &[&args.index, &args.model, &args.pairs],
        &[&args.out],
    )?;
    let json_rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| json!({"n_probes": r.n_probes, "metric": r.metric, "recall_vs_exact": r.recall_vs_exact}))
        .collect();
    Ok(json!({
        "command": "sweep",
        "config": config_echo,
        "rows": json_rows,
        "out": args.out.display().to_string(),
        "summary": format!("swept {} probe settings into {}", rows.len(), args.out.display()),
    }))
}

fn cmd_margins(args: &MarginsArgs, file: MarginsFile) -> Result<serde_json::Value> {
    let ensemble = io::load_model_file(&args.ensemble)?.into_ensemble();
    let corpus = data::load_corpus(&args.corpus)?;
    let pairs = data::load_train_pairs(&args.pairs, &corpus)?;
    let k = pick(args.k, file.k, 20);

    let rows = eval::margin_quantiles(&ensemble, &pairs, &corpus, k)?;
    let mut tsv = String::from("round\tp50\tp75\tp90\n");
    for row in &rows {
        tsv.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\n",
            row.round, row.p50, row.p75, row.p90
        ));
    }
    std::fs::write(&args.out, tsv).map_err(|e| Error::io(&args.out, e))?;

    let config_echo = json!({
        "ensemble": file_name(&args.ensemble),
        "corpus": file_name(&args.corpus),
        "pairs": file_name(&args.pairs),
        "k": k,
    });
    write_manifest(
        &args.out,
        "margins",
        config_echo.clone(),
        &[&args.ensemble, &args.corpus, &args.pairs],
        &[&args.out],
    )?;
    let json_rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| json!({"round": r.round, "p50": r.p50, "p75": r.p75, "p90": r.p90}))
        .collect();
    Ok(json!({
        "command": "margins",
        "config": config_echo,
        "rows": json_rows,
        "out": args.out.display().to_string(),
        "summary": format!("margin quantiles for {} round(s) into {}", rows.len(), args.out.display()),
    }))
}

fn cmd_distill(args: &DistillArgs, file: DistillFile) -> Result<serde_json::Value> {
    let ensemble = match io::load_model_file(&args.ensemble)? {
        ModelFile::Ensemble(e) => e,
        ModelFile::Single(_) => {
            return Err(Error::Argument(
                "distillation needs an ensemble file".to_string(),
            ))
        }
    };
    let corpus = data::load_corpus(&args.corpus)?;
    let train_pairs = data::load_train_pairs(&args.train_pairs, &corpus)?;
    let dev_pairs = data::load_train_pairs(&args.dev, &corpus)?;

    let defaults = DistillConfig::default();
    let config = DistillConfig {
        epochs: pick(args.epochs, file.epochs, defaults.epochs),
        learning_rate: pick(args.lr, file.lr, defaults.learning_rate),
        batch_size: pick(args.batch_size, file.batch_size, defaults.batch_size),
        seed: pick(args.seed, file.seed, defaults.seed),
        passage_term_weight: pick(
            args.passage_term_weight,
            file.passage_term_weight,
            defaults.passage_term_weight,
        ),
    };
    let outcome = crate::distill::distill(&ensemble, &train_pairs, &dev_pairs, &corpus, &config)?;
    io::save_model(&outcome.model, &args.out)?;

    let config_echo = json!({
        "epochs": config.epochs,
        "lr": config.learning_rate,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "passage_term_weight": config.passage_term_weight,
        "ensemble": file_name(&args.ensemble),
    });
    write_manifest(
        &args.out,
        "distill",
        config_echo.clone(),
        &[&args.ensemble, &args.corpus, &args.train_pairs, &args.dev],
        &[&args.out],
    )?;
    Ok(json!({
        "command": "distill",
        "config": config_echo,
        "out": args.out.display().to_string(),
        "best_epoch": outcome.best_epoch,
        "dev_loss": outcome.best_dev_loss,
        "summary": format!(
            "distilled {}-dim query encoder (best epoch {}, dev loss {:.4}) into {}",
            outcome.model.dim,
            outcome.best_epoch,
            outcome.best_dev_loss,
            args.out.display()
        ),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["drboost", "frobnicate"]), 2);
        assert_eq!(run(["drboost", "train"]), 2);
        assert_eq!(run(["drboost", "--help"]), 0);
    }

    #[test]
    fn pipeline_errors_exit_one() {
        assert_eq!(
            run([
                "drboost",
                "embed",
                "--model",
                "/nonexistent/model.drbm",
                "--corpus",
                "/nonexistent/corpus.jsonl",
                "--out",
                "/tmp/out.drbx",
            ]),
            1
        );
    }

    #[test]
    fn config_file_values_are_overridden_by_flags() {
        let args = GenArgs {
            out: PathBuf::from("x"),
            seed: Some(9),
            topics: None,
            passages_per_topic: None,
            vocab_size: None,
            words_per_passage: None,
            queries_per_topic: None,
            query_len: None,
            noise_rate: None,
            dev_fraction: None,
        };
        let file = GenFile {
            seed: Some(1),
            topics: Some(3),
            ..Default::default()
        };
        assert_eq!(pick(args.seed, file.seed, 7), 9);
        assert_eq!(pick(args.topics, file.topics, 20), 3);
        assert_eq!(pick(None::<usize>, None, 20), 20);
    }

    #[test]
    fn rejects_unknown_config_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nnot_a_key = 1\n").unwrap();
        assert!(load_file_config(Some(&path)).is_err());

        std::fs::write(&path, "[train]\nrounds = 3\nlr = 0.05\n").unwrap();
        let cfg = load_file_config(Some(&path)).unwrap();
        assert_eq!(cfg.train.as_ref().unwrap().rounds, Some(3));
        assert_eq!(cfg.train.as_ref().unwrap().lr, Some(0.05));
    }

    #[test]
    fn probe_list_parses() {
        assert_eq!(parse_usize_list("1,2, 4").unwrap(), vec![1, 2, 4]);
        assert!(parse_usize_list("1,x").is_err());
    }
}
