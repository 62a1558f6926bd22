//! Command-line surface: `train`, `encode`, `search`, `eval`,
//! `export-hierarchy`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::index;
use crate::io;
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "hyperpq", version, about = "Hyperbolic product quantization for vector retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on an fvecs feature file.
    Train(TrainArgs),
    /// Encode a database into a packed code file.
    Encode(EncodeArgs),
    /// Rank the encoded database for each query with lookup-table distances.
    #[command(after_help = "Output CSV columns: query_id,rank,item_id,distance (rank starts at 1).")]
    Search(SearchArgs),
    /// Print MAP@N of a results file.
    Eval(EvalArgs),
    /// Rebuild the training hierarchy on a feature file and write it as CSV.
    #[command(name = "export-hierarchy", after_help = "Output CSV columns: item_id,level,cluster_id (level 1 is the finest).")]
    ExportHierarchy(ExportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// fvecs feature file.
    #[arg(long)]
    features: PathBuf,
    /// key=value configuration file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV (epoch,L_aug,L_prot,L_ins,total,mean_quant_error,lr).
    /// Defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Override any configuration key, e.g. `--set lr_start=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codes: PathBuf,
    /// fvecs query file.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    topn: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    /// One comma-separated label set per query.
    #[arg(long)]
    query_labels: PathBuf,
    /// One comma-separated label set per database item.
    #[arg(long)]
    db_labels: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Cluster counts, finest first.
    #[arg(long, default_value = "200,100,50")]
    levels: String,
    #[arg(long)]
    out: PathBuf,
    /// K-means seed; defaults to the seed recorded in the model.
    #[arg(long)]
    seed: Option<u64>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalFailure(_) | Error::DegenerateAggregation(_) => EXIT_NUMERICAL,
        Error::InvalidArgument(_)
        | Error::Consistency(_)
        | Error::Format { .. }
        | Error::Parse { .. }
        | Error::Io(_) => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a, out),
        Command::ExportHierarchy(a) => export_hierarchy(a),
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v).map_err(Error::InvalidArgument)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_metrics_path(model: &Path) -> PathBuf {
    let mut p = model.as_os_str().to_owned();
    p.push(".metrics.csv");
    PathBuf::from(p)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let features = io::read_features(&a.features)?;
    let result = trainer::train(&features, &cfg)?;
    io::save_model(&a.out, &result.model, &cfg.to_text())?;
    let metrics = a.metrics.clone().unwrap_or_else(|| default_metrics_path(&a.out));
    io::write_atomic(&metrics, io::metrics_to_csv(&result.metrics).as_bytes())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let (model, _) = io::load_model(&a.model)?;
    let features = io::read_features(&a.features)?;
    let db = index::encode_database(&model, &features)?;
    io::write_codes(&a.out, &db)
}

fn search(a: SearchArgs) -> Result<()> {
    if a.topn == 0 {
        return Err(Error::invalid("--topn must be at least 1"));
    }
    let (model, _) = io::load_model(&a.model)?;
    let db = io::read_codes(&a.codes)?;
    db.check_codebook(&model.codebook)?;
    let queries = io::read_features(&a.queries)?;
    if !queries.is_empty() && queries.dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "queries have {} dimensions, model expects {}",
            queries.dim(),
            model.input_dim()
        )));
    }
    let mut results = Vec::with_capacity(queries.rows());
    for q in queries.iter_rows().take(queries.rows()) {
        let (_, h) = model.embed(q)?;
        let table = index::build_lookup_table(&h, &model.codebook)?;
        results.push(index::adc_search(&table, &db, a.topn)?);
    }
    io::write_results(&a.out, &results)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut rankings = io::read_results(&a.results)?;
    let query_labels = io::read_labels(&a.query_labels)?;
    let db_labels = io::read_labels(&a.db_labels)?;
    if rankings.len() > query_labels.len() {
        return Err(Error::Consistency(format!(
            "results mention query {} but only {} query label sets were given",
            rankings.len() - 1,
            query_labels.len()
        )));
    }
    // queries that retrieved nothing have no rows in the results file
    rankings.resize(query_labels.len(), Vec::new());
    let map = index::map_at_n(&rankings, &query_labels, &db_labels, a.n)?;
    writeln!(out, "{map:.4}")?;
    Ok(())
}

fn export_hierarchy(a: ExportArgs) -> Result<()> {
    let (model, echo) = io::load_model(&a.model)?;
    let mut cfg = TrainConfig::parse(&echo).unwrap_or_default();
    cfg.set("hierarchy_levels", &a.levels).map_err(Error::InvalidArgument)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if cfg.hierarchy_levels.is_empty() || cfg.hierarchy_levels.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("--levels must be a strictly decreasing list of cluster counts"));
    }
    let features = io::read_features(&a.features)?;
    if features.dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "features have {} dimensions, model expects {}",
            features.dim(),
            model.input_dim()
        )));
    }
    let tangents = trainer::embed_all(&model, &features)?;
    let h = Hierarchy::build(&tangents, model.embedding_width(), &cfg.hierarchy_levels, cfg.kmeans_iters, cfg.seed)?;
    let mut s = String::from("item_id,level,cluster_id\n");
    for lvl in h.levels() {
        for (i, c) in lvl.assignment().iter().enumerate() {
            let _ = writeln!(s, "{i},{},{c}", lvl.level() + 1);
        }
    }
    io::write_atomic(&a.out, s.as_bytes())
}
