//! Command-line surface: `train`, `predict`, `baseline`, `eval`, `simulate`.
//!
//! Exit codes:
//!
//! | code | meaning                                                  |
//! |------|----------------------------------------------------------|
//! | 0    | success                                                  |
//! | 1    | I/O failure (missing file, unwritable output)            |
//! | 2    | usage error (bad flag or flag value)                     |
//! | 3    | parse or validation error in an input file               |
//! | 4    | numerical failure (singular system, no prediction)       |
//! | 5    | `train` stopped at `--max-iters` (model is still written)|

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::baselines::{aggregate_norms, sentence_features, Aggregator, StopList};
use crate::em::{fit_em, EmConfig, EmError, Termination};
use crate::io::{self, FormatError};
use crate::metrics::{learnability, DimensionMetrics, Metric, MetricsReport, PairedSeries};
use crate::model::{Dataset, Dimensions, Instance};
use crate::predict::{predict_dataset, PredictError, PredictionConfig};
use crate::synth::{generate, generate_with_model, SimError, SimSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_NOT_CONVERGED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "normfusion", version, about = "Multidimensional annotation fusion and norm prediction")]
pub struct Cli {
    /// Print debug logging from the library.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the fusion model with EM.
    Train(TrainArgs),
    /// Predict a held-out dimension from partial annotations.
    Predict(PredictArgs),
    /// Aggregate word norms into sentence norms.
    Baseline(BaselineArgs),
    /// Compare predictions against references.
    Eval(EvalArgs),
    /// Write a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Precomputed feature CSV (`instance_id,f1,...`).
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    features: Option<PathBuf>,
    /// Embedding text file; instance ids are looked up as words unless `--text` is given.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Sentence file; features are the mean embedding of each sentence's tokens.
    #[arg(long, requires = "embeddings")]
    text: Option<PathBuf>,
    #[arg(long, requires = "text")]
    pretokenized: bool,
    /// Expected dimension names, comma separated.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<String>>,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u32).range(1..))]
    max_iters: u32,
    #[arg(long, default_value_t = 1e-8)]
    ridge: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    target_dim: String,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    /// Scale each equation by the annotator's inverse noise standard deviation.
    #[arg(long)]
    weight_by_noise: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    sentences: PathBuf,
    /// One word per line; defaults to a built-in English list.
    #[arg(long)]
    stoplist: Option<PathBuf>,
    #[arg(long, default_value = "mean")]
    agg: Aggregator,
    #[arg(long)]
    pretokenized: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "ccc,pearson,mse")]
    metrics: Vec<Metric>,
    /// Feature CSV for the learnability score of each reference dimension.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6, requires = "features")]
    learnability_ridge: f64,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// TOML simulation spec; omitted fields take word-scale defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample from an existing model instead of drawing parameters.
    #[arg(long)]
    from_model: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let code = match e {
            FormatError::Io { .. } => EXIT_IO,
            _ => EXIT_PARSE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<EmError> for CliError {
    fn from(e: EmError) -> Self {
        let code = match e {
            EmError::InvalidConfig(_) => EXIT_USAGE,
            EmError::SingularPosterior(_)
            | EmError::RankDeficientFeatures
            | EmError::SingularSecondMoment(_)
            | EmError::NonMonotone { .. } => EXIT_NUMERICAL,
            _ => EXIT_PARSE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<PredictError> for CliError {
    fn from(e: PredictError) -> Self {
        let code = match e {
            PredictError::BadRidge(_) | PredictError::Model(_) => EXIT_USAGE,
            PredictError::NoUsableEquations(_) => EXIT_NUMERICAL,
            _ => EXIT_PARSE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::SingularJoint => EXIT_NUMERICAL,
            _ => EXIT_PARSE,
        };
        CliError::new(code, e.to_string())
    }
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(write_err(path))
}

/// Entry point used by the binary; parses `std::env::args`.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::new()
            .filter_level(log::LevelFilter::Debug)
            .try_init();
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Baseline(a) => baseline(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn train_instances(args: &TrainArgs, wanted: &BTreeSet<String>) -> Result<Vec<Instance>, CliError> {
    if let Some(path) = &args.features {
        let all = io::read_feature_csv(path)?;
        return Ok(all.into_iter().filter(|i| wanted.contains(&i.id)).collect());
    }
    let emb_path = args.embeddings.as_ref().expect("clap enforces features or embeddings");
    let table = io::read_embeddings(emb_path)?;
    match &args.text {
        None => wanted
            .iter()
            .map(|word| match table.get(word) {
                Some(v) => Ok(Instance::new(word.clone(), v.to_vec())),
                None => Err(CliError::new(
                    EXIT_PARSE,
                    format!("word `{word}` is not in embedding file {}", emb_path.display()),
                )),
            })
            .collect(),
        Some(text) => {
            let sentences: BTreeMap<String, Vec<String>> =
                io::read_sentences(text, args.pretokenized)?.into_iter().collect();
            wanted
                .iter()
                .map(|id| {
                    let tokens = sentences.get(id).ok_or_else(|| {
                        CliError::new(
                            EXIT_PARSE,
                            format!("instance `{id}` is not in sentence file {}", text.display()),
                        )
                    })?;
                    let feats = sentence_features(tokens, &table, None);
                    if feats.no_embeddings {
                        return Err(CliError::new(
                            EXIT_PARSE,
                            format!("sentence `{id}` has no token in embedding file {}", emb_path.display()),
                        ));
                    }
                    Ok(Instance::new(id.clone(), feats.vector))
                })
                .collect()
        }
    }
}

fn train(args: TrainArgs) -> Result<i32, CliError> {
    let (dims, records) = io::read_annotations(&args.annotations)?;
    if let Some(names) = &args.dims {
        let expected = Dimensions::new(names.iter().map(|s| s.trim().to_string()))
            .map_err(|e| CliError::new(EXIT_USAGE, format!("--dims: {e}")))?;
        io::check_dimensions(&expected, &dims)?;
    }
    let wanted: BTreeSet<String> = records.iter().map(|r| r.instance_id.clone()).collect();
    let instances = train_instances(&args, &wanted)?;
    let dataset = Dataset::new(dims, instances, records);
    let config = EmConfig {
        max_iters: args.max_iters as usize,
        rel_tol: args.tol,
        ridge: args.ridge,
        ..EmConfig::default()
    };
    let (model, trace) = fit_em(&dataset, &config)?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, ll) in trace.log_likelihoods.iter().enumerate() {
        let _ = writeln!(out, "iter {i:>4}  log-likelihood {}", io::fmt_f64(*ll));
    }
    io::save_model(&args.out, &model)?;
    match trace.termination {
        Termination::Converged => {
            let _ = writeln!(out, "converged after {} iterations", trace.iterations);
            Ok(EXIT_OK)
        }
        Termination::MaxIters => {
            eprintln!(
                "warning: stopped at --max-iters {} before convergence",
                trace.iterations
            );
            Ok(EXIT_NOT_CONVERGED)
        }
    }
}

fn predict(args: PredictArgs) -> Result<i32, CliError> {
    let model = io::load_model(&args.model)?;
    if model.dimensions.index_of(&args.target_dim).is_none() {
        return Err(CliError::new(
            EXIT_USAGE,
            format!(
                "--target-dim `{}` is not a model dimension (have {})",
                args.target_dim,
                model.dimensions.names().join(",")
            ),
        ));
    }
    let (dims, records) = io::read_annotations(&args.annotations)?;
    io::check_dimensions(&model.dimensions, &dims)?;
    let ids: BTreeSet<String> = records.iter().map(|r| r.instance_id.clone()).collect();
    let instances = ids.into_iter().map(|id| Instance::new(id, Vec::new())).collect();
    let dataset = Dataset::new(dims, instances, records);
    let config = PredictionConfig {
        target_dim: args.target_dim.clone(),
        ridge: args.ridge,
        weight_by_noise: args.weight_by_noise,
    };
    let report = predict_dataset(&model, &dataset, &config)?;

    if !report.skipped_annotators.is_empty() {
        let names: Vec<&str> = report.skipped_annotators.iter().map(String::as_str).collect();
        eprintln!("warning: skipped annotators not in model: {}", names.join(","));
    }
    for (id, e) in &report.failures {
        eprintln!("failed {id}: {e}");
    }
    if report.predictions.is_empty() {
        return Err(CliError::new(EXIT_NUMERICAL, "no instance could be predicted"));
    }
    let mut out = create(&args.out)?;
    io::write_predictions(&mut out, &args.target_dim, &report.predictions)
        .map_err(write_err(&args.out))?;
    Ok(EXIT_OK)
}

fn baseline(args: BaselineArgs) -> Result<i32, CliError> {
    let lexicon = io::read_lexicon(&args.lexicon)?;
    let stoplist = match &args.stoplist {
        Some(p) => io::read_stoplist(p)?,
        None => StopList::english_default(),
    };
    let sentences = io::read_sentences(&args.sentences, args.pretokenized)?;
    let dims = lexicon.dimensions();
    let mut out = create(&args.out)?;
    let mut body = || -> std::io::Result<()> {
        writeln!(out, "instance_id,{},status", dims.names().join(","))?;
        for (id, tokens) in &sentences {
            match aggregate_norms(tokens, &lexicon, &stoplist, args.agg) {
                Some(v) => {
                    let cells: Vec<String> = v.iter().map(|x| io::fmt_f64(*x)).collect();
                    writeln!(out, "{id},{},ok", cells.join(","))?;
                }
                None => writeln!(out, "{id},{},empty", ",".repeat(dims.len() - 1))?,
            }
        }
        out.flush()
    };
    body().map_err(write_err(&args.out))?;
    Ok(EXIT_OK)
}

fn eval(args: EvalArgs) -> Result<i32, CliError> {
    let pred = io::read_value_table(&args.pred)?;
    let reference = io::read_value_table(&args.reference)?;
    let shared: Vec<&String> = pred
        .columns
        .iter()
        .filter(|c| reference.column(c).is_some())
        .collect();
    if shared.is_empty() {
        return Err(CliError::new(EXIT_PARSE, "prediction and reference share no value column"));
    }
    let joined: Vec<&String> = pred.rows.keys().filter(|id| reference.rows.contains_key(*id)).collect();
    let pred_only = pred.rows.len() - joined.len();
    let ref_only = reference.rows.len() - joined.len();
    if joined.is_empty() {
        return Err(CliError::new(
            EXIT_PARSE,
            "empty join: prediction and reference share no instance id",
        ));
    }
    println!(
        "matched {} instances ({pred_only} only in predictions, {ref_only} only in references)",
        joined.len()
    );

    let features = match &args.features {
        Some(p) => Some(
            io::read_feature_csv(p)?
                .into_iter()
                .map(|i| (i.id.clone(), i.features))
                .collect::<BTreeMap<_, _>>(),
        ),
        None => None,
    };

    let mut report = MetricsReport::default();
    for col in shared {
        let (pi, ri) = (pred.column(col).unwrap(), reference.column(col).unwrap());
        let mut ids = Vec::new();
        let (mut p, mut r) = (Vec::new(), Vec::new());
        for id in &joined {
            if let (Some(a), Some(b)) = (pred.rows[*id][pi], reference.rows[*id][ri]) {
                ids.push(*id);
                p.push(a);
                r.push(b);
            }
        }
        if p.is_empty() {
            eprintln!("warning: dimension `{col}` has no paired values");
            continue;
        }
        let series = PairedSeries::new(p, r.clone())
            .map_err(|e| CliError::new(EXIT_PARSE, format!("dimension `{col}`: {e}")))?;
        let mut metrics = DimensionMetrics::compute(&series, &args.metrics);
        if let Some(table) = &features {
            let rows: Vec<&nalgebra::DVector<f64>> = ids
                .iter()
                .map(|id| {
                    table.get(*id).ok_or_else(|| {
                        CliError::new(EXIT_PARSE, format!("instance `{id}` has no features"))
                    })
                })
                .collect::<Result<_, _>>()?;
            let width = rows[0].len();
            let x = DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
            metrics = metrics.with_learnability(learnability(&x, &r, args.learnability_ridge));
        }
        report.dimensions.insert(col.clone(), metrics);
    }
    print!("{}", report.render_table());
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(write_err(path))?;
    }
    Ok(EXIT_OK)
}

fn simulate(args: SimulateArgs) -> Result<i32, CliError> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))?;
            toml::from_str::<SimSpec>(&text)
                .map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", path.display())))?
        }
        None => SimSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (dataset, truth) = match &args.from_model {
        Some(path) => generate_with_model(&io::load_model(path)?, &spec)?,
        None => generate(&spec)?,
    };

    std::fs::create_dir_all(&args.out_dir).map_err(write_err(&args.out_dir))?;
    let dir = &args.out_dir;
    io::write_annotations(&dir.join("annotations.csv"), dataset.dimensions(), dataset.annotations())?;
    io::write_feature_csv(&dir.join("features.csv"), dataset.instances())?;
    io::save_model(&dir.join("truth_model.json"), &truth.model)?;
    let latent_path = dir.join("latent.csv");
    let mut out = create(&latent_path)?;
    io::write_value_rows(&mut out, &truth.model.dimensions, &truth.latent)
        .map_err(write_err(&latent_path))?;
    println!(
        "wrote {} instances, {} records to {}",
        dataset.instances().len(),
        dataset.annotations().len(),
        dir.display()
    );
    Ok(EXIT_OK)
}
