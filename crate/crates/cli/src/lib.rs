// SPDX-License-Identifier: Apache-2.0

//! `duch` command-line driver. Every verb is a thin composition of
//! `duch_core` calls; [`run`] maps failures onto the exit codes below.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use duch_core::augment::{
    augment_corpus, AugmentConfig, PosLexicon, Selection, WordEmbeddingTable,
};
use duch_core::data::{generate_synthetic, split_dataset, SplitSpec, SyntheticSpec};
use duch_core::diagnostics::gradient_suite;
use duch_core::hamming::PackedCodeIndex;
use duch_core::metrics::{evaluate_direction, ApMode, Direction, RelevanceOracle};
use duch_core::pipeline::{encode_split, load_splits, save_splits, sweep, sweep_csv};
use duch_core::trainer::{train, HashModel, TrainConfig, TrainError, TrainOutputs};
use duch_core::{data, Error, PairedDataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Optional thread-count override for query sharding.
pub const QUERY_THREADS_ENV: &str = "DUCH_QUERY_THREADS";

/// File names written by `train` and `encode`.
pub mod files {
    pub const MODEL: &str = "model.dum1";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const CONFIG: &str = "config.json";
    pub const REPORT: &str = "report.json";
    pub const IMAGE_CODES: &str = "images.dub1";
    pub const TEXT_CODES: &str = "texts.dub1";
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
            CliError::Divergence(m) => write!(f, "diverged: {m}"),
        }
    }
}

impl<E: Into<Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        match e.into() {
            Error::Train(TrainError::NumericalDivergence { step }) => {
                CliError::Divergence(format!("non-finite loss at step {step}"))
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// Prints the resolved settings of a run to standard error.
fn provenance<T: Serialize>(verb: &str, resolved: &T) {
    eprintln!(
        "{}",
        to_json(&serde_json::json!({ "verb": verb, "resolved": resolved }))
    );
}

#[derive(Debug, Parser)]
#[command(name = "duch", version, about = "Unsupervised cross-modal hashing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic paired dataset.
    Synth(SynthArgs),
    /// Split a dataset into train / query / retrieval sets.
    Split(SplitArgs),
    /// Train hash networks.
    Train(TrainArgs),
    /// Encode a dataset into packed codes.
    Encode(EncodeArgs),
    /// Validate a code file and print its statistics.
    Index(IndexArgs),
    /// Top-K Hamming search.
    Query(QueryArgs),
    /// mAP@k and the P@K curve for one retrieval direction.
    Eval(EvalArgs),
    /// Rule-based caption augmentation.
    Augment(AugmentArgs),
    /// Finite-difference check of every loss term.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate once per value of one config field.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long)]
    pub dim_img: usize,
    #[arg(long)]
    pub dim_txt: usize,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train, query and retrieval fractions as decimals.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = ["0.5".to_string(), "0.1".to_string(), "0.4".to_string()])]
    pub fractions: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training set directory, or a split root containing `train/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` lines, or the JSON printed by a previous run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `images.dub1` and `texts.dub1`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub codes: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct QueryArgs {
    /// Database codes.
    #[arg(long)]
    pub index: PathBuf,
    /// Query codes.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Worker threads; defaults to the environment override, then rayon.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub codes_query: PathBuf,
    #[arg(long)]
    pub codes_db: PathBuf,
    #[arg(long)]
    pub labels_query: PathBuf,
    #[arg(long)]
    pub labels_db: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// `i2t` or `t2i`.
    #[arg(long)]
    pub direction: String,
    /// `min_rk` or `literal`.
    #[arg(long, default_value = "min_rk")]
    pub ap_mode: String,
    /// Also write the P@K curve as CSV.
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AugmentArgs {
    /// One caption per line.
    #[arg(long)]
    pub captions: PathBuf,
    /// Plain-text word vectors.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// `token<TAB>TAG[,TAG]` lines.
    #[arg(long)]
    pub lexicon: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines replacement log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0.65)]
    pub token_threshold: f64,
    #[arg(long, default_value_t = 0.75)]
    pub sentence_threshold: f64,
    #[arg(long, default_value_t = 10)]
    pub max_candidates: usize,
    /// `best_score` or `seeded_random`.
    #[arg(long, default_value = "best_score")]
    pub selection: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub rounds: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Split root with `train/`, `query/` and `retrieval/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config field to vary.
    #[arg(long)]
    pub axis: String,
    /// Values separated by `;` (a single value may itself contain commas).
    #[arg(long, value_delimiter = ';')]
    pub values: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run the values concurrently on a thread pool.
    #[arg(long)]
    pub parallel: bool,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the verb.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Encode(a) => encode(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Augment(a) => augment(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        per_class: a.per_class,
        dim_img: a.dim_img,
        dim_txt: a.dim_txt,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    provenance("synth", &a);
    let ds = generate_synthetic(&spec)?;
    ds.save_dir(&a.out)?;
    Ok(())
}

fn split(a: SplitArgs) -> CliResult {
    let fracs: [&str; 3] = [&a.fractions[0], &a.fractions[1], &a.fractions[2]];
    let spec = SplitSpec::from_decimal_fractions(&fracs, a.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    provenance("split", &a);
    let ds = PairedDataset::load_dir(&a.data)?;
    let splits = split_dataset(&ds, &spec)?;
    save_splits(&splits, &a.out)?;
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
pub fn resolve_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = read_file(p)?;
            if text.trim_start().starts_with('{') {
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
            } else {
                TrainConfig::parse(&text)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
            }
        }
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(cfg)
}

fn load_train_set(dir: &Path) -> CliResult<PairedDataset> {
    let nested = dir.join("train");
    if nested.join(data::layout::IMAGES).exists() {
        Ok(PairedDataset::load_dir(nested)?)
    } else {
        Ok(PairedDataset::load_dir(dir)?)
    }
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let cfg = resolve_config(a.config.as_deref(), &a.overrides, a.seed)?;
    provenance("train", &cfg);
    let ds = load_train_set(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    write_file(&a.out.join(files::CONFIG), to_json(&cfg))?;
    let outputs = TrainOutputs {
        checkpoint: Some(a.out.join(files::MODEL)),
        log: Some(a.out.join(files::TRAIN_LOG)),
    };
    let (_, report) = train(&ds, &cfg, &outputs)?;
    write_file(&a.out.join(files::REPORT), to_json(&report))?;
    Ok(())
}

fn encode(a: EncodeArgs) -> CliResult {
    provenance("encode", &a);
    let model = HashModel::load(&a.model)?;
    let ds = PairedDataset::load_dir(&a.data)?;
    let enc = encode_split(&model, &ds)?;
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    enc.images.save(a.out.join(files::IMAGE_CODES))?;
    enc.texts.save(a.out.join(files::TEXT_CODES))?;
    Ok(())
}

fn index(a: IndexArgs) -> CliResult {
    provenance("index", &a);
    let idx = PackedCodeIndex::load(&a.codes)?;
    println!("{}", to_json(&idx.stats()));
    Ok(())
}

/// `--threads`, else the environment override, else the rayon default.
pub fn query_threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(QUERY_THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{QUERY_THREADS_ENV}={v:?} is not a count"))),
        Err(_) => Ok(None),
    }
}

fn query(a: QueryArgs) -> CliResult {
    let threads = query_threads(a.threads)?;
    provenance(
        "query",
        &serde_json::json!({ "args": &a, "threads": threads }),
    );
    let db = PackedCodeIndex::load(&a.index)?;
    let queries = PackedCodeIndex::load(&a.queries)?;
    let search = || db.search_all(&queries, a.k);
    let results = match threads {
        Some(0) => return Err(CliError::Usage("thread count must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(search)?,
        None => search()?,
    };
    for (q, r) in results.iter().enumerate() {
        println!(
            "{}",
            to_json(&serde_json::json!({ "query": queries.ids()[q], "hits": r.hits }))
        );
    }
    Ok(())
}

fn parse_ap_mode(s: &str) -> CliResult<ApMode> {
    match s {
        "min_rk" => Ok(ApMode::MinRk),
        "literal" => Ok(ApMode::Literal),
        _ => Err(CliError::Usage(format!(
            "--ap-mode must be min_rk or literal, got {s:?}"
        ))),
    }
}

fn eval(a: EvalArgs) -> CliResult {
    let direction: Direction = a
        .direction
        .parse()
        .map_err(|e: duch_core::metrics::MetricError| CliError::Usage(e.to_string()))?;
    let mode = parse_ap_mode(&a.ap_mode)?;
    provenance("eval", &a);
    let q = PackedCodeIndex::load(&a.codes_query)?;
    let db = PackedCodeIndex::load(&a.codes_db)?;
    let oracle = RelevanceOracle::new(
        data::read_labels(&a.labels_query)?,
        data::read_labels(&a.labels_db)?,
    );
    let report = evaluate_direction(&q, &db, &oracle, direction, a.k, mode)?;
    if let Some(p) = &a.curve_out {
        write_file(p, report.curve_csv())?;
    }
    println!("{}", to_json(&report));
    Ok(())
}

fn augment(a: AugmentArgs) -> CliResult {
    let selection = match a.selection.as_str() {
        "best_score" => Selection::BestScore,
        "seeded_random" => Selection::SeededRandom,
        other => {
            return Err(CliError::Usage(format!(
                "--selection must be best_score or seeded_random, got {other:?}"
            )))
        }
    };
    let cfg = AugmentConfig {
        sim_token_threshold: a.token_threshold,
        sim_sentence_threshold: a.sentence_threshold,
        max_candidates: a.max_candidates,
        selection,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    provenance("augment", &serde_json::json!({ "args": &a, "config": cfg }));
    let table = WordEmbeddingTable::load(&a.embeddings)?;
    let lexicon = PosLexicon::load(&a.lexicon)?;
    let captions: Vec<String> = read_file(&a.captions)?
        .lines()
        .map(str::to_string)
        .collect();
    let (out, log) = augment_corpus(&captions, &table, &lexicon, &cfg)?;
    let mut text = out.join("\n");
    text.push('\n');
    write_file(&a.out, text)?;
    if let Some(p) = &a.log {
        let lines: String = log.iter().map(|r| to_json(r) + "\n").collect();
        write_file(p, lines)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    provenance("gradcheck", &a);
    let records = gradient_suite(a.seed, a.rounds)?;
    let mut worst = 0.0f64;
    for r in &records {
        println!("{}", to_json(r));
        worst = worst.max(r.max_rel_err);
    }
    if worst > a.tolerance {
        return Err(CliError::Data(format!(
            "largest relative error {worst:e} exceeds {:e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> CliResult {
    if !TrainConfig::KEYS.contains(&a.axis.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown sweep axis {:?}; expected one of {}",
            a.axis,
            TrainConfig::KEYS.join(", ")
        )));
    }
    if a.values.is_empty() {
        return Err(CliError::Usage("--values is empty".into()));
    }
    let template = resolve_config(a.config.as_deref(), &[], a.seed)?;
    for v in &a.values {
        template
            .clone()
            .set(&a.axis, v)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    provenance(
        "sweep",
        &serde_json::json!({ "args": &a, "template": template }),
    );
    let splits = load_splits(&a.data)?;
    let rows = sweep(&template, &splits, &a.axis, &a.values, a.k, a.parallel)?;
    let csv = sweep_csv(&rows);
    match &a.out {
        Some(p) => write_file(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
