//! The `spancl` command line. Every subcommand reads an optional JSON
//! [`RunConfig`], applies its flags on top, and writes the merged config
//! next to its outputs so the run can be repeated with `--config`.
//!
//! Exit status: 0 on success, 1 for bad input or usage, 2 for failures
//! while running (including a failed `grad-check`).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_corpus, sample_episode, write_corpus, Sentence};
use crate::embedkit::EmbeddingSource;
use crate::error::{Error, Result};
use crate::evalkit::{span_prf1, write_representations};
use crate::gradcheck::grad_check;
use crate::model::{init_params, load_checkpoint, save_checkpoint};
use crate::protocol::{
    derive_seed, encode_sentences, finetune_support, read_jsonl, train_source, write_jsonl, FinetunePlan,
    InferenceConfig, Method, Prediction, Predictor, TrainPlan,
};
use crate::synth::class_signals;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSpec {
    /// An SPNE file.
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub dim: usize,
    /// Labels that receive an orthogonal class signal, in basis order.
    pub labels: Vec<String>,
    pub amplitude: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            dim: 32,
            labels: Vec::new(),
            amplitude: 1.0,
        }
    }
}

impl EmbeddingSpec {
    pub fn open(&self) -> Result<EmbeddingSource> {
        match self {
            EmbeddingSpec::File(p) => EmbeddingSource::read_file(p),
            EmbeddingSpec::Synthetic(s) => {
                let signal = if s.labels.is_empty() {
                    None
                } else {
                    Some(class_signals(&s.labels, s.dim, s.amplitude)?)
                };
                EmbeddingSource::synthetic(s.seed, s.dim, signal)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub support: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub embeddings: Option<EmbeddingSpec>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub plan: TrainPlan,
    pub finetune: FinetunePlan,
    pub inference: InferenceConfig,
    pub method: Method,
    pub workers: usize,
    pub episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: None,
            validation: None,
            support: None,
            query: None,
            embeddings: None,
            checkpoint: None,
            out: None,
            plan: TrainPlan::default(),
            finetune: FinetunePlan::default(),
            inference: InferenceConfig::default(),
            method: Method::Nn,
            workers: 1,
            episodes: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the run seed into every component that draws randomness.
    fn propagate_seed(&mut self) {
        self.plan.seed = self.seed;
        self.finetune.seed = self.seed;
        self.inference.seed = self.seed;
    }

    /// Every input path that is set must exist.
    pub fn check_inputs(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = [
            &self.corpus,
            &self.validation,
            &self.support,
            &self.query,
            &self.checkpoint,
        ]
        .into_iter()
        .flatten()
        .collect();
        if let Some(EmbeddingSpec::File(p)) = &self.embeddings {
            paths.push(p);
        }
        match paths.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(Error::Config(format!("{} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--{name} is required")))
    }

    fn source(&self) -> Result<EmbeddingSource> {
        self.embeddings
            .as_ref()
            .ok_or_else(|| Error::Config("--embeddings or --synthetic-dim is required".into()))?
            .open()
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "spancl",
    version,
    about = "Few-shot nested NER with span-level contrastive learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Episodic training on a source corpus.
    Train(TrainArgs),
    /// Adapt a checkpoint to a support set.
    Finetune(FinetuneArgs),
    /// Label query spans by similarity to a support set.
    Predict(PredictArgs),
    /// Exact-match span P/R/F1 of a prediction file.
    Evaluate(EvaluateArgs),
    /// Draw N-way K-shot episodes from a corpus.
    SampleEpisodes(SampleArgs),
    /// Write span representations as CSV.
    DumpReps(DumpArgs),
    /// Compare tape gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct Shared {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// SPNE embedding file.
    #[arg(long, conflicts_with = "synthetic_dim")]
    pub embeddings: Option<PathBuf>,
    /// Use generated embeddings of this width instead of a file.
    #[arg(long)]
    pub synthetic_dim: Option<usize>,
    #[arg(long, requires = "synthetic_dim")]
    pub synthetic_seed: Option<u64>,
    /// Comma-separated labels that get a class signal.
    #[arg(long, requires = "synthetic_dim", value_delimiter = ',')]
    pub synthetic_labels: Option<Vec<String>>,
    #[arg(long, requires = "synthetic_dim")]
    pub synthetic_amplitude: Option<f64>,
}

impl EmbedArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.embeddings {
            cfg.embeddings = Some(EmbeddingSpec::File(p.clone()));
        }
        if let Some(dim) = self.synthetic_dim {
            let mut spec = match &cfg.embeddings {
                Some(EmbeddingSpec::Synthetic(s)) => s.clone(),
                _ => SyntheticSpec::default(),
            };
            spec.dim = dim;
            if let Some(s) = self.synthetic_seed {
                spec.seed = s;
            }
            if let Some(l) = &self.synthetic_labels {
                spec.labels = l.clone();
            }
            if let Some(a) = self.synthetic_amplitude {
                spec.amplitude = a;
            }
            cfg.embeddings = Some(EmbeddingSpec::Synthetic(spec));
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub embed: EmbedArgs,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub valid_episodes: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<usize>,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub biaffine_dim: Option<usize>,
    #[arg(long)]
    pub no_biaffine: bool,
    #[arg(long)]
    pub no_residual: bool,
    #[arg(long)]
    pub no_loss_bias: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub embed: EmbedArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub embed: EmbedArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub support: Option<PathBuf>,
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Prediction JSONL file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// nn, proto or nnshot.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub o_span_cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub embed: EmbedArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// nn for the trained encoder, nnshot for raw embeddings.
    #[arg(long)]
    pub method: Option<Method>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl clap::builder::ValueParserFactory for Method {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Method>().map_err(|e| e.to_string()))
    }
}

fn base_config(shared: &Shared) -> Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    parse_corpus(BufReader::new(File::open(path)?))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".run.json");
    path.with_file_name(name)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.shared)?;
    a.embed.apply(&mut cfg);
    set_path(&mut cfg.corpus, &a.corpus);
    set_path(&mut cfg.validation, &a.validation);
    set_path(&mut cfg.checkpoint, &a.checkpoint);
    set_path(&mut cfg.out, &a.out);
    let p = &mut cfg.plan;
    set(&mut p.episodes_train, &a.episodes);
    set(&mut p.episodes_valid, &a.valid_episodes);
    set(&mut p.validate_every, &a.validate_every);
    set(&mut p.way, &a.way);
    set(&mut p.shot, &a.shot);
    set(&mut p.model.h, &a.hidden);
    set(&mut p.model.r, &a.biaffine_dim);
    if let Some(lr) = a.lr {
        p.adam.lr = lr;
    }
    p.model.use_biaffine &= !a.no_biaffine;
    p.model.use_residual &= !a.no_residual;
    if a.no_loss_bias {
        p.loss = p.loss.without_bias();
    }
    cfg.propagate_seed();
    cfg.check_inputs()?;

    let source = cfg.source()?;
    cfg.plan.model.d = source.dim();
    let pool = read_corpus(cfg.require(&cfg.corpus, "corpus")?)?;
    let validation = cfg.validation.as_deref().map(read_corpus).transpose()?;
    let out = cfg.require(&cfg.out, "out")?.to_path_buf();
    let init = match &cfg.checkpoint {
        Some(path) => {
            let (params, model) = load_checkpoint(path)?;
            if model != cfg.plan.model {
                info!("model config taken from checkpoint {}", path.display());
                cfg.plan.model = model;
            }
            params
        }
        None => init_params(&cfg.plan.model, cfg.seed)?,
    };
    let outcome = train_source(&init, &pool, validation.as_deref(), &cfg.plan, &source)?;
    create_dir(&out)?;
    save_checkpoint(&outcome.params, &cfg.plan.model, &out.join(CHECKPOINT_FILE))?;
    write_jsonl(BufWriter::new(File::create(out.join(TRAIN_LOG_FILE))?), &outcome.log)?;
    cfg.write(&out.join(RUN_CONFIG_FILE))?;
    info!(
        "kept episode {} (validation loss {:?})",
        outcome.best_episode, outcome.best_validation_loss
    );
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let mut cfg = base_config(&a.shared)?;
    a.embed.apply(&mut cfg);
    set_path(&mut cfg.checkpoint, &a.checkpoint);
    set_path(&mut cfg.support, &a.support);
    set_path(&mut cfg.out, &a.out);
    set(&mut cfg.finetune.steps, &a.steps);
    if let Some(lr) = a.lr {
        cfg.finetune.adam.lr = lr;
    }
    cfg.propagate_seed();
    cfg.check_inputs()?;

    let source = cfg.source()?;
    let (params, model) = load_checkpoint(cfg.require(&cfg.checkpoint, "checkpoint")?)?;
    let support = read_corpus(cfg.require(&cfg.support, "support")?)?;
    let out = cfg.require(&cfg.out, "out")?.to_path_buf();
    let tuned = finetune_support(&params, &support, &cfg.finetune, &source, &model)?;
    create_dir(&out)?;
    save_checkpoint(&tuned, &model, &out.join(CHECKPOINT_FILE))?;
    cfg.write(&out.join(RUN_CONFIG_FILE))
}

fn predict(a: &PredictArgs) -> Result<()> {
    let mut cfg = base_config(&a.shared)?;
    a.embed.apply(&mut cfg);
    set_path(&mut cfg.checkpoint, &a.checkpoint);
    set_path(&mut cfg.support, &a.support);
    set_path(&mut cfg.query, &a.query);
    set_path(&mut cfg.out, &a.out);
    set(&mut cfg.method, &a.method);
    set(&mut cfg.workers, &a.workers);
    set(&mut cfg.inference.o_span_cap, &a.o_span_cap);
    if a.threshold.is_some() {
        cfg.inference.threshold = a.threshold;
    }
    cfg.propagate_seed();
    cfg.check_inputs()?;

    let source = cfg.source()?;
    let (params, model) = load_checkpoint(cfg.require(&cfg.checkpoint, "checkpoint")?)?;
    let support = read_corpus(cfg.require(&cfg.support, "support")?)?;
    let query = read_corpus(cfg.require(&cfg.query, "query")?)?;
    let out = cfg.require(&cfg.out, "out")?.to_path_buf();
    let predictor = Predictor::fit(cfg.method, &params, &support, &source, &model, &cfg.inference)?;
    let preds = predictor.predict_all(&query, &source, cfg.workers.max(1))?;
    write_jsonl(BufWriter::new(File::create(&out)?), &preds)?;
    cfg.write(&sidecar(&out))
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    for p in [&a.pred, &a.gold] {
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
    }
    let preds: Vec<Prediction> = read_jsonl(BufReader::new(File::open(&a.pred)?))?;
    let gold = read_corpus(&a.gold)?;
    let report = span_prf1(&preds, &gold)?;
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &report)?;
    writeln!(stdout)?;
    Ok(())
}

#[derive(Serialize)]
struct EpisodeRecord<'a> {
    index: usize,
    seed: u64,
    way: usize,
    shot: usize,
    labels: Vec<&'a str>,
    support: &'a [Sentence],
    query: &'a [Sentence],
}

fn sample_episodes(a: &SampleArgs) -> Result<()> {
    let mut cfg = base_config(&a.shared)?;
    set_path(&mut cfg.corpus, &a.corpus);
    set_path(&mut cfg.out, &a.out);
    set(&mut cfg.plan.way, &a.way);
    set(&mut cfg.plan.shot, &a.shot);
    set(&mut cfg.episodes, &a.count);
    cfg.propagate_seed();
    cfg.check_inputs()?;

    let pool = read_corpus(cfg.require(&cfg.corpus, "corpus")?)?;
    let out = cfg.require(&cfg.out, "out")?.to_path_buf();
    create_dir(&out)?;
    let mut index = BufWriter::new(File::create(out.join("episodes.jsonl"))?);
    for k in 0..cfg.episodes {
        let seed = derive_seed(cfg.seed, 0, k as u64);
        let e = sample_episode(&pool, cfg.plan.way, cfg.plan.shot, seed)?;
        let dir = out.join(format!("episode-{k}"));
        create_dir(&dir)?;
        write_corpus(BufWriter::new(File::create(dir.join("support.jsonl"))?), &e.support)?;
        write_corpus(BufWriter::new(File::create(dir.join("query.jsonl"))?), &e.query)?;
        let rec = EpisodeRecord {
            index: k,
            seed,
            way: e.way,
            shot: e.shot,
            labels: e.label_set.iter().collect(),
            support: &e.support,
            query: &e.query,
        };
        serde_json::to_writer(&mut index, &rec)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    cfg.write(&out.join(RUN_CONFIG_FILE))
}

fn dump_reps(a: &DumpArgs) -> Result<()> {
    let mut cfg = base_config(&a.shared)?;
    a.embed.apply(&mut cfg);
    set_path(&mut cfg.checkpoint, &a.checkpoint);
    set_path(&mut cfg.corpus, &a.corpus);
    set_path(&mut cfg.out, &a.out);
    set(&mut cfg.method, &a.method);
    cfg.propagate_seed();
    cfg.check_inputs()?;

    let source = cfg.source()?;
    let (params, model) = load_checkpoint(cfg.require(&cfg.checkpoint, "checkpoint")?)?;
    let corpus = read_corpus(cfg.require(&cfg.corpus, "corpus")?)?;
    let out = cfg.require(&cfg.out, "out")?.to_path_buf();
    let reps = encode_sentences(cfg.method, &params, &corpus, &source, &model)?;
    write_representations(BufWriter::new(File::create(&out)?), &reps)?;
    cfg.write(&sidecar(&out))
}

fn run_grad_check(a: &GradCheckArgs) -> Result<bool> {
    let report = grad_check(a.seed)?;
    let mut stdout = io::stdout().lock();
    for g in &report.groups {
        writeln!(
            stdout,
            "{:<24} {:>5} elements  max rel {:.3e}  norm rel {:.3e}",
            g.name, g.elements, g.max_relative, g.norm_relative
        )?;
    }
    let worst = report.max_relative_error();
    let ok = worst < GRAD_CHECK_TOLERANCE;
    writeln!(
        stdout,
        "seed {} loss {:.6} max relative error {worst:.3e} ({})",
        report.seed,
        report.loss,
        if ok { "pass" } else { "FAIL" }
    )?;
    Ok(ok)
}

/// Output piped into a reader that has gone away, e.g. `| head`.
fn is_broken_pipe(e: &Error) -> bool {
    let kind = match e {
        Error::Io(io) => Some(io.kind()),
        Error::Json(j) => j.io_error_kind(),
        _ => None,
    };
    kind == Some(io::ErrorKind::BrokenPipe)
}

/// Runs a parsed command. `Ok(false)` means the command ran but its check
/// failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Finetune(a) => finetune(a).map(|_| true),
        Command::Predict(a) => predict(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::SampleEpisodes(a) => sample_episodes(a).map(|_| true),
        Command::DumpReps(a) => dump_reps(a).map(|_| true),
        Command::GradCheck(a) => run_grad_check(a),
    }
}

/// Parses `args`, runs, and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPANCL_LOG", "error")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) if is_broken_pipe(&e) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
