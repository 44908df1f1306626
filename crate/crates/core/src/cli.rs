//! `vse-ens` command-line front end: gen, split, train, eval, bench.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{evaluate, leave_one_out_split, EvalOptions};
use crate::io::{
    load_model, load_pairs_with, metrics_to_json, read_pairs, read_vocab, save_model, write_bench,
    write_metrics, write_pairs, write_trial_log, write_vocab, LoadedPairs, Vocab,
};
use crate::model::Dataset;
use crate::sampler::{SamplerConfig, DEFAULT_MAX_REJECTS};
use crate::synthetic::gen_synthetic;
use crate::train::{train, Method, RankWeighting, TrainConfig};

pub const MODEL_FILE: &str = "model.txt";
pub const TRIALS_FILE: &str = "trials.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BENCH_FILE: &str = "bench.csv";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const TRUTH_FILE: &str = "truth.txt";
pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const IMAGES_VOCAB: &str = "images.tsv";
pub const ANNOTATIONS_VOCAB: &str = "annotations.tsv";

#[derive(Debug, Parser)]
#[command(name = "vse-ens", version, about = "Visual-semantic embeddings with fast adaptive negative sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted low-rank dataset.
    Gen(GenArgs),
    /// Leave-one-out train/test split.
    Split(SplitArgs),
    /// Train a model and write its checkpoint and trial log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Train all three methods with a shared schedule and record sampler cost.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    VseEns,
    Warp,
    OptAuc,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::VseEns => Method::VseEns,
            MethodArg::Warp => Method::Warp,
            MethodArg::OptAuc => Method::OptAuc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Harmonic,
    MeanRank,
}

impl From<WeightingArg> for RankWeighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Harmonic => RankWeighting::Harmonic,
            WeightingArg::MeanRank => RankWeighting::MeanRank,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 500)]
    pub images: usize,
    #[arg(long, default_value_t = 500)]
    pub annotations: usize,
    #[arg(long, default_value_t = 4)]
    pub true_rank: usize,
    #[arg(long, default_value_t = 10)]
    pub positives: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Directory holding images.tsv and annotations.tsv token tables.
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = 0.01)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub reg: f64,
    #[arg(long, default_value_t = 0.01)]
    pub init_std: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Draws between ranking-cache refreshes (default ceil(|A| log2 |A|)).
    #[arg(long)]
    pub refresh_interval: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_REJECTS)]
    pub max_rejects: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::Harmonic)]
    pub weighting: WeightingArg,
    /// Weight WARP updates by the exact violator count.
    #[arg(long)]
    pub exact_rank: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

impl HyperArgs {
    pub fn config(&self, method: Method, epochs: Option<usize>) -> TrainConfig {
        TrainConfig {
            method,
            eta: self.eta,
            reg: self.reg,
            k: self.k,
            epochs: epochs.unwrap_or(method.default_epochs()),
            init_std: self.init_std,
            seed: self.seed,
            sampler: SamplerConfig {
                lambda: self.lambda,
                refresh_interval: self.refresh_interval,
                max_rejects: self.max_rejects,
            },
            weighting: self.weighting.into(),
            exact_rank: self.exact_rank,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::VseEns)]
    pub method: MethodArg,
    /// Defaults to 200 (vse-ens), 150 (warp) or 800 (opt-auc).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    /// Rank training positives as candidates too.
    #[arg(long)]
    pub include_train_positives: bool,
    /// Also write metrics.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Pairs file; a synthetic dataset is generated when omitted.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long, default_value_t = 42)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_vocabs(dir: Option<&Path>) -> Result<(Vocab, Vocab)> {
    match dir {
        Some(d) => Ok((read_vocab(&d.join(IMAGES_VOCAB))?, read_vocab(&d.join(ANNOTATIONS_VOCAB))?)),
        None => Ok((Vocab::new(), Vocab::new())),
    }
}

fn load_training(path: &Path, vocab_dir: Option<&Path>) -> Result<LoadedPairs> {
    let (images, annotations) = load_vocabs(vocab_dir)?;
    load_pairs_with(path, images, annotations)
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let s = &args.synthetic;
    let data = gen_synthetic(s.images, s.annotations, s.true_rank, s.positives, s.noise, args.seed)?;
    let images = Vocab::from_tokens((0..s.images).map(|i| format!("i{i}")))?;
    let annotations = Vocab::from_tokens((0..s.annotations).map(|a| format!("a{a}")))?;
    create_dir(&args.out)?;
    write_pairs(&args.out.join(PAIRS_FILE), data.dataset.pairs(), &images, &annotations)?;
    write_vocab(&args.out.join(IMAGES_VOCAB), &images)?;
    write_vocab(&args.out.join(ANNOTATIONS_VOCAB), &annotations)?;
    save_model(&args.out.join(TRUTH_FILE), &data.truth)
}

pub fn cmd_split(args: &SplitArgs) -> Result<()> {
    let loaded = load_training(&args.pairs, args.vocab_dir.as_deref())?;
    let split = leave_one_out_split(&loaded.dataset, args.seed)?;
    create_dir(&args.out)?;
    write_pairs(&args.out.join(TRAIN_FILE), split.train.pairs(), &loaded.images, &loaded.annotations)?;
    write_pairs(&args.out.join(TEST_FILE), &split.test, &loaded.images, &loaded.annotations)?;
    write_vocab(&args.out.join(IMAGES_VOCAB), &loaded.images)?;
    write_vocab(&args.out.join(ANNOTATIONS_VOCAB), &loaded.annotations)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.hyper.config(args.method.into(), args.epochs);
    config.validate()?;
    let loaded = load_training(&args.train, args.vocab_dir.as_deref())?;
    let (model, log) = train(&loaded.dataset, &config)?;
    create_dir(&args.out)?;
    save_model(&args.out.join(MODEL_FILE), &model)?;
    write_trial_log(&args.out.join(TRIALS_FILE), &log)
}

pub fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model)?;
    let loaded = load_training(&args.train, args.vocab_dir.as_deref())?;
    let mut images = loaded.images;
    let mut annotations = loaded.annotations;
    let test = read_pairs(&args.test, &mut images, &mut annotations)?;
    if images.len() != model.num_images() || annotations.len() != model.num_annotations() {
        return Err(Error::config(format!(
            "model is {}x{} but the data has {} images and {} annotations",
            model.num_images(),
            model.num_annotations(),
            images.len(),
            annotations.len()
        )));
    }
    // Tokens first seen in the test file widen the training set's index space.
    let train = Dataset::from_pairs(images.len(), annotations.len(), loaded.dataset.pairs().to_vec())
        .map_err(|e| Error::config(format!("test file introduces images absent from training: {e}")))?;
    let opts = EvalOptions {
        exclude_train_positives: !args.include_train_positives,
    };
    let report = evaluate(&model, &train, &test.pairs, opts);
    writeln!(stdout, "{}", metrics_to_json(&report)).map_err(|e| Error::io("<stdout>", e))?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_metrics(&out.join(METRICS_FILE), &report)?;
    }
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let configs: Vec<TrainConfig> = Method::ALL
        .iter()
        .map(|&m| args.hyper.config(m, Some(args.epochs)))
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let dataset = match &args.train {
        Some(path) => load_training(path, args.vocab_dir.as_deref())?.dataset,
        None => {
            let s = &args.synthetic;
            gen_synthetic(s.images, s.annotations, s.true_rank, s.positives, s.noise, args.data_seed)?.dataset
        }
    };
    let mut runs = Vec::with_capacity(configs.len());
    for config in &configs {
        let (_, log) = train(&dataset, config)?;
        runs.push((config.method, log));
    }
    create_dir(&args.out)?;
    write_bench(&args.out.join(BENCH_FILE), &runs)
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on I/O failure, 2 on configuration or parse errors.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
