//! One binary, subcommand per pipeline stage: synthesize corpora, preprocess
//! vectors, train the VAE or the PLDA baseline, score trials, and compute
//! metrics / DET data.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
//! failure. Every run is a pure function of its input files, flags, and
//! seeds.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vaeverif::error::Error;
use vaeverif::eval::{compute_eer, compute_min_dcf, det_points, CostParams};
use vaeverif::io;
use vaeverif::plda::{fit_two_cov, score_trials_plda, CovMode};
use vaeverif::preprocess::{fit_pipeline, WhitenMode};
use vaeverif::scoring::score_trials;
use vaeverif::synth::{gen_cluster_2d, gen_two_cov_corpus, make_balanced_trials, split_by_speaker};
use vaeverif::training::{fit, DevSet};
use vaeverif::{seeds, Result};

#[derive(Parser)]
#[command(
    name = "vaeverif",
    about = "VAE-based verification backend for embedding vectors, with a PLDA baseline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a spec file.
    Synth(SynthArgs),
    /// Fit a preprocessing pipeline on training vectors and apply it.
    Preprocess(PreprocessArgs),
    /// Train the VAE.
    TrainVae(TrainVaeArgs),
    /// Train the two-covariance PLDA baseline.
    TrainPlda(TrainPldaArgs),
    /// Score trials with a trained model.
    Score(ScoreArgs),
    /// Compute EER and minDCF from scores and labeled trials.
    Eval(EvalArgs),
    /// Emit DET-curve points as CSV.
    Det(DetArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Spec file (key=value; see README for the keys).
    #[arg(long)]
    spec: PathBuf,
    /// Output prefix; files are written as <prefix>.<split>.vec etc.
    #[arg(long)]
    out_prefix: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhitenModeArg {
    Full,
    Diag,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Training vectors the pipeline is fitted on.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, value_enum)]
    mode: WhitenModeArg,
    /// Optional PCA output dimension.
    #[arg(long)]
    pca: Option<usize>,
    /// Vectors the fitted pipeline is applied to.
    #[arg(long)]
    apply: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Disable the final length normalization (on by default).
    #[arg(long)]
    no_length_norm: bool,
    /// Also write the fitted pipeline.
    #[arg(long)]
    save_pipeline: Option<PathBuf>,
}

#[derive(Args)]
struct TrainVaeArgs {
    /// Training config (key=value).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Dev vectors for early stopping.
    #[arg(long, requires = "dev_trials")]
    dev: Option<PathBuf>,
    /// Dev trials for early stopping.
    #[arg(long, requires = "dev")]
    dev_trials: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training history CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovModeArg {
    Diag,
    Full,
}

#[derive(Args)]
struct TrainPldaArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, value_enum)]
    mode: CovModeArg,
    /// EM iterations.
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelType {
    Vae,
    Plda,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "type", value_enum)]
    model_type: ModelType,
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Importance samples per marginal (VAE only).
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Use the symmetric joint-marginal variant (VAE only).
    #[arg(long)]
    symmetric: bool,
    /// Base RNG seed for scoring (VAE only).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
    /// Report the raw detection cost instead of the normalized one.
    #[arg(long)]
    unnormalized: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(4)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => run_synth(args),
        Command::Preprocess(args) => run_preprocess(args),
        Command::TrainVae(args) => run_train_vae(args),
        Command::TrainPlda(args) => run_train_plda(args),
        Command::Score(args) => run_score(args),
        Command::Eval(args) => run_eval(args),
        Command::Det(args) => run_det(args),
    }
}

fn run_synth(args: SynthArgs) -> Result<()> {
    match io::read_synth_spec(&args.spec)? {
        io::SynthFileSpec::TwoCov {
            corpus,
            train_speakers,
            dev_speakers,
            test_speakers,
            dev_trials,
            test_trials,
        } => {
            let all = gen_two_cov_corpus(&corpus, "")?;
            let parts = split_by_speaker(
                &all,
                &[train_speakers, dev_speakers, test_speakers],
                corpus.seed,
            )?;
            let prefix = &args.out_prefix;
            io::write_vectors(
                &PathBuf::from(format!("{prefix}.train.vec")),
                &io::VectorData::from_corpus(&parts[0]),
            )?;
            if dev_speakers > 0 {
                io::write_vectors(
                    &PathBuf::from(format!("{prefix}.dev.vec")),
                    &io::VectorData::from_corpus(&parts[1]),
                )?;
                let trials =
                    make_balanced_trials(&parts[1], dev_trials, seeds::derive(corpus.seed, "dev"))?;
                io::write_trials(&PathBuf::from(format!("{prefix}.dev.trl")), &trials)?;
            }
            if test_speakers > 0 {
                io::write_vectors(
                    &PathBuf::from(format!("{prefix}.test.vec")),
                    &io::VectorData::from_corpus(&parts[2]),
                )?;
                let trials = make_balanced_trials(
                    &parts[2],
                    test_trials,
                    seeds::derive(corpus.seed, "test"),
                )?;
                io::write_trials(&PathBuf::from(format!("{prefix}.test.trl")), &trials)?;
            }
        }
        io::SynthFileSpec::Cluster2d(spec) => {
            let data = gen_cluster_2d(&spec)?;
            let entries = data
                .points
                .iter()
                .zip(data.labels.iter())
                .enumerate()
                .map(|(i, (p, &c))| io::VectorEntry {
                    id: format!("c{c:03}-p{i:05}"),
                    speaker: Some(format!("c{c:03}")),
                    vector: p.clone(),
                })
                .collect();
            io::write_vectors(
                &PathBuf::from(format!("{}.vec", args.out_prefix)),
                &io::VectorData { dim: 2, entries },
            )?;
            let centers = data
                .centers
                .iter()
                .enumerate()
                .map(|(c, v)| io::VectorEntry {
                    id: format!("center{c:03}"),
                    speaker: None,
                    vector: v.clone(),
                })
                .collect();
            io::write_vectors(
                &PathBuf::from(format!("{}.centers.vec", args.out_prefix)),
                &io::VectorData { dim: 2, entries: centers },
            )?;
        }
    }
    Ok(())
}

fn run_preprocess(args: PreprocessArgs) -> Result<()> {
    let train = io::read_vectors(&args.fit)?;
    let mode = match args.mode {
        WhitenModeArg::Full => WhitenMode::Full,
        WhitenModeArg::Diag => WhitenMode::Diag,
    };
    let pipeline = fit_pipeline(&train.vectors(), mode, args.pca, !args.no_length_norm)?;
    if let Some(path) = &args.save_pipeline {
        io::write_pipeline(path, &pipeline)?;
    }
    let input = io::read_vectors(&args.apply)?;
    let mut out = io::VectorData {
        dim: pipeline.output_dim(),
        entries: Vec::with_capacity(input.entries.len()),
    };
    for e in &input.entries {
        out.entries.push(io::VectorEntry {
            id: e.id.clone(),
            speaker: e.speaker.clone(),
            vector: pipeline.apply(e.vector.view())?,
        });
    }
    io::write_vectors(&args.out, &out)
}

fn run_train_vae(args: TrainVaeArgs) -> Result<()> {
    let config = io::read_train_config(&args.config)?;
    let train = io::read_vectors(&args.train)?;
    let dev = match (&args.dev, &args.dev_trials) {
        (Some(vec_path), Some(trial_path)) => Some(DevSet {
            vectors: io::read_vectors(vec_path)?.vector_map(),
            trials: io::read_trials(trial_path)?,
        }),
        _ => None,
    };
    let (model, report) = fit(&train.vectors(), dev.as_ref(), &config.vae, &config.opts)?;
    io::write_model(&args.out, &model)?;
    if let Some(path) = &args.report {
        io::write_train_report(path, &report)?;
    }
    println!(
        "trained {} iterations, stop reason: {}",
        report.iterations,
        report.stop_reason.as_str()
    );
    Ok(())
}

fn run_train_plda(args: TrainPldaArgs) -> Result<()> {
    let train = io::read_vectors(&args.train)?.to_corpus()?;
    let mode = match args.mode {
        CovModeArg::Diag => CovMode::Diag,
        CovModeArg::Full => CovMode::Full,
    };
    let model = fit_two_cov(&train, mode, args.iters)?;
    io::write_plda(&args.out, &model)
}

fn run_score(args: ScoreArgs) -> Result<()> {
    let vectors: HashMap<_, _> = io::read_vectors(&args.vectors)?.vector_map();
    let trials = io::read_trials(&args.trials)?;
    let scores = match args.model_type {
        ModelType::Vae => {
            let model = io::read_model(&args.model)?;
            score_trials(&model, &trials, &vectors, args.k, args.seed, args.symmetric)?
        }
        ModelType::Plda => {
            let model = io::read_plda(&args.model)?;
            score_trials_plda(&model, &trials, &vectors)?
        }
    };
    io::write_scores(&args.out, &scores)
}

fn load_labeled_scores(scores: &PathBuf, trials: &PathBuf) -> Result<(Vec<f64>, Vec<bool>)> {
    let raw = io::read_scores(scores)?;
    let trials = io::read_trials(trials)?;
    io::join_scores(&trials, &raw)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (scores, labels) = load_labeled_scores(&args.scores, &args.trials)?;
    let costs = CostParams {
        c_miss: args.c_miss,
        c_fa: args.c_fa,
        p_target: args.p_target,
        normalized: !args.unnormalized,
    };
    let (eer, eer_thr) = compute_eer(&scores, &labels)?;
    let (min_dcf, dcf_thr) = compute_min_dcf(&scores, &labels, &costs)?;
    let csv = io::metrics_to_csv(&[("eer", eer, eer_thr), ("min_dcf", min_dcf, dcf_thr)]);
    std::fs::write(&args.out, csv).map_err(Error::from)?;
    println!("eer={eer:.6} min_dcf={min_dcf:.6}");
    Ok(())
}

fn run_det(args: DetArgs) -> Result<()> {
    let (scores, labels) = load_labeled_scores(&args.scores, &args.trials)?;
    let det = det_points(&scores, &labels)?;
    std::fs::write(&args.out, io::det_to_csv(&det)).map_err(Error::from)?;
    Ok(())
}
