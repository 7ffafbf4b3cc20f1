use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmrerank::harness::{cmd_distractors, cmd_eval, cmd_gen, cmd_predict};
use lmrerank::rerank::{LogitMode, PipelineConfig};
use lmrerank::synth::SyntheticSpec;
use lmrerank::Error;

#[derive(Debug, Parser)]
#[command(name = "lmrerank", version, about = "Landmark recognition by re-ranked retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest
    Gen(GenArgs),
    /// Build the per-index-image distractor score table
    Distractors(DistractorArgs),
    /// Predict one landmark per query
    Predict(PredictArgs),
    /// Score predictions with GAP and top-1 accuracy
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    landmarks: usize,
    #[arg(long, default_value_t = 10)]
    index_per_landmark: usize,
    #[arg(long, default_value_t = 50)]
    landmark_queries: usize,
    #[arg(long, default_value_t = 50)]
    junk_queries: usize,
    #[arg(long, default_value_t = 200)]
    distractors: usize,
    #[arg(long, default_value_t = 20)]
    junk_index: usize,
    #[arg(long, default_value_t = 0.35)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    models: usize,
    #[arg(long, default_value_t = 0.5)]
    disagreement: f64,
    #[arg(long, default_value_t = 4)]
    junk_themes: usize,
}

#[derive(Debug, Args)]
struct Parallelism {
    /// Worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Index rows per top-k block
    #[arg(long, default_value_t = lmrerank::vector::DEFAULT_CHUNK_ROWS)]
    chunk_rows: usize,
}

#[derive(Debug, Args)]
struct DistractorArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Number of best distractor matches averaged per index image
    #[arg(long, default_value_t = 3)]
    distractor_n: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    par: Parallelism,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Distractor table from `distractors`; required unless --no-distractor
    #[arg(long)]
    distractors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = LogitMode::QueryLogit)]
    logit_mode: LogitMode,
    #[arg(long)]
    no_logit: bool,
    #[arg(long)]
    no_distractor: bool,
    #[arg(long)]
    no_top1: bool,
    #[command(flatten)]
    par: Parallelism,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(a) => {
            let spec = SyntheticSpec {
                seed: a.seed,
                dim: a.dim,
                n_landmarks: a.landmarks,
                index_per_landmark: a.index_per_landmark,
                n_queries_landmark: a.landmark_queries,
                n_queries_junk: a.junk_queries,
                n_distractors: a.distractors,
                n_junk_index: a.junk_index,
                intra_class_noise: a.noise,
                n_models: a.models,
                model_disagreement: a.disagreement,
                n_junk_themes: a.junk_themes,
            };
            eprintln!("gen: {spec:?}");
            cmd_gen(&spec, &a.out)?;
        }
        Command::Distractors(a) => {
            let config = PipelineConfig {
                distractor_top_n: a.distractor_n,
                threads: a.par.threads,
                chunk_rows: a.par.chunk_rows,
                ..Default::default()
            };
            eprintln!("distractors: distractor_n={} threads={:?}", a.distractor_n, a.par.threads);
            cmd_distractors(&a.manifest, &config, &a.out)?;
        }
        Command::Predict(a) => {
            let config = PipelineConfig {
                k: a.k,
                logit_mode: a.logit_mode,
                logit_adjust: !a.no_logit,
                distractor_penalty: !a.no_distractor,
                inject_top1: !a.no_top1,
                chunk_rows: a.par.chunk_rows,
                threads: a.par.threads,
                ..Default::default()
            };
            eprintln!("predict: {config}");
            if config.distractor_penalty && a.distractors.is_none() {
                return Err(Error::InvalidParam("--distractors is required unless --no-distractor is given".into()));
            }
            cmd_predict(&a.manifest, &config, a.distractors.as_deref(), &a.out)?;
        }
        Command::Eval(a) => {
            print!("{}", cmd_eval(&a.predictions, &a.truth)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
