//! `rearev`: knowledge-graph question answering from the command line —
//! generate synthetic datasets, train, evaluate, inspect single questions,
//! run experiment matrices, and convert the MetaQA benchmark layout.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rearev_core::Error;

use commands::{InferTarget, MetaqaPaths};
use config::Common;

#[derive(Parser)]
#[command(
    name = "rearev",
    version = config::BUILD_ID,
    about = "Instruction-guided reasoning over knowledge-graph subgraphs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic movie-domain dataset directory
    GenData(GenDataArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Score a split with a trained checkpoint
    Eval(EvalArgs),
    /// Answer one question and optionally trace each reasoning stage
    Infer(InferArgs),
    /// Train/evaluate a grid over kg-keep ratios and stage counts
    Matrix(MatrixArgs),
    /// Convert a raw MetaQA-style directory into the dataset layout
    ConvertMetaqa(ConvertArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint to write (JSON manifest + sibling .bin blob)
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Per-epoch CSV log to write
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score with
    #[arg(long, value_name = "PATH")]
    ckpt: PathBuf,
    /// Split to score: train | dev | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the metrics as JSON
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint to answer with
    #[arg(long, value_name = "PATH")]
    ckpt: PathBuf,
    /// Question id from any split
    #[arg(long, conflicts_with_all = ["text", "seeds"])]
    qid: Option<String>,
    /// Ad-hoc question text (needs --seeds)
    #[arg(long)]
    text: Option<String>,
    /// Comma-separated seed entity names for --text
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<String>,
    /// Answers to print
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Print the per-stage answer distributions
    #[arg(long)]
    trace: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MatrixArgs {
    /// CSV file to write (one row per grid cell)
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// KG keep-ratios to sweep
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.5")]
    keeps: Vec<f64>,
    /// Stage counts T to sweep
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    stages: Vec<usize>,
    /// Seeds to repeat each cell with
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ConvertArgs {
    /// Directory holding kb.txt and qa_{train,dev,test}.txt
    #[arg(long = "raw-dir", value_name = "DIR", conflicts_with_all = ["kb", "qa_train", "qa_dev", "qa_test"])]
    raw_dir: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires_all = ["qa_train", "qa_dev", "qa_test"])]
    kb: Option<PathBuf>,
    #[arg(long = "qa-train", value_name = "PATH")]
    qa_train: Option<PathBuf>,
    #[arg(long = "qa-dev", value_name = "PATH")]
    qa_dev: Option<PathBuf>,
    #[arg(long = "qa-test", value_name = "PATH")]
    qa_test: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn common_of(cmd: &Cmd) -> &Common {
    match cmd {
        Cmd::GenData(a) => &a.common,
        Cmd::Train(a) => &a.common,
        Cmd::Eval(a) => &a.common,
        Cmd::Infer(a) => &a.common,
        Cmd::Matrix(a) => &a.common,
        Cmd::ConvertMetaqa(a) => &a.common,
    }
}

/// 0 success, 2 configuration, 3 data, 4 numerics — scriptable matrices
/// need to tell these apart.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Mode { .. } | Error::Incompatible(_) => 2,
        Error::Io(_)
        | Error::Json(_)
        | Error::Parse { .. }
        | Error::Data(_)
        | Error::UnknownEntity(_)
        | Error::UnknownRelation(_)
        | Error::UnknownQid(_)
        | Error::EmptyQuestion
        | Error::NoSeeds
        | Error::TemplateExhausted(_) => 3,
        Error::Dimension { .. }
        | Error::Bounds { .. }
        | Error::NonFinite { .. }
        | Error::EmptySupport
        | Error::PoisonedGradient { .. }
        | Error::NumericFailure { .. } => 4,
    }
}

fn data_dir_of(res: &config::Resolved) -> Result<PathBuf, Error> {
    res.cfg.data_dir.clone().ok_or_else(|| {
        Error::Config("no dataset directory: pass --data-dir or set REAREV_DATA_DIR".into())
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let res = config::resolve(common_of(&cli.cmd))?;
    if res.cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(res.cfg.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }

    match cli.cmd {
        Cmd::GenData(a) => commands::gen_data(&res, &a.out),
        Cmd::Train(a) => {
            let data = data_dir_of(&res)?;
            let ckpt = a.ckpt.unwrap_or_else(|| data.join("checkpoint.json"));
            let log = a.log.clone().unwrap_or_else(|| data.join("train-log.csv"));
            commands::train_cmd(&res, &data, &ckpt, Some(&log))
        }
        Cmd::Eval(a) => {
            let data = data_dir_of(&res)?;
            commands::eval_cmd(&res, &data, &a.ckpt, &a.split, a.out.as_deref())
        }
        Cmd::Infer(a) => {
            let data = data_dir_of(&res)?;
            let target = InferTarget { qid: a.qid, text: a.text, seeds: a.seeds };
            commands::infer_cmd(&res, &data, &a.ckpt, &target, a.top, a.trace)
        }
        Cmd::Matrix(a) => commands::matrix_cmd(&res, &a.out, &a.keeps, &a.stages, &a.seeds),
        Cmd::ConvertMetaqa(a) => {
            let paths = match (&a.raw_dir, &a.kb) {
                (Some(dir), _) => MetaqaPaths {
                    kb: dir.join("kb.txt"),
                    train: dir.join("qa_train.txt"),
                    dev: dir.join("qa_dev.txt"),
                    test: dir.join("qa_test.txt"),
                },
                (None, Some(kb)) => MetaqaPaths {
                    kb: kb.clone(),
                    train: a.qa_train.clone().expect("clap enforces requires_all"),
                    dev: a.qa_dev.clone().expect("clap enforces requires_all"),
                    test: a.qa_test.clone().expect("clap enforces requires_all"),
                },
                (None, None) => {
                    return Err(Error::Config(
                        "pass --raw-dir, or --kb with --qa-train/--qa-dev/--qa-test".into(),
                    ))
                }
            };
            commands::convert_metaqa(&res, &paths, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
