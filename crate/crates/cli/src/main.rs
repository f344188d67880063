mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radn::{Error, Variant};

/// Train, evaluate and inspect region-adaptive deformable quality models.
#[derive(Parser, Debug)]
#[command(name = "radn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic distortion dataset and its manifest.
    Gen(GenArgs),
    /// Run only the contrastive pretraining phase.
    Pretrain(TrainArgs),
    /// Train (optionally pretraining first) on a manifest.
    Train(TrainArgs),
    /// Report SROCC and PLCC of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Print the predicted quality of one image pair.
    Score(PairArgs),
    /// Render the per-patch weight map of one image pair.
    Vis(VisArgs),
    /// Run the finite-difference gradient suite at toy width.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Directory of reference images (.ppm or .png).
    #[arg(long)]
    refs: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Distorted versions per reference (at most 25).
    #[arg(long, default_value_t = 25)]
    per_ref: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First write this many procedural references into --refs.
    #[arg(long)]
    synth_refs: Option<usize>,
    /// Side length of procedural references.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable. Wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Start from the narrow toy widths instead of the full trunk.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Run directory for checkpoints and the log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint, keeping its epoch numbering.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Validation worker count (default: RADN_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Write `image, mos, predicted` rows here.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Worker count (default: RADN_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    dist: PathBuf,
}

#[derive(Args, Debug)]
struct VisArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Output image; PNG unless the extension says otherwise.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "radn")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Stable exit codes for scripting.
mod exit {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERIC: u8 = 3;
}

/// A command failure together with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Error(Error),
    /// Gradient checks ran but some rows failed.
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => exit::USAGE,
            Failure::Numeric(_) => exit::NUMERIC,
            Failure::Error(e) if e.is_numeric() => exit::NUMERIC,
            Failure::Error(Error::Config(_)) => exit::USAGE,
            Failure::Error(_) => exit::DATA,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Pretrain(a) => commands::train(a, true),
        Command::Train(a) => commands::train(a, false),
        Command::Eval(a) => commands::eval(a),
        Command::Score(a) => commands::score(a),
        Command::Vis(a) => commands::vis(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Numeric(m) => eprintln!("error: {m}"),
                Failure::Error(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}
