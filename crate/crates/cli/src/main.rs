//! `granet`: synthesize data, train, run inference, score outputs and verify
//! gradients.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
//! configuration error.

mod eval;
mod gradcheck;
mod infer;
mod synth;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use granet::train::RunConfig;
use granet::GraNetConfig;

#[derive(Parser, Debug)]
#[command(name = "granet", version, about = "Coarse-to-fine single-image rain removal")]
struct Cli {
    /// Seed for every random choice; overrides `train.seed` and `rain.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic rainy/clean/mask triples and a manifest.
    Synth(synth::SynthArgs),
    /// Train on paired directories and write checkpoints plus a metrics CSV.
    Train(train::TrainArgs),
    /// De-rain an image or a directory of images.
    Infer(infer::InferArgs),
    /// PSNR/SSIM of predictions against ground truth.
    Eval(eval::EvalArgs),
    /// Finite-difference gradient check of primitives, blocks and the model.
    Gradcheck(gradcheck::GradcheckArgs),
}

/// Structural ablations.
#[derive(Args, Debug, Clone, Default)]
pub struct Ablation {
    /// Drop the region-aware attention blocks.
    #[arg(long)]
    no_ra: bool,
    /// Drop the fine stage; the coarse result is the output.
    #[arg(long)]
    no_fine: bool,
    /// Replace the merging block by a learned 1x1 convolution.
    #[arg(long)]
    no_merge: bool,
}

impl Ablation {
    pub fn apply(&self, cfg: &mut GraNetConfig) {
        cfg.use_ra &= !self.no_ra;
        cfg.use_fine &= !self.no_fine;
        cfg.use_merge &= !self.no_merge;
    }

    pub fn any(&self) -> bool {
        self.no_ra || self.no_fine || self.no_merge
    }
}

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<granet::Error> for Failure {
    fn from(e: granet::Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

pub type CmdResult = Result<(), Failure>;

/// Defaults, overlaid with the config file if one is given.
pub fn load_run(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) if !p.is_file() => Err(Failure::Usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Ok(RunConfig::load(p)?),
    }
}

pub fn require_dir(flag: &str, dir: &Path) -> CmdResult {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag} {} is not a directory", dir.display())))
    }
}

pub fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Every `.png` file directly inside `dir`, sorted.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Echoes the resolved configuration and seed, one `key = value` per line.
pub fn print_resolved(seed: u64, config: &str) {
    println!("seed = {seed}");
    print!("{config}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();

    let result = match &cli.command {
        Command::Synth(a) => synth::run(a, cli.seed),
        Command::Train(a) => train::run(a, cli.seed),
        Command::Infer(a) => infer::run(a, cli.seed),
        Command::Eval(a) => eval::run(a, cli.seed),
        Command::Gradcheck(a) => gradcheck::run(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
