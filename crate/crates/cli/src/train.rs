use std::path::{Path, PathBuf};

use clap::Args;
use granet::data::{scan_split, ImagePair, PairingRule};
use granet::train::{Checkpoint, FitOutputs, StopReason, Trainer};

use crate::{load_run, print_resolved, require_dir, Ablation, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file with `model.*`, `train.*` and `rain.*` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory containing `rainy/` and `clean/`.
    #[arg(long)]
    train_dir: PathBuf,
    /// Directory containing `rainy/` and `clean/`.
    #[arg(long)]
    val_dir: PathBuf,
    /// Best-validation checkpoint; `<stem>.last.grnt` and `<stem>.csv` are
    /// written beside it.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint (usually `<stem>.last.grnt`).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Regex removed from file stems before pairing, e.g. `_rain$`.
    #[arg(long)]
    pair_strip: Option<String>,
    /// Overrides `train.max_epochs`.
    #[arg(long)]
    max_epochs: Option<u32>,
    #[command(flatten)]
    ablation: Ablation,
}

fn load_split(flag: &str, dir: &Path, rule: &PairingRule, max_side: usize) -> Result<Vec<ImagePair>, Failure> {
    require_dir(flag, dir)?;
    let report = scan_split(dir, rule)?;
    if !report.orphans.is_empty() || !report.rejected.is_empty() {
        log::warn!(
            "{}: {} unpaired files, {} rejected pairs",
            dir.display(),
            report.orphans.len(),
            report.rejected.len()
        );
    }
    if report.pairs.is_empty() {
        return Err(Failure::Usage(format!("{flag} {} has no usable pairs", dir.display())));
    }
    Ok(report.pairs.iter().map(|p| p.load(max_side)).collect::<granet::Result<_>>()?)
}

pub fn run(args: &TrainArgs, seed: Option<u64>) -> CmdResult {
    let mut run = load_run(args.config.as_deref())?;
    let resume = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if args.config.is_none() {
                run.model = ck.config.clone();
            }
            Some(ck)
        }
        None => None,
    };
    args.ablation.apply(&mut run.model);
    if let Some(s) = seed {
        run.train.seed = s;
        run.rain.seed = s;
    }
    if let Some(n) = args.max_epochs {
        run.train.max_epochs = n;
    }
    run.validate()?;
    let rule = match &args.pair_strip {
        Some(re) => PairingRule::suffix(re)?,
        None => PairingRule::default(),
    };
    let train = load_split("--train-dir", &args.train_dir, &rule, run.train.max_side)?;
    let val = load_split("--val-dir", &args.val_dir, &rule, run.train.max_side)?;
    print_resolved(run.train.seed, &run.to_kv());

    let mut trainer = match resume {
        Some(ck) => {
            log::info!("resuming after epoch {} (step {})", ck.progress.epoch, ck.progress.step);
            Trainer::resume(run, ck)?
        }
        None => Trainer::new(run)?,
    };
    log::info!(
        "{} training pairs, {} validation pairs, {} parameters",
        train.len(),
        val.len(),
        trainer.weights.num_scalars()
    );
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::create_dir(dir)?;
    }
    let outputs = FitOutputs::beside(&args.out);
    let result = trainer.fit(&train, &val, &outputs, |_| {})?;
    let why = match result.stop {
        StopReason::Converged => "converged at the minimum learning rate",
        StopReason::MaxEpochs => "reached max_epochs",
        StopReason::MaxSteps => "reached max_steps",
        StopReason::TargetReached => "reached target_psnr",
    };
    println!(
        "stopped after epoch {} ({why}); best validation PSNR {:.3} dB",
        trainer.progress.epoch, trainer.progress.best_psnr
    );
    Ok(())
}
