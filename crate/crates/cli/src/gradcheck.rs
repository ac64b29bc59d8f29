use std::path::PathBuf;

use clap::Args;
use granet::tensor::OpKind;
use granet::verify::{run_suite, SuiteOptions, TOLERANCE};

use crate::{load_run, print_resolved, Ablation, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Config file; only `model.*` keys matter here.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input side length for the full-model check.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Coordinates sampled per parameter tensor in the full-model check.
    #[arg(long, default_value_t = 4)]
    coords: usize,
    /// Corrupt the backward pass of one operation (for testing the checker).
    #[arg(long, hide = true)]
    fault: Option<String>,
    #[command(flatten)]
    ablation: Ablation,
}

pub fn run(args: &GradcheckArgs, seed: Option<u64>) -> CmdResult {
    let mut run = load_run(args.config.as_deref())?;
    args.ablation.apply(&mut run.model);
    run.model.validate()?;
    let fault = match &args.fault {
        Some(name) => {
            Some(OpKind::from_name(name).ok_or_else(|| Failure::Usage(format!("unknown operation `{name}`")))?)
        }
        None => None,
    };
    let opts = SuiteOptions {
        size: args.size,
        seed: seed.unwrap_or(0),
        coords_per_tensor: args.coords,
        fault,
        ..SuiteOptions::default()
    };
    print_resolved(opts.seed, &format!("{}gradcheck.size = {}\n", run.model.to_kv(), opts.size));
    let mut failed = 0;
    let results = run_suite(&run.model, &opts, |r| {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:9} {:24} max_rel_err {:.3e} ({} checked, {} kinks skipped)",
            r.group, r.name, r.report.max_rel_error, r.report.checked, r.report.skipped_kinks
        );
        failed += usize::from(!r.passed());
    })?;
    println!("{} units, {failed} failed (tolerance {TOLERANCE:e})", results.len());
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient units exceeded tolerance")));
    }
    Ok(())
}
