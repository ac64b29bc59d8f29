use std::path::PathBuf;

use clap::Args;
use granet::data::{finite_mean, load_image, psnr, quartiles, rgb_to_luminance, scan_dataset, ssim, PairingRule};

use crate::{print_resolved, require_dir, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// Regex removed from file stems before pairing, e.g. `_final$`.
    #[arg(long)]
    pair_strip: Option<String>,
}

fn summary(label: &str, values: &[f64], digits: usize) {
    let (mean, skipped) = finite_mean(values);
    let mean = mean.map_or("n/a".to_string(), |m| format!("{m:.digits$}"));
    let note = if skipped > 0 { format!(" ({skipped} identical images with infinite PSNR excluded)") } else { String::new() };
    println!("mean {label}: {mean}{note}");
    if let Some([min, q1, med, q3, max]) = quartiles(values) {
        println!(
            "{label} min {min:.digits$} q1 {q1:.digits$} median {med:.digits$} q3 {q3:.digits$} max {max:.digits$}"
        );
    }
}

pub fn run(args: &EvalArgs, seed: Option<u64>) -> CmdResult {
    require_dir("--pred-dir", &args.pred_dir)?;
    require_dir("--gt-dir", &args.gt_dir)?;
    let rule = match &args.pair_strip {
        Some(re) => PairingRule::suffix(re)?,
        None => PairingRule::default(),
    };
    let report = scan_dataset(&args.pred_dir, &args.gt_dir, &rule)?;
    if report.pairs.is_empty() {
        return Err(Failure::Usage(format!(
            "no prediction in {} shares a file name with {}",
            args.pred_dir.display(),
            args.gt_dir.display()
        )));
    }
    print_resolved(seed.unwrap_or(0), "");
    let (mut ps, mut ss) = (Vec::new(), Vec::new());
    println!("image\tpsnr_db\tssim");
    for pair in &report.pairs {
        let pred = rgb_to_luminance(&load_image(&pair.rainy)?.to_f32());
        let gt = rgb_to_luminance(&load_image(&pair.clean)?.to_f32());
        let p = psnr(&pred, &gt)?;
        let s = if gt.h >= 11 && gt.w >= 11 { ssim(&pred, &gt)? } else { f64::NAN };
        println!("{}\t{p:.4}\t{s:.6}", pair.key);
        ps.push(p);
        if !s.is_nan() {
            ss.push(s);
        }
    }
    println!("{} pairs, {} unpaired files, {} rejected", report.pairs.len(), report.orphans.len(), report.rejected.len());
    summary("psnr", &ps, 4);
    summary("ssim", &ss, 6);
    Ok(())
}
