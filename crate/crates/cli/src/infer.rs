use std::path::{Path, PathBuf};

use clap::Args;
use granet::data::{load_image, save_image, ImageF32};
use granet::train::Checkpoint;
use granet::GraNet;

use crate::{create_dir, load_run, png_files, print_resolved, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write `<stem>_mask.png` and `<stem>_coarse.png`. The signed mask
    /// is mapped affinely from its own [min, max] onto [0, 1].
    #[arg(long)]
    dump_intermediates: bool,
    /// If given, its `model.*` keys must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn infer_one(net: &GraNet<f32>, path: &Path, out: &Path, dump: bool) -> CmdResult {
    let img = load_image(path)?.to_f32();
    let pred = net.predict(&img.to_tensor())?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let save = |suffix: &str, img: ImageF32| -> CmdResult {
        Ok(save_image(out.join(format!("{stem}_{suffix}.png")), &img.to_rgb8())?)
    };
    save("final", ImageF32::from_tensor(&pred.final_image, 0)?)?;
    if dump {
        save("mask", ImageF32::from_tensor(&pred.mask, 0)?.normalized())?;
        save("coarse", ImageF32::from_tensor(&pred.coarse_result, 0)?)?;
    }
    log::info!("{}", path.display());
    Ok(())
}

pub fn run(args: &InferArgs, seed: Option<u64>) -> CmdResult {
    if !args.checkpoint.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let ck = match &args.config {
        Some(path) => Checkpoint::load_for(&args.checkpoint, &load_run(Some(path))?.model)?,
        None => Checkpoint::load(&args.checkpoint)?,
    };
    let inputs = if args.input.is_dir() {
        png_files(&args.input)?
    } else if args.input.is_file() {
        vec![args.input.clone()]
    } else {
        return Err(Failure::Usage(format!("--input {} does not exist", args.input.display())));
    };
    print_resolved(seed.unwrap_or(ck.progress.seed), &ck.config.to_kv());
    create_dir(&args.out)?;
    let net = GraNet { config: ck.config, weights: ck.weights };
    for path in &inputs {
        infer_one(&net, path, &args.out, args.dump_intermediates)?;
    }
    println!("processed {} images into {}", inputs.len(), args.out.display());
    Ok(())
}
