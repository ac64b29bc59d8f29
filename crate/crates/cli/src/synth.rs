use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use granet::data::{load_image, procedural_scene, resize_long_side, save_image, synth_rain, RainParams};

use crate::{create_dir, load_run, png_files, print_resolved, require_dir, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory receiving `rainy/`, `clean/`, `mask/` and `manifest.tsv`.
    #[arg(long)]
    out_dir: PathBuf,
    /// Clean images to add rain to (cycled); procedural scenes when absent.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    /// Config file; its `rain.*` keys are used.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Number of pairs to write.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Side length of procedural scenes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Clean images are downscaled so their long side is at most this.
    #[arg(long, default_value_t = 512)]
    max_side: usize,
}

fn load_params(args: &SynthArgs) -> Result<RainParams, Failure> {
    Ok(load_run(args.params.as_deref())?.rain)
}

pub fn run(args: &SynthArgs, seed: Option<u64>) -> CmdResult {
    let mut params = load_params(args)?;
    if let Some(s) = seed {
        params.seed = s;
    }
    let clean_files = match &args.clean_dir {
        Some(dir) => {
            require_dir("--clean-dir", dir)?;
            let files = png_files(dir)?;
            if files.is_empty() && args.count > 0 {
                return Err(Failure::Usage(format!("--clean-dir {} contains no PNG files", dir.display())));
            }
            Some(files)
        }
        None => {
            if args.size == 0 {
                return Err(Failure::Usage("--size must be positive".into()));
            }
            None
        }
    };
    print_resolved(params.seed, &params.to_kv());

    let dirs = ["rainy", "clean", "mask"].map(|d| args.out_dir.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let mut manifest = String::from("name\tsource\train_seed\n");
    for i in 0..args.count {
        let name = format!("{i:05}");
        let (clean, source) = match &clean_files {
            Some(files) => {
                let f = &files[i % files.len()];
                let img = resize_long_side(&load_image(f)?.to_f32(), args.max_side);
                (img, f.display().to_string())
            }
            None => {
                let scene_seed = params.seed.wrapping_add(i as u64);
                (procedural_scene(args.size, args.size, scene_seed), format!("procedural:{scene_seed}"))
            }
        };
        let p = RainParams { seed: params.seed.wrapping_add(0x1000_0000).wrapping_add(i as u64), ..params.clone() };
        let (rainy, mask) = synth_rain(&clean, &p);
        let file = format!("{name}.png");
        save_image(dirs[0].join(&file), &rainy.to_rgb8())?;
        save_image(dirs[1].join(&file), &clean.to_rgb8())?;
        save_image(dirs[2].join(&file), &mask.to_rgb8())?;
        writeln!(manifest, "{name}\t{source}\t{}", p.seed).unwrap();
    }
    let path = args.out_dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {} pairs to {}", args.count, args.out_dir.display());
    Ok(())
}
