//! Image I/O, quality metrics, rain synthesis and dataset pairing.

mod dataset;
mod image;
pub mod metrics;
mod synth;

pub use dataset::{scan_dataset, scan_split, DatasetPair, ImagePair, PairingRule, ScanReport};
pub use image::{image_dimensions, load_image, quantize, save_image, ImageF32, ImageRGB8};
pub use metrics::{finite_mean, psnr, quartiles, rgb_to_luminance, ssim, Plane};
pub use synth::{
    procedural_scene, render_streaks, resize_bilinear, resize_long_side, sample_streaks, synth_rain, synth_rain_with,
    RainParams, Streak,
};
