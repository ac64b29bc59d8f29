//! Paired rainy/clean image directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;

use crate::error::{Error, Result};

use super::image::{image_dimensions, load_image, ImageF32};
use super::synth::resize_long_side;

/// Decoded training or validation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub rainy: ImageF32,
    pub clean: ImageF32,
}

impl ImagePair {
    pub fn new(name: impl Into<String>, rainy: ImageF32, clean: ImageF32) -> Result<Self> {
        if (rainy.h, rainy.w) != (clean.h, clean.w) {
            return Err(Error::shape(
                "ImagePair::new",
                format!("rainy {}x{} vs clean {}x{}", rainy.h, rainy.w, clean.h, clean.w),
            ));
        }
        Ok(ImagePair { name: name.into(), rainy, clean })
    }

    pub fn flipped(&self) -> ImagePair {
        ImagePair {
            name: self.name.clone(),
            rainy: self.rainy.flip_horizontal(),
            clean: self.clean.flip_horizontal(),
        }
    }
}

/// Matching files on disk, optionally holding their decoded contents.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub key: String,
    pub rainy: PathBuf,
    pub clean: PathBuf,
    pub cached: Option<ImagePair>,
}

impl DatasetPair {
    /// Decodes both files, downscaling so the long side is at most `max_side`.
    pub fn load(&self, max_side: usize) -> Result<ImagePair> {
        if let Some(p) = &self.cached {
            return Ok(p.clone());
        }
        let rainy = resize_long_side(&load_image(&self.rainy)?.to_f32(), max_side);
        let clean = resize_long_side(&load_image(&self.clean)?.to_f32(), max_side);
        ImagePair::new(self.key.clone(), rainy, clean)
    }

    pub fn cache(&mut self, max_side: usize) -> Result<()> {
        if self.cached.is_none() {
            self.cached = Some(self.load(max_side)?);
        }
        Ok(())
    }
}

/// How rainy files are matched to clean files: identical stems after removing
/// every match of `strip` (if any) from both stems.
#[derive(Clone, Debug, Default)]
pub struct PairingRule {
    pub strip: Option<Regex>,
}

impl PairingRule {
    pub fn suffix(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| Error::Config(format!("bad pairing regex `{pattern}`: {e}")))?;
        Ok(PairingRule { strip: Some(re) })
    }

    pub fn key(&self, stem: &str) -> String {
        match &self.strip {
            Some(re) => re.replace_all(stem, "").into_owned(),
            None => stem.to_string(),
        }
    }
}

/// Result of pairing two directories.
#[derive(Clone, Debug, Default)]
pub struct ScanReport {
    /// Sorted by key.
    pub pairs: Vec<DatasetPair>,
    /// Files in either directory without a partner.
    pub orphans: Vec<PathBuf>,
    /// Pairs dropped, with the reason.
    pub rejected: Vec<(String, String)>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn keyed(files: Vec<PathBuf>, rule: &PairingRule) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let key = rule.key(stem);
        if let Some(prev) = map.insert(key.clone(), f.clone()) {
            return Err(Error::Dataset(format!(
                "{} and {} both pair as `{key}`",
                prev.display(),
                f.display()
            )));
        }
    }
    Ok(map)
}

/// Pairs the PNG files of two directories. Unpaired files and pairs whose
/// dimensions differ are reported (and logged) rather than failing the scan.
pub fn scan_dataset(rainy_dir: &Path, clean_dir: &Path, rule: &PairingRule) -> Result<ScanReport> {
    let rainy = keyed(png_files(rainy_dir)?, rule)?;
    let mut clean = keyed(png_files(clean_dir)?, rule)?;
    let mut report = ScanReport::default();
    for (key, r) in rainy {
        let Some(c) = clean.remove(&key) else {
            log::warn!("no clean partner for {}", r.display());
            report.orphans.push(r);
            continue;
        };
        let (dr, dc) = (image_dimensions(&r)?, image_dimensions(&c)?);
        if dr != dc {
            let why = format!(
                "{} is {}x{} but {} is {}x{}",
                r.display(),
                dr.0,
                dr.1,
                c.display(),
                dc.0,
                dc.1
            );
            log::warn!("rejecting pair `{key}`: {why}");
            report.rejected.push((key, why));
            continue;
        }
        report.pairs.push(DatasetPair { key, rainy: r, clean: c, cached: None });
    }
    for c in clean.into_values() {
        log::warn!("no rainy partner for {}", c.display());
        report.orphans.push(c);
    }
    report.orphans.sort();
    Ok(report)
}

/// `<dir>/rainy` and `<dir>/clean`, the layout written by the synthesizer.
pub fn scan_split(dir: &Path, rule: &PairingRule) -> Result<ScanReport> {
    scan_dataset(&dir.join("rainy"), &dir.join("clean"), rule)
}
