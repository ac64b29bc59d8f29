use std::fmt::Write as _;

use crate::blocks::{DenseBlockConfig, MergingConfig, RABlockConfig, RegionGrid};
use crate::error::{Error, Result};
use crate::kv::{self, Entry};

/// Number of pooling levels in the coarse stage.
pub const LEVELS: usize = 3;

/// Spatial sizes fed to the coarse stage must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 1 << LEVELS;

/// Hyperparameters of the two-stage network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraNetConfig {
    /// Feature width of the dense block at each coarse level (full, 1/2 and
    /// 1/4 resolution).
    pub coarse_channels: [usize; LEVELS],
    /// Region grid of the attention block whose output is unpooled into
    /// level `i`; level 0 sees the finest feature map.
    pub region_grids: [RegionGrid; LEVELS],
    pub dense_layers: usize,
    pub dense_growth: usize,
    pub fine_channels: usize,
    pub fine_dense_blocks: usize,
    pub merge_k: usize,
    /// Region-aware attention on the ascending path.
    pub use_ra: bool,
    /// Fine stage; when off the coarse result is the final output.
    pub use_fine: bool,
    /// Merging block; when off a 1x1 convolution of the same output width
    /// takes its place.
    pub use_merge: bool,
    /// Add the coarse result to the fine-stage output.
    pub fine_residual: bool,
}

impl Default for GraNetConfig {
    fn default() -> Self {
        GraNetConfig {
            coarse_channels: [32, 64, 128],
            region_grids: [RegionGrid::square(4), RegionGrid::square(2), RegionGrid::square(1)],
            dense_layers: 4,
            dense_growth: 16,
            fine_channels: 64,
            fine_dense_blocks: 4,
            merge_k: 4,
            use_ra: true,
            use_fine: true,
            use_merge: true,
            fine_residual: true,
        }
    }
}

impl GraNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_channels.contains(&0) {
            return Err(Error::Config("model.coarse_channels must all be >= 1".into()));
        }
        if self.dense_growth == 0 {
            return Err(Error::Config("model.dense_growth must be >= 1".into()));
        }
        if self.use_fine {
            if self.fine_channels == 0 || self.fine_dense_blocks == 0 {
                return Err(Error::Config(
                    "model.fine_channels and model.fine_dense_blocks must be >= 1".into(),
                ));
            }
            MergingConfig::new(self.fine_concat_channels(), self.merge_k).map_err(|_| {
                Error::Config(format!(
                    "fine-stage concat width {} (fine_dense_blocks * fine_channels) is not divisible by model.merge_k = {}",
                    self.fine_concat_channels(),
                    self.merge_k
                ))
            })?;
        }
        Ok(())
    }

    pub(crate) fn coarse_dense(&self, level: usize) -> DenseBlockConfig {
        DenseBlockConfig {
            in_channels: if level == 0 { 3 } else { self.coarse_channels[level - 1] },
            growth_channels: self.dense_growth,
            num_layers: self.dense_layers,
            out_channels: self.coarse_channels[level],
        }
    }

    /// Channel width of the global feature that is unpooled into `level`.
    pub(crate) fn ascending_channels(&self, level: usize) -> usize {
        self.coarse_channels[(level + 1).min(LEVELS - 1)]
    }

    pub(crate) fn ra(&self, level: usize) -> RABlockConfig {
        RABlockConfig::new(self.ascending_channels(level), self.region_grids[level])
    }

    pub(crate) fn needs_adapter(&self, level: usize) -> bool {
        self.ascending_channels(level) != self.coarse_channels[level]
    }

    pub(crate) fn fine_dense(&self) -> DenseBlockConfig {
        DenseBlockConfig {
            in_channels: self.fine_channels,
            growth_channels: self.dense_growth,
            num_layers: self.dense_layers,
            out_channels: self.fine_channels,
        }
    }

    pub fn fine_concat_channels(&self) -> usize {
        self.fine_dense_blocks * self.fine_channels
    }

    pub(crate) fn merging(&self) -> Result<MergingConfig> {
        MergingConfig::new(self.fine_concat_channels(), self.merge_k)
    }

    /// Applies one `model.*` entry (`e.key` without the `model.` prefix is
    /// matched against `name`).
    pub(crate) fn set(&mut self, name: &str, e: &Entry) -> Result<()> {
        match name {
            "coarse_channels" => {
                let v: Vec<usize> = kv::list(e)?;
                self.coarse_channels = v.try_into().map_err(|v: Vec<usize>| {
                    Error::Config(format!(
                        "line {}: model.coarse_channels needs {LEVELS} values, got {}",
                        e.line,
                        v.len()
                    ))
                })?;
            }
            "region_grids" => {
                let v: Vec<RegionGrid> = kv::list(e)?;
                self.region_grids = v.try_into().map_err(|v: Vec<RegionGrid>| {
                    Error::Config(format!(
                        "line {}: model.region_grids needs {LEVELS} values, got {}",
                        e.line,
                        v.len()
                    ))
                })?;
            }
            "dense_layers" => self.dense_layers = kv::value(e)?,
            "dense_growth" => self.dense_growth = kv::value(e)?,
            "fine_channels" => self.fine_channels = kv::value(e)?,
            "fine_dense_blocks" => self.fine_dense_blocks = kv::value(e)?,
            "merge_k" => self.merge_k = kv::value(e)?,
            "use_ra" => self.use_ra = kv::value(e)?,
            "use_fine" => self.use_fine = kv::value(e)?,
            "use_merge" => self.use_merge = kv::value(e)?,
            "fine_residual" => self.fine_residual = kv::value(e)?,
            _ => return Err(kv::unknown(e)),
        }
        Ok(())
    }

    /// Canonical `model.*` lines. Two configs build the same network iff
    /// their canonical texts are equal.
    pub fn to_kv(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let mut s = String::new();
        let c: Vec<String> = self.coarse_channels.iter().map(|c| c.to_string()).collect();
        let g: Vec<String> = self.region_grids.iter().map(|g| g.to_string()).collect();
        writeln!(s, "model.coarse_channels = {}", join(&c)).unwrap();
        writeln!(s, "model.region_grids = {}", join(&g)).unwrap();
        writeln!(s, "model.dense_layers = {}", self.dense_layers).unwrap();
        writeln!(s, "model.dense_growth = {}", self.dense_growth).unwrap();
        writeln!(s, "model.fine_channels = {}", self.fine_channels).unwrap();
        writeln!(s, "model.fine_dense_blocks = {}", self.fine_dense_blocks).unwrap();
        writeln!(s, "model.merge_k = {}", self.merge_k).unwrap();
        writeln!(s, "model.use_ra = {}", self.use_ra).unwrap();
        writeln!(s, "model.use_fine = {}", self.use_fine).unwrap();
        writeln!(s, "model.use_merge = {}", self.use_merge).unwrap();
        writeln!(s, "model.fine_residual = {}", self.fine_residual).unwrap();
        s
    }

    /// Parses a text containing only `model.*` keys.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = GraNetConfig::default();
        for e in kv::parse(text)? {
            match e.key.strip_prefix("model.") {
                Some(name) => cfg.set(name, &e)?,
                None => return Err(kv::unknown(&e)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = GraNetConfig { coarse_channels: [8, 16, 24], use_merge: false, ..GraNetConfig::default() };
        cfg.region_grids[0] = RegionGrid::new(3, 2).unwrap();
        assert_eq!(GraNetConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = GraNetConfig::from_kv("model.fine_channels = 8\nmodel.fin_channels = 8").unwrap_err();
        assert!(matches!(err, Error::UnknownKey { ref key, line: 2 } if key == "model.fin_channels"));
    }

    #[test]
    fn indivisible_merge_width_is_rejected() {
        let err = GraNetConfig::from_kv("model.fine_channels = 3\nmodel.fine_dense_blocks = 1").unwrap_err();
        assert!(err.to_string().contains("merge_k"), "{err}");
    }

    #[test]
    fn wrong_list_length_is_rejected() {
        assert!(GraNetConfig::from_kv("model.coarse_channels = 8,16").is_err());
    }

    #[test]
    fn ascending_widths_and_adapters() {
        let cfg = GraNetConfig::default();
        assert_eq!(cfg.ascending_channels(2), 128);
        assert_eq!(cfg.ascending_channels(1), 128);
        assert_eq!(cfg.ascending_channels(0), 64);
        assert!(!cfg.needs_adapter(2));
        assert!(cfg.needs_adapter(1) && cfg.needs_adapter(0));
    }
}
