use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Parameter-free channel-group averaging: `C` input channels become
/// `C / k` output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MergingConfig {
    pub k: usize,
    pub in_channels: usize,
}

impl MergingConfig {
    pub fn new(in_channels: usize, k: usize) -> Result<Self> {
        if k == 0 || !in_channels.is_multiple_of(k) {
            return Err(Error::Config(format!(
                "merging block: {in_channels} channels are not divisible by k = {k}"
            )));
        }
        Ok(MergingConfig { k, in_channels })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels / self.k
    }
}

/// Splits the channels into `k` contiguous groups `A^1..A^k` of `C / k`
/// channels and averages them: `B[c] = (1/k) * sum_i A^i[c]`.
pub fn merging_block<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &MergingConfig) -> Result<Var> {
    let c = g.shape(x)[1];
    if c != cfg.in_channels {
        return Err(Error::shape(
            "merging_block",
            format!("input has {c} channels, block expects in_channels = {}", cfg.in_channels),
        ));
    }
    MergingConfig::new(c, cfg.k)?;
    if cfg.k == 1 {
        return Ok(x);
    }
    let width = cfg.out_channels();
    let mut acc = g.slice_channels(x, 0, width)?;
    for i in 1..cfg.k {
        let group = g.slice_channels(x, i * width, width)?;
        acc = g.add(acc, group)?;
    }
    Ok(g.scale(acc, 1.0 / cfg.k as f64))
}
