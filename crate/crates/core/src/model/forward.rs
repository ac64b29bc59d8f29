use super::config::{GraNetConfig, LEVELS, SPATIAL_MULTIPLE};
use crate::blocks::{dense_block, merging_block, ra_block, DenseBlockParams, RABlockParams};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ConvParams};
use crate::tensor::{CropRecord, Graph, PoolIndices, Scalar, Var};

/// Graph handles of the three instrumented outputs, all `(n, 3, h, w)`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// Signed rain-streak mask predicted by the coarse stage.
    pub mask: Var,
    /// `input - mask`.
    pub coarse_result: Var,
    /// Refined output of the fine stage.
    pub final_image: Var,
}

/// Coarse stage on an input whose sides are multiples of 8. Returns the
/// 3-channel signed mask and the pooling indices of each level.
pub fn coarse_forward<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    cfg: &GraNetConfig,
    p: &BoundParams,
) -> Result<(Var, Vec<PoolIndices>)> {
    let [_, c, h, w] = g.shape(input);
    if c != 3 {
        return Err(Error::shape("coarse_forward", format!("expected 3 input channels, got {c}")));
    }
    if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "coarse_forward",
            format!("spatial size {h}x{w} is not a multiple of {SPATIAL_MULTIPLE}; pad the input first"),
        ));
    }

    // descending path: local features, then pool
    let mut local = Vec::with_capacity(LEVELS);
    let mut indices = Vec::with_capacity(LEVELS);
    let mut x = input;
    for level in 0..LEVELS {
        let dcfg = cfg.coarse_dense(level);
        let dp = DenseBlockParams::bind(&format!("coarse.dense{level}"), &dcfg, p)?;
        let f = dense_block(g, x, &dcfg, &dp)?;
        let (pooled, idx) = g.maxpool2d(f)?;
        local.push(f);
        indices.push(idx);
        x = pooled;
    }

    // ascending path: attention, unpool into the level's positions, add skip
    for level in (0..LEVELS).rev() {
        let mut y = x;
        if cfg.use_ra {
            let rp = RABlockParams::bind(&format!("coarse.ra{level}"), p)?;
            y = ra_block(g, y, &cfg.ra(level), &rp)?;
        }
        if cfg.needs_adapter(level) {
            y = ConvParams::bind(&format!("coarse.adapter{level}"), p)?.apply(g, y)?;
        }
        let [_, _, lh, lw] = g.shape(local[level]);
        let up = g.maxunpool2d(y, &indices[level], lh, lw)?;
        x = g.add(up, local[level])?;
    }
    let mask = ConvParams::bind("coarse.mask", p)?.apply(g, x)?;
    Ok((mask, indices))
}

/// `input - mask`, unclamped.
pub fn residual_subtract<T: Scalar>(g: &mut Graph<T>, input: Var, mask: Var) -> Result<Var> {
    g.sub(input, mask)
}

/// Fine stage: stem, chained dense blocks whose outputs are all concatenated,
/// merging, output convolution and (optionally) a global residual.
pub fn fine_forward<T: Scalar>(g: &mut Graph<T>, coarse: Var, cfg: &GraNetConfig, p: &BoundParams) -> Result<Var> {
    let stem = ConvParams::bind("fine.stem", p)?.apply(g, coarse)?;
    let mut x = g.relu(stem);
    let dcfg = cfg.fine_dense();
    let mut skips = Vec::with_capacity(cfg.fine_dense_blocks);
    for b in 0..cfg.fine_dense_blocks {
        let dp = DenseBlockParams::bind(&format!("fine.dense{b}"), &dcfg, p)?;
        x = dense_block(g, x, &dcfg, &dp)?;
        skips.push(x);
    }
    let all = if skips.len() == 1 { skips[0] } else { g.concat_channels(&skips)? };
    let merged = if cfg.use_merge {
        merging_block(g, all, &cfg.merging()?)?
    } else {
        ConvParams::bind("fine.merge_conv", p)?.apply(g, all)?
    };
    let correction = ConvParams::bind("fine.out", p)?.apply(g, merged)?;
    if cfg.fine_residual {
        g.add(coarse, correction)
    } else {
        Ok(correction)
    }
}

/// Full network on an arbitrary-size `(n, 3, h, w)` input: reflect-pad to a
/// multiple of 8, run both stages, crop back.
pub fn granet_forward<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    cfg: &GraNetConfig,
    p: &BoundParams,
) -> Result<ForwardOutputs> {
    let [_, _, h, w] = g.shape(input);
    if h == 0 || w == 0 {
        return Err(Error::shape("granet_forward", "empty input"));
    }
    let rec = CropRecord::for_multiple(h, w, SPATIAL_MULTIPLE);
    let padded = if rec.is_identity() {
        input
    } else {
        g.reflect_pad(input, rec.padded_h, rec.padded_w)?
    };
    let (mask, _) = coarse_forward(g, padded, cfg, p)?;
    let coarse = residual_subtract(g, padded, mask)?;
    let fine = if cfg.use_fine {
        fine_forward(g, coarse, cfg, p)?
    } else {
        coarse
    };
    let crop = |g: &mut Graph<T>, v: Var| if rec.is_identity() { Ok(v) } else { g.crop(v, h, w) };
    Ok(ForwardOutputs {
        mask: crop(g, mask)?,
        coarse_result: crop(g, coarse)?,
        final_image: crop(g, fine)?,
    })
}

/// Mean absolute error over every element (batch, channel and pixels).
pub fn mae_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}
