//! Region-aware non-local attention.
//!
//! The feature map is split into a grid of tiles and an embedded-Gaussian
//! non-local operation runs independently inside each tile:
//! `y_i = sum_j softmax_j(theta(x_i) . phi(x_j)) g(x_j)` over positions `j` of
//! the tile containing `i`, followed by a 1x1 output projection and a
//! residual add of the block input.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{conv_specs, conv_weight_spec, BoundParams, ConvParams, ParamSpec};
use crate::tensor::{Graph, Rect, Scalar, Var};

/// An `rows x cols` partition of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
}

impl RegionGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("region grid must be at least 1x1, got {rows}x{cols}")));
        }
        Ok(RegionGrid { rows, cols })
    }

    pub fn square(r: usize) -> Self {
        RegionGrid { rows: r.max(1), cols: r.max(1) }
    }
}

impl fmt::Display for RegionGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for RegionGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid region grid `{s}`, expected e.g. 4x4"));
        let (r, c) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let r = r.trim().parse().map_err(|_| bad())?;
        let c = c.trim().parse().map_err(|_| bad())?;
        RegionGrid::new(r, c)
    }
}

/// Tiles covering an `h x w` map exactly once. Every tile is
/// `floor(h / rows) x floor(w / cols)` except the last row and column of
/// tiles, which absorb the remainder.
pub fn region_partition(h: usize, w: usize, grid: RegionGrid) -> Result<Vec<Rect>> {
    if grid.rows == 0 || grid.cols == 0 || h < grid.rows || w < grid.cols {
        return Err(Error::shape(
            "region_partition",
            format!("grid {grid} does not fit a {h}x{w} feature map"),
        ));
    }
    let (th, tw) = (h / grid.rows, w / grid.cols);
    let mut rects = Vec::with_capacity(grid.rows * grid.cols);
    for r in 0..grid.rows {
        let rh = if r + 1 == grid.rows { h - r * th } else { th };
        for c in 0..grid.cols {
            let cw = if c + 1 == grid.cols { w - c * tw } else { tw };
            rects.push(Rect {
                y: r * th,
                x: c * tw,
                h: rh,
                w: cw,
            });
        }
    }
    Ok(rects)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RABlockConfig {
    pub channels: usize,
    pub grid: RegionGrid,
    /// Width of the theta/phi/g embeddings.
    pub embed_channels: usize,
}

impl RABlockConfig {
    /// Embedding width defaults to half the channel count (at least 1).
    pub fn new(channels: usize, grid: RegionGrid) -> Self {
        RABlockConfig {
            channels,
            grid,
            embed_channels: (channels / 2).max(1),
        }
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let (c, e) = (self.channels, self.embed_channels);
        let mut specs = conv_specs(&format!("{prefix}.theta"), e, c, 1);
        specs.push(conv_weight_spec(&format!("{prefix}.phi"), e, c, 1));
        specs.extend(conv_specs(&format!("{prefix}.g"), e, c, 1));
        specs.extend(conv_specs(&format!("{prefix}.out"), c, e, 1));
        specs
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RABlockParams {
    pub theta: ConvParams,
    pub phi: ConvParams,
    pub g: ConvParams,
    pub out: ConvParams,
}

impl RABlockParams {
    pub fn bind(prefix: &str, params: &BoundParams) -> Result<Self> {
        Ok(RABlockParams {
            theta: ConvParams::bind(&format!("{prefix}.theta"), params)?,
            phi: ConvParams::bind_unbiased(&format!("{prefix}.phi"), params)?,
            g: ConvParams::bind(&format!("{prefix}.g"), params)?,
            out: ConvParams::bind(&format!("{prefix}.out"), params)?,
        })
    }
}

/// Intermediate values of one region-aware block evaluation.
#[derive(Clone, Debug)]
pub struct RaTrace {
    pub output: Var,
    /// Output of the projection, before the residual add.
    pub pre_residual: Var,
    /// Row-stochastic `(1, 1, P, P)` attention matrix per (batch, tile).
    pub attention: Vec<Var>,
    pub tiles: Vec<Rect>,
}

pub fn ra_block<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &RABlockConfig, p: &RABlockParams) -> Result<Var> {
    Ok(ra_block_traced(g, x, cfg, p)?.output)
}

pub fn ra_block_traced<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &RABlockConfig,
    p: &RABlockParams,
) -> Result<RaTrace> {
    let [n, c, h, w] = g.shape(x);
    if c != cfg.channels {
        return Err(Error::shape(
            "ra_block",
            format!("input has {c} channels, block expects channels = {}", cfg.channels),
        ));
    }
    let tiles = region_partition(h, w, cfg.grid)?;
    let theta = p.theta.apply(g, x)?;
    let phi = p.phi.apply(g, x)?;
    let gx = p.g.apply(g, x)?;

    let mut parts = Vec::with_capacity(n * tiles.len());
    let mut attention = Vec::with_capacity(n * tiles.len());
    for b in 0..n {
        for &rect in &tiles {
            let t = g.region_matrix(theta, b, rect)?;
            let f = g.region_matrix(phi, b, rect)?;
            let v = g.region_matrix(gx, b, rect)?;
            let affinity = g.matmul_nt(t, f)?;
            let weights = g.softmax_rows(affinity);
            parts.push(g.matmul(weights, v)?);
            attention.push(weights);
        }
    }
    let y = g.assemble_regions(&parts, &tiles, [n, cfg.embed_channels, h, w])?;
    let pre_residual = p.out.apply(g, y)?;
    let output = g.add(x, pre_residual)?;
    Ok(RaTrace {
        output,
        pre_residual,
        attention,
        tiles,
    })
}
