use crate::error::{Error, Result};
use crate::params::{conv_specs, BoundParams, ConvParams, ParamSpec};
use crate::tensor::{Graph, Scalar, Var};

/// Densely connected stack of 3x3 conv + ReLU layers followed by a 1x1
/// transition convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub in_channels: usize,
    pub growth_channels: usize,
    pub num_layers: usize,
    pub out_channels: usize,
}

impl DenseBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.growth_channels == 0 {
            return Err(Error::Config(format!("dense block channel counts must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Width of the concatenation seen by the transition convolution.
    pub fn concat_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.growth_channels
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for l in 0..self.num_layers {
            let c_in = self.in_channels + l * self.growth_channels;
            specs.extend(conv_specs(&format!("{prefix}.conv{l}"), self.growth_channels, c_in, 3));
        }
        specs.extend(conv_specs(
            &format!("{prefix}.transition"),
            self.out_channels,
            self.concat_channels(),
            1,
        ));
        specs
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlockParams {
    pub layers: Vec<ConvParams>,
    pub transition: ConvParams,
}

impl DenseBlockParams {
    pub fn bind(prefix: &str, cfg: &DenseBlockConfig, params: &BoundParams) -> Result<Self> {
        let layers = (0..cfg.num_layers)
            .map(|l| ConvParams::bind(&format!("{prefix}.conv{l}"), params))
            .collect::<Result<_>>()?;
        Ok(DenseBlockParams {
            layers,
            transition: ConvParams::bind(&format!("{prefix}.transition"), params)?,
        })
    }
}

/// Each internal layer sees the channel concatenation of the block input and
/// every earlier layer output; the transition maps the full concatenation to
/// `out_channels`. Spatial size is unchanged.
pub fn dense_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &DenseBlockConfig,
    p: &DenseBlockParams,
) -> Result<Var> {
    let c = g.shape(x)[1];
    if c != cfg.in_channels {
        return Err(Error::shape(
            "dense_block",
            format!("input has {c} channels, block expects in_channels = {}", cfg.in_channels),
        ));
    }
    let mut features = vec![x];
    for layer in &p.layers {
        let input = if features.len() == 1 {
            x
        } else {
            g.concat_channels(&features)?
        };
        let y = layer.apply(g, input)?;
        features.push(g.relu(y));
    }
    let all = if features.len() == 1 {
        x
    } else {
        g.concat_channels(&features)?
    };
    p.transition.apply(g, all)
}
