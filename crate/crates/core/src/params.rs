//! Named parameter descriptions and graph bindings.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Shape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Name, shape and initialization fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub fan_in: usize,
    pub role: ParamRole,
}

/// Weight `(c_out, c_in, k, k)` and bias `(1, c_out, 1, 1)` for a convolution
/// named `prefix`.
pub fn conv_specs(prefix: &str, c_out: usize, c_in: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: format!("{prefix}.weight"),
            shape: [c_out, c_in, k, k],
            fan_in: c_in * k * k,
            role: ParamRole::Weight,
        },
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: [1, c_out, 1, 1],
            fan_in: c_in * k * k,
            role: ParamRole::Bias,
        },
    ]
}

/// Bias-free convolution weight `(c_out, c_in, k, k)`.
pub fn conv_weight_spec(prefix: &str, c_out: usize, c_in: usize, k: usize) -> ParamSpec {
    ParamSpec {
        name: format!("{prefix}.weight"),
        shape: [c_out, c_in, k, k],
        fan_in: c_in * k * k,
        role: ParamRole::Weight,
    }
}

/// Parameters registered in one graph, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// A bound convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl ConvParams {
    pub fn bind(prefix: &str, params: &BoundParams) -> Result<Self> {
        Ok(ConvParams {
            weight: params.get(&format!("{prefix}.weight"))?,
            bias: Some(params.get(&format!("{prefix}.bias"))?),
        })
    }

    pub fn bind_unbiased(prefix: &str, params: &BoundParams) -> Result<Self> {
        Ok(ConvParams {
            weight: params.get(&format!("{prefix}.weight"))?,
            bias: None,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias)
    }
}
