use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{GraNetConfig, LEVELS};
use crate::error::{Error, Result};
use crate::params::{conv_specs, BoundParams, ParamRole, ParamSpec};
use crate::tensor::{Graph, Scalar, Tensor};

/// Every parameter of the network described by `cfg`, in a fixed order.
pub fn param_specs(cfg: &GraNetConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for level in 0..LEVELS {
        specs.extend(cfg.coarse_dense(level).param_specs(&format!("coarse.dense{level}")));
    }
    for level in (0..LEVELS).rev() {
        if cfg.use_ra {
            specs.extend(cfg.ra(level).param_specs(&format!("coarse.ra{level}")));
        }
        if cfg.needs_adapter(level) {
            specs.extend(conv_specs(
                &format!("coarse.adapter{level}"),
                cfg.coarse_channels[level],
                cfg.ascending_channels(level),
                1,
            ));
        }
    }
    specs.extend(conv_specs("coarse.mask", 3, cfg.coarse_channels[0], 3));
    if cfg.use_fine {
        specs.extend(conv_specs("fine.stem", cfg.fine_channels, 3, 3));
        for b in 0..cfg.fine_dense_blocks {
            specs.extend(cfg.fine_dense().param_specs(&format!("fine.dense{b}")));
        }
        let merged = cfg.fine_concat_channels() / cfg.merge_k.max(1);
        if !cfg.use_merge {
            specs.extend(conv_specs("fine.merge_conv", merged, cfg.fine_concat_channels(), 1));
        }
        specs.extend(conv_specs("fine.out", 3, merged, 3));
    }
    specs
}

/// Named parameter store for one network configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GraNetWeights<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl<T: Scalar> GraNetWeights<T> {
    /// Weights uniform in `+-sqrt(6 / fan_in)` (variance `2 / fan_in`), biases
    /// zero. Each tensor has its own stream derived from `seed` and its name,
    /// so adding a parameter does not reshuffle the others.
    pub fn init(cfg: &GraNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let t = match s.role {
                    ParamRole::Bias => Tensor::zeros(s.shape),
                    ParamRole::Weight => {
                        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &s.name));
                        let a = (6.0 / s.fan_in.max(1) as f64).sqrt();
                        Tensor::from_fn(s.shape, |_| T::from_f64(rng.random_range(-a..a)))
                    }
                };
                (s.name, t)
            })
            .collect();
        Ok(GraNetWeights { tensors })
    }

    /// Builds a store from loaded tensors, checking names and shapes against
    /// `cfg`.
    pub fn from_tensors(cfg: &GraNetConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let specs = param_specs(cfg);
        let mut out = BTreeMap::new();
        for s in &specs {
            let t = tensors
                .remove(&s.name)
                .ok_or_else(|| Error::MissingParam(s.name.clone()))?;
            if t.shape() != s.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, the configuration expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            out.insert(s.name.clone(), t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(GraNetWeights { tensors: out })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> GraNetWeights<U> {
        GraNetWeights {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zeroes the mask head and the fine-stage output convolution, making
    /// the network the identity map.
    pub fn zero_heads(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with("coarse.mask.") || name.starts_with("fine.out.") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Registers every tensor in `g`; as trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let mut bound = BoundParams::new();
        for (name, t) in &self.tensors {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            bound.insert(name.clone(), v);
        }
        bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted_store_matches_specs() {
        let cfg = GraNetConfig::default();
        let specs = param_specs(&cfg);
        let w = GraNetWeights::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(w.len(), specs.len());
        for s in &specs {
            assert_eq!(w.get(&s.name).unwrap().shape(), s.shape);
        }
    }

    #[test]
    fn init_statistics() {
        let cfg = GraNetConfig::default();
        let w = GraNetWeights::<f64>::init(&cfg, 3).unwrap();
        let t = w.get("fine.dense0.conv3.weight").unwrap();
        let fan_in = t.shape()[1] * 9;
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / fan_in as f64;
        assert!(mean.abs() < 0.05 * want.sqrt(), "{mean}");
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
        assert!(w.get("fine.dense0.conv3.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let cfg = GraNetConfig::default();
        let a = GraNetWeights::<f32>::init(&cfg, 9).unwrap();
        assert_eq!(a, GraNetWeights::<f32>::init(&cfg, 9).unwrap());
        assert_ne!(a, GraNetWeights::<f32>::init(&cfg, 10).unwrap());
    }

    #[test]
    fn ablations_drop_their_parameters() {
        let cfg = GraNetConfig {
            use_ra: false,
            use_fine: false,
            ..GraNetConfig::default()
        };
        let specs = param_specs(&cfg);
        assert!(specs.iter().all(|s| !s.name.contains(".ra") && !s.name.starts_with("fine.")));
        let cfg = GraNetConfig {
            use_merge: false,
            ..GraNetConfig::default()
        };
        let merge = param_specs(&cfg).into_iter().find(|s| s.name == "fine.merge_conv.weight").unwrap();
        assert_eq!(merge.shape, [64, 256, 1, 1]);
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let cfg = GraNetConfig::default();
        let w = GraNetWeights::<f32>::init(&cfg, 0).unwrap();
        let mut map: BTreeMap<String, Tensor<f32>> = w.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        assert!(GraNetWeights::from_tensors(&cfg, map.clone()).is_ok());
        map.insert("coarse.mask.bias".into(), Tensor::zeros([1, 4, 1, 1]));
        assert!(GraNetWeights::from_tensors(&cfg, map.clone()).is_err());
        map.remove("coarse.mask.bias");
        assert!(matches!(GraNetWeights::from_tensors(&cfg, map), Err(Error::MissingParam(_))));
    }
}
