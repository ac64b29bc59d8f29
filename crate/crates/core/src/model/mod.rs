//! The two-stage de-raining network: a coarse encoder-decoder predicting a
//! rain-streak mask, residual subtraction, and a fine refinement stage.

mod config;
mod forward;
mod weights;

pub use config::{GraNetConfig, LEVELS, SPATIAL_MULTIPLE};
pub use forward::{coarse_forward, fine_forward, granet_forward, mae_loss, residual_subtract, ForwardOutputs};
pub use weights::{param_specs, GraNetWeights};

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor};

/// Concrete values of the three instrumented outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T = f32> {
    pub mask: Tensor<T>,
    pub coarse_result: Tensor<T>,
    pub final_image: Tensor<T>,
}

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GraNet<T = f32> {
    pub config: GraNetConfig,
    pub weights: GraNetWeights<T>,
}

impl<T: Scalar> GraNet<T> {
    pub fn new(config: GraNetConfig, seed: u64) -> Result<Self> {
        let weights = GraNetWeights::init(&config, seed)?;
        Ok(GraNet { config, weights })
    }

    /// Inference on an `(n, 3, h, w)` tensor without recording gradients.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let p = self.weights.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = granet_forward(&mut g, x, &self.config, &p)?;
        Ok(Prediction {
            mask: g.value(out.mask).clone(),
            coarse_result: g.value(out.coarse_result).clone(),
            final_image: g.value(out.final_image).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, CheckOptions};
    use crate::tensor::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Small but structurally complete configuration for fast tests.
    fn tiny() -> GraNetConfig {
        GraNetConfig {
            coarse_channels: [4, 6, 8],
            dense_layers: 2,
            dense_growth: 3,
            fine_channels: 4,
            fine_dense_blocks: 2,
            merge_k: 4,
            ..GraNetConfig::default()
        }
    }

    fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_heads_make_the_network_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = GraNet::<f32>::new(tiny(), 5).unwrap();
        net.weights.zero_heads();
        for (h, w) in [(31, 31), (64, 64), (100, 100), (9, 17)] {
            let x = image(&mut rng, h, w);
            let out = net.predict(&x).unwrap();
            assert!(out.mask.data().iter().all(|&v| v == 0.0));
            assert!(out.coarse_result.bit_eq(&x));
            assert!(out.final_image.bit_eq(&x), "{h}x{w}");
        }
    }

    #[test]
    fn output_shapes_follow_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = GraNet::<f32>::new(tiny(), 6).unwrap();
        for (h, w) in [(31, 31), (64, 64), (100, 100), (8, 8), (65, 70)] {
            let out = net.predict(&image(&mut rng, h, w)).unwrap();
            assert_eq!(out.mask.shape(), [1, 3, h, w]);
            assert_eq!(out.coarse_result.shape(), [1, 3, h, w]);
            assert_eq!(out.final_image.shape(), [1, 3, h, w]);
        }
    }

    #[test]
    fn pooled_sizes_halve_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = tiny();
        let w = GraNetWeights::<f32>::init(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let x = g.constant(image(&mut rng, 64, 64));
        let (mask, idx) = coarse_forward(&mut g, x, &cfg, &p).unwrap();
        assert_eq!(g.shape(mask), [1, 3, 64, 64]);
        let sizes: Vec<usize> = idx.iter().map(|i| i.shape()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8]);
    }

    #[test]
    fn coarse_forward_rejects_unpadded_input() {
        let cfg = tiny();
        let w = GraNetWeights::<f32>::init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 3, 12, 16]));
        let err = coarse_forward(&mut g, x, &cfg, &p).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn coarse_result_is_exactly_input_minus_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = GraNet::<f32>::new(tiny(), 8).unwrap();
        let x = image(&mut rng, 24, 40);
        let out = net.predict(&x).unwrap();
        let want: Vec<f32> = x.data().iter().zip(out.mask.data()).map(|(a, b)| a - b).collect();
        assert_eq!(out.coarse_result.data(), &want[..]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = GraNet::<f32>::new(tiny(), 9).unwrap();
        let x = image(&mut rng, 32, 24);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert!(a.final_image.bit_eq(&b.final_image) && a.mask.bit_eq(&b.mask));
    }

    #[test]
    fn fine_stage_with_zero_output_conv_returns_its_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = GraNet::<f32>::new(tiny(), 10).unwrap();
        for name in ["fine.out.weight", "fine.out.bias"] {
            net.weights.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let out = net.predict(&image(&mut rng, 16, 16)).unwrap();
        assert!(out.final_image.bit_eq(&out.coarse_result));
    }

    fn ablations() -> Vec<GraNetConfig> {
        let base = tiny();
        vec![
            GraNetConfig { use_ra: false, use_fine: false, ..base.clone() },
            GraNetConfig { use_fine: false, ..base.clone() },
            GraNetConfig { use_merge: false, ..base.clone() },
            base,
        ]
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for cfg in ablations() {
            let w = GraNetWeights::<f64>::init(&cfg, 11).unwrap();
            let mut g = Graph::new();
            let p = w.bind(&mut g, true);
            let x = g.constant(image(&mut rng, 16, 16).cast());
            let y = g.constant(image(&mut rng, 16, 16).cast());
            let out = granet_forward(&mut g, x, &cfg, &p).unwrap();
            let loss = mae_loss(&mut g, out.final_image, y).unwrap();
            g.backward(loss).unwrap();
            for (name, v) in p.iter() {
                let grad = g.grad(v).unwrap_or(&[]);
                let peak = grad.iter().fold(0.0f64, |m, d| m.max(d.abs()));
                assert!(peak > 1e-9, "{name} is dead in {cfg:?} (max |grad| {peak:e})");
            }
        }
    }

    #[test]
    fn mae_loss_values_and_symmetries() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::<f64>::from_fn([2, 3, 5, 4], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn([2, 3, 5, 4], |_| rng.random_range(-1.0..1.0));
        let loss = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
            let l = mae_loss(&mut g, xv, yv).unwrap();
            g.value(l).item().unwrap()
        };
        assert_eq!(loss(&a, &a), 0.0);
        assert!((loss(&a, &a.map(|v| v + 0.5)) - 0.5).abs() < 1e-12);
        let oracle = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!((loss(&a, &b) - oracle).abs() < 1e-12);
        assert!((loss(&a, &b) - loss(&b, &a)).abs() < 1e-15);
        assert!((loss(&a.map(|v| v + 3.0), &b.map(|v| v + 3.0)) - loss(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn small_model_gradient_check() {
        let cfg = tiny();
        let w = GraNetWeights::<f64>::init(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Tensor<f64> = image(&mut rng, 16, 16).cast();
        let y: Tensor<f64> = image(&mut rng, 16, 16).cast();
        let names: Vec<String> = w.iter().map(|(k, _)| k.to_string()).collect();
        let mut inputs: Vec<Tensor<f64>> = w.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(x);
        let f = |g: &mut Graph<f64>, vars: &[Var]| {
            let mut p = crate::params::BoundParams::new();
            for (n, &v) in names.iter().zip(vars) {
                p.insert(n.clone(), v);
            }
            let target = g.constant(y.clone());
            let out = granet_forward(g, vars[names.len()], &cfg, &p)?;
            mae_loss(g, out.final_image, target)
        };
        let opts = CheckOptions {
            max_coords_per_input: Some(3),
            seed: 1,
            ..CheckOptions::default()
        };
        let report = check_gradients(f, &inputs, &opts).unwrap();
        assert!(report.checked > 3 * names.len() / 2);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
