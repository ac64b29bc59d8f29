//! Finite-difference verification suite over every primitive, every block
//! and the full network, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    dense_block, merging_block, ra_block, DenseBlockConfig, DenseBlockParams, MergingConfig, RABlockConfig,
    RABlockParams, RegionGrid,
};
use crate::error::{Error, Result};
use crate::model::{granet_forward, mae_loss, GraNetConfig, GraNetWeights, SPATIAL_MULTIPLE};
use crate::params::{BoundParams, ParamSpec};
use crate::tensor::gradcheck::{check_gradients, CheckOptions, CheckReport};
use crate::tensor::{Graph, OpKind, Rect, Tensor, Var};

/// Tolerance on the max relative error of every unit.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Side of the square input used for the full-network unit.
    pub size: usize,
    pub seed: u64,
    pub eps: f64,
    /// Coordinates sampled per parameter tensor in the full-network unit.
    pub coords_per_tensor: usize,
    /// Corrupt one backward rule; used to show the suite catches it.
    pub fault: Option<OpKind>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            size: 16,
            seed: 0,
            eps: 1e-4,
            coords_per_tensor: 4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UnitResult {
    pub group: &'static str,
    pub name: String,
    pub report: CheckReport,
}

impl UnitResult {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `mean |P y - t|` with a fixed random 1x1 projection `P` and target `t`.
/// The projection gives every element a generic real upstream weight, so
/// gradient contributions cannot cancel to an exact zero.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let [n, c, h, w] = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let proj = g.constant(Tensor::from_fn([2, c, 1, 1], |_| rng.random_range(0.5..1.5)));
    let t = g.constant(Tensor::from_fn([n, 2, h, w], |_| rng.random_range(-3.0..3.0)));
    let py = g.conv2d(y, proj, None)?;
    mae_loss(g, py, t)
}

type UnitFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Unit {
    group: &'static str,
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: UnitFn,
}

fn unit(
    group: &'static str,
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Unit {
    Unit {
        group,
        name: name.to_string(),
        inputs,
        f: Box::new(f),
    }
}

fn bind_specs(specs: &[ParamSpec], vars: &[Var]) -> BoundParams {
    let mut p = BoundParams::new();
    for (s, &v) in specs.iter().zip(vars) {
        p.insert(s.name.clone(), v);
    }
    p
}

fn primitive_units(rng: &mut ChaCha8Rng, seed: u64) -> Vec<Unit> {
    let mut r = |shape| random(rng, shape);
    let s = seed;
    vec![
        unit("primitive", "conv2d 3x3", vec![r([2, 2, 5, 4]), r([3, 2, 3, 3]), r([1, 3, 1, 1])], move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            probe(g, y, s)
        }),
        unit("primitive", "conv2d 1x1", vec![r([1, 4, 3, 3]), r([2, 4, 1, 1])], move |g, v| {
            let y = g.conv2d(v[0], v[1], None)?;
            probe(g, y, s)
        }),
        unit("primitive", "relu", vec![r([1, 2, 4, 4])], move |g, v| {
            let y = g.relu(v[0]);
            probe(g, y, s)
        }),
        unit("primitive", "abs", vec![r([1, 2, 4, 4])], move |g, v| {
            let y = g.abs(v[0]);
            probe(g, y, s)
        }),
        unit("primitive", "maxpool2d", vec![r([1, 2, 4, 6])], move |g, v| {
            let (y, _) = g.maxpool2d(v[0])?;
            probe(g, y, s)
        }),
        unit("primitive", "maxunpool2d", vec![r([1, 2, 4, 4]), r([1, 2, 2, 2])], move |g, v| {
            let (_, idx) = g.maxpool2d(v[0])?;
            let y = g.maxunpool2d(v[1], &idx, 4, 4)?;
            probe(g, y, s)
        }),
        unit("primitive", "softmax", vec![r([1, 1, 3, 5])], move |g, v| {
            let y = g.softmax_rows(v[0]);
            probe(g, y, s)
        }),
        unit("primitive", "matmul", vec![r([1, 1, 3, 4]), r([1, 1, 4, 2])], move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, s)
        }),
        unit("primitive", "matmul_nt", vec![r([1, 1, 3, 4]), r([1, 1, 5, 4])], move |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            probe(g, y, s)
        }),
        unit("primitive", "add", vec![r([1, 2, 3, 3]), r([1, 2, 3, 3])], move |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, s)
        }),
        unit("primitive", "sub", vec![r([1, 2, 3, 3]), r([1, 2, 3, 3])], move |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y, s)
        }),
        unit("primitive", "scale", vec![r([1, 2, 3, 3])], move |g, v| {
            let y = g.scale(v[0], -0.75);
            probe(g, y, s)
        }),
        unit("primitive", "mean_all", vec![r([2, 2, 3, 3])], move |g, v| {
            let m = g.mean_all(v[0]);
            let y = g.scale(m, 3.0);
            probe(g, y, s)
        }),
        unit("primitive", "concat_channels", vec![r([1, 1, 3, 3]), r([1, 2, 3, 3])], move |g, v| {
            let y = g.concat_channels(&[v[0], v[1], v[0]])?;
            probe(g, y, s)
        }),
        unit("primitive", "slice_channels", vec![r([1, 4, 3, 3])], move |g, v| {
            let y = g.slice_channels(v[0], 1, 2)?;
            probe(g, y, s)
        }),
        unit("primitive", "region_matrix", vec![r([2, 3, 5, 5])], move |g, v| {
            let y = g.region_matrix(v[0], 1, Rect { y: 1, x: 2, h: 3, w: 2 })?;
            probe(g, y, s)
        }),
        unit("primitive", "assemble_regions", vec![r([1, 1, 4, 2]), r([1, 1, 2, 2])], move |g, v| {
            let rects = [Rect { y: 0, x: 0, h: 2, w: 2 }, Rect { y: 2, x: 0, h: 1, w: 2 }];
            let y = g.assemble_regions(&v[..2], &rects, [1, 2, 3, 2])?;
            probe(g, y, s)
        }),
        unit("primitive", "reflect_pad", vec![r([1, 2, 3, 5])], move |g, v| {
            let y = g.reflect_pad(v[0], 8, 8)?;
            probe(g, y, s)
        }),
        unit("primitive", "crop", vec![r([1, 2, 5, 5])], move |g, v| {
            let y = g.crop(v[0], 3, 4)?;
            probe(g, y, s)
        }),
        unit("primitive", "fan-out", vec![r([1, 2, 3, 3])], move |g, v| {
            let a = g.relu(v[0]);
            let b = g.scale(v[0], 2.0);
            let y = g.add(a, b)?;
            let z = g.sub(y, v[0])?;
            probe(g, z, s)
        }),
    ]
}

fn block_units(rng: &mut ChaCha8Rng, seed: u64) -> Vec<Unit> {
    let s = seed;
    let mut units = Vec::new();

    let dcfg = DenseBlockConfig {
        in_channels: 3,
        growth_channels: 2,
        num_layers: 2,
        out_channels: 3,
    };
    let specs = dcfg.param_specs("d");
    let mut inputs: Vec<Tensor<f64>> = specs.iter().map(|sp| random(rng, sp.shape)).collect();
    inputs.push(random(rng, [1, 3, 6, 6]));
    units.push(unit("block", "dense_block", inputs, move |g, v| {
        let p = DenseBlockParams::bind("d", &dcfg, &bind_specs(&specs, v))?;
        let y = dense_block(g, v[specs.len()], &dcfg, &p)?;
        probe(g, y, s)
    }));

    let rcfg = RABlockConfig::new(4, RegionGrid::square(2));
    let specs = rcfg.param_specs("ra");
    let mut inputs: Vec<Tensor<f64>> = specs.iter().map(|sp| random(rng, sp.shape)).collect();
    inputs.push(random(rng, [1, 4, 5, 6]));
    units.push(unit("block", "ra_block 2x2", inputs, move |g, v| {
        let p = RABlockParams::bind("ra", &bind_specs(&specs, v))?;
        let y = ra_block(g, v[specs.len()], &rcfg, &p)?;
        probe(g, y, s)
    }));

    units.push(unit("block", "merging_block k=4", vec![random(rng, [1, 8, 3, 3])], move |g, v| {
        let y = merging_block(g, v[0], &MergingConfig::new(8, 4)?)?;
        probe(g, y, s)
    }));
    units
}

fn run_unit(u: &Unit, opts: &CheckOptions) -> Result<UnitResult> {
    let report = check_gradients(&u.f, &u.inputs, opts)?;
    Ok(UnitResult {
        group: u.group,
        name: u.name.clone(),
        report,
    })
}

fn check_size(size: usize) -> Result<()> {
    if size < SPATIAL_MULTIPLE {
        return Err(Error::Config(format!(
            "gradcheck size must be at least {SPATIAL_MULTIPLE} (three 2x2 pooling levels), got {size}"
        )));
    }
    Ok(())
}

/// Full network plus MAE loss on a `(1, 3, size, size)` input, checking a
/// sample of coordinates in every parameter tensor and in the input.
pub fn check_model(cfg: &GraNetConfig, opts: &SuiteOptions) -> Result<UnitResult> {
    check_size(opts.size)?;
    let weights = GraNetWeights::<f64>::init(cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xda7a);
    let shape = [1, 3, opts.size, opts.size];
    let x = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
    let y = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
    let names: Vec<String> = weights.iter().map(|(k, _)| k.to_string()).collect();
    let mut inputs: Vec<Tensor<f64>> = weights.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(x);
    let cfg = cfg.clone();
    let f = move |g: &mut Graph<f64>, v: &[Var]| {
        let mut p = BoundParams::new();
        for (n, &var) in names.iter().zip(v) {
            p.insert(n.clone(), var);
        }
        let target = g.constant(y.clone());
        let out = granet_forward(g, v[names.len()], &cfg, &p)?;
        mae_loss(g, out.final_image, target)
    };
    let check = CheckOptions {
        eps: opts.eps,
        max_coords_per_input: Some(opts.coords_per_tensor),
        seed: opts.seed,
        fault: opts.fault,
    };
    let report = check_gradients(f, &inputs, &check)?;
    Ok(UnitResult {
        group: "model",
        name: format!("granet {}x{}", opts.size, opts.size),
        report,
    })
}

/// Runs every unit, calling `on_result` as each finishes.
pub fn run_suite(
    cfg: &GraNetConfig,
    opts: &SuiteOptions,
    mut on_result: impl FnMut(&UnitResult),
) -> Result<Vec<UnitResult>> {
    check_size(opts.size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let check = CheckOptions {
        eps: opts.eps,
        max_coords_per_input: None,
        seed: opts.seed,
        fault: opts.fault,
    };
    let mut out = Vec::new();
    let mut units = primitive_units(&mut rng, opts.seed);
    units.extend(block_units(&mut rng, opts.seed));
    for u in &units {
        let r = run_unit(u, &check)?;
        on_result(&r);
        out.push(r);
    }
    let r = check_model(cfg, opts)?;
    on_result(&r);
    out.push(r);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GraNetConfig {
        GraNetConfig {
            coarse_channels: [3, 4, 6],
            dense_layers: 1,
            dense_growth: 2,
            fine_channels: 4,
            fine_dense_blocks: 1,
            ..GraNetConfig::default()
        }
    }

    #[test]
    fn suite_passes_on_a_small_network() {
        let results = run_suite(&small(), &SuiteOptions::default(), |_| {}).unwrap();
        assert!(results.len() > 20);
        for r in &results {
            assert!(r.passed(), "{} failed: {:?}", r.name, r.report);
        }
    }

    #[test]
    fn every_injected_fault_is_caught() {
        for kind in OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf) {
            let opts = SuiteOptions {
                fault: Some(kind),
                ..SuiteOptions::default()
            };
            let results = run_suite(&small(), &opts, |_| {}).unwrap();
            assert!(results.iter().any(|r| !r.passed()), "fault in {} went unnoticed", kind.name());
        }
    }

    #[test]
    fn undersized_model_check_is_a_usage_error() {
        let opts = SuiteOptions {
            size: 4,
            ..SuiteOptions::default()
        };
        assert!(check_model(&small(), &opts).unwrap_err().is_usage());
    }
}
