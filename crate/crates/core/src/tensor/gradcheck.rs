//! Central finite-difference verification of reverse-mode gradients.
//!
//! Checks run in `f64`. A coordinate whose `+eps` or `-eps` evaluation takes a
//! different ReLU/abs/max branch than the unperturbed point straddles a kink;
//! such coordinates are skipped and, when sampling, replaced by fresh ones.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, OpKind, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input (randomly sampled);
    /// `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Corrupt one backward rule; the check must then fail.
    pub fault: Option<OpKind>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-4,
            max_coords_per_input: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    /// Max over checked coordinates of
    /// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.track_branches();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g
        .value(out)
        .item()
        .ok_or(Error::NonScalarLoss(g.shape(out)))?;
    Ok((value, g.branch_signature().unwrap_or(0)))
}

/// Compares analytic gradients of the scalar function `f` with respect to
/// every tensor in `inputs` against central differences.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.inject_backward_fault(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let (first, sig0) = evaluate(&f, inputs)?;
    let (second, _) = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let len = input.len();
        let (candidates, quota): (Vec<usize>, usize) = match opts.max_coords_per_input {
            None => ((0..len).collect(), len),
            Some(k) => {
                let pool = len.min(k.saturating_mul(8).max(k));
                (sample(&mut rng, len, pool).into_vec(), k.min(len))
            }
        };
        let mut done = 0;
        for coord in candidates {
            if done == quota {
                break;
            }
            let orig = input.data()[coord];
            work[i].data_mut()[coord] = orig + opts.eps;
            let (plus, sig_plus) = evaluate(&f, &work)?;
            work[i].data_mut()[coord] = orig - opts.eps;
            let (minus, sig_minus) = evaluate(&f, &work)?;
            work[i].data_mut()[coord] = orig;
            if sig_plus != sig0 || sig_minus != sig0 {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[i][coord], numeric);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, coord));
            }
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper returning the max relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = CheckOptions {
        eps,
        ..CheckOptions::default()
    };
    let report = check_gradients(|g, v| f(g, v[0]), std::slice::from_ref(x), &opts)?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        let mut k = 0.0;
        Tensor::from_fn(shape, |_| {
            k += 1.0;
            (k * 0.731f64).sin()
        })
    }

    #[test]
    fn linear_function_is_exact() {
        let err = finite_difference_check(|g, x| Ok(g.mean_all(x)), &ramp([1, 2, 3, 3]), 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn quadratic_mean() {
        // mean(x^2) through matmul of the flattened vector with itself.
        let x = ramp([1, 1, 1, 6]);
        let err = finite_difference_check(
            |g, v| {
                let sq = g.matmul_nt(v, v)?;
                Ok(g.scale(sq, 1.0 / 6.0))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_determinism_is_detected() {
        let calls = Cell::new(0u32);
        let res = finite_difference_check(
            |g, x| {
                calls.set(calls.get() + 1);
                let s = g.scale(x, 1.0 + calls.get() as f64 * 1e-3);
                Ok(g.mean_all(s))
            },
            &ramp([1, 1, 2, 2]),
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn kinks_are_skipped() {
        // x = 0 exactly sits on the ReLU kink
        let x = Tensor::matrix(1, 3, vec![0.0, 1.0, -1.0]).unwrap();
        let opts = CheckOptions::default();
        let rep = check_gradients(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.mean_all(r))
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert_eq!(rep.skipped_kinks, 1);
        assert_eq!(rep.checked, 2);
        assert!(rep.max_rel_error < 1e-8);
    }

    #[test]
    fn injected_fault_is_caught() {
        let x = ramp([1, 1, 2, 4]);
        let opts = CheckOptions {
            fault: Some(OpKind::Relu),
            ..CheckOptions::default()
        };
        let rep = check_gradients(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.mean_all(r))
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert!(rep.max_rel_error > 0.1);
    }
}
