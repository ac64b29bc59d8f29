use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named gradients, one flat buffer per parameter.
pub type Gradients = BTreeMap<String, Vec<f32>>;

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { lr, beta1, beta2, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter in `params`. Each parameter is updated
    /// on its own, so the iteration order does not matter.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<f32>)>, grads: &Gradients) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        for (name, w) in &params {
            match grads.get(*name) {
                None => return Err(Error::MissingGradient(name.to_string())),
                Some(g) if g.len() != w.len() => {
                    return Err(Error::shape("adam", format!("`{name}`: {} gradients for {} values", g.len(), w.len())))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (name, w) in params {
            let g = &grads[name];
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *wi = (*wi as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(name: &str, v: f32) -> (String, Tensor<f32>) {
        (name.to_string(), Tensor::scalar(v))
    }

    fn run(state: &mut AdamState, params: &mut [(String, Tensor<f32>)], grads: &Gradients) -> Result<()> {
        state.step(params.iter_mut().map(|(n, t)| (n.as_str(), t)), grads)
    }

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut s = AdamState::new(1e-3, 0.9, 0.999, 1e-8);
        let mut p = vec![scalar("a", 0.7), scalar("b", -2.0)];
        let grads: Gradients = [("a".into(), vec![0.0]), ("b".into(), vec![0.0])].into();
        run(&mut s, &mut p, &grads).unwrap();
        assert_eq!(p[0].1.data(), [0.7]);
        assert_eq!(p[1].1.data(), [-2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![scalar("w", 1.0)];
        run(&mut s, &mut p, &[("w".into(), vec![1.0])].into()).unwrap();
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].1.data()[0] as f64 - want).abs() < 1e-7);
    }

    /// Independent scripted Adam in plain f64.
    fn oracle(w0: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = vec![];
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn quadratic_descent_matches_oracle() {
        let mut s = AdamState::new(0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![scalar("w", 5.0)];
        let want = oracle(5.0, 100, 0.1);
        for want in &want {
            let g = 2.0 * p[0].1.data()[0];
            run(&mut s, &mut p, &[("w".into(), vec![g])].into()).unwrap();
            assert!((p[0].1.data()[0] as f64 - want).abs() < 1e-4);
        }
        assert!(p[0].1.data()[0].abs() < 0.5);
        assert_eq!(s.step, 100);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = AdamState::new(0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![scalar("a", 1.0), scalar("lonely", 1.0)];
        let err = run(&mut s, &mut p, &[("a".into(), vec![1.0])].into()).unwrap_err();
        assert!(err.to_string().contains("lonely"));
        assert_eq!(s.step, 0);
        assert_eq!(p[0].1.data(), [1.0]);
    }

    #[test]
    fn update_is_independent_of_parameter_order() {
        let grads: Gradients = [("a".into(), vec![0.3, -1.0]), ("b".into(), vec![2.0])].into();
        let make = || vec![("a".to_string(), Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap()), scalar("b", 3.0)];
        let (mut s1, mut s2) = (AdamState::new(0.01, 0.9, 0.999, 1e-8), AdamState::new(0.01, 0.9, 0.999, 1e-8));
        let (mut p1, mut p2) = (make(), make());
        p2.reverse();
        for _ in 0..3 {
            run(&mut s1, &mut p1, &grads).unwrap();
            run(&mut s2, &mut p2, &grads).unwrap();
        }
        p2.reverse();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }
}
