//! 2x2 / stride-2 max pooling that records argmax positions, and the
//! matching index-guided unpooling.

use std::sync::Arc;

use super::graph::{GradSink, Graph, Op, Var};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Argmax positions recorded by [`Graph::maxpool2d`].
///
/// `offsets` has one entry per pooled element, holding the flat `y * w + x`
/// offset of the maximum inside the source `(n, c)` plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    shape: Shape,
    src_h: usize,
    src_w: usize,
    offsets: Vec<u32>,
}

impl PoolIndices {
    pub fn new(shape: Shape, src_h: usize, src_w: usize, offsets: Vec<u32>) -> Result<Self> {
        if offsets.len() != super::numel(&shape) {
            return Err(Error::shape(
                "PoolIndices::new",
                format!("pooled shape {shape:?} needs {} indices, got {}", super::numel(&shape), offsets.len()),
            ));
        }
        Ok(PoolIndices {
            shape,
            src_h,
            src_w,
            offsets,
        })
    }

    /// Shape of the pooled tensor.
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn source_size(&self) -> (usize, usize) {
        (self.src_h, self.src_w)
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    /// Checks that every offset lies inside its own 2x2 window.
    pub fn validate(&self) -> Result<()> {
        let [_, _, ph, pw] = self.shape;
        if self.src_h != 2 * ph || self.src_w != 2 * pw {
            return Err(Error::shape(
                "PoolIndices",
                format!("source {}x{} is not twice pooled {ph}x{pw}", self.src_h, self.src_w),
            ));
        }
        for (i, &off) in self.offsets.iter().enumerate() {
            let off = off as usize;
            let (row, col) = ((i / pw) % ph, i % pw);
            let (sy, sx) = (off / self.src_w, off % self.src_w);
            if off >= self.src_h * self.src_w || sy / 2 != row || sx / 2 != col {
                return Err(Error::CorruptIndices { offset: off, row, col });
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Graph<T> {
    /// 2x2 max pooling with stride 2. Ties resolve to the first maximum in
    /// row-major window order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<(Var, PoolIndices)> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatial { op: "maxpool2d", h, w });
        }
        let (ph, pw) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ph, pw]);
        let mut offsets = Vec::with_capacity(n * c * ph * pw);
        let src = x.data();
        let pooled = ph * pw;
        for plane_idx in 0..if pooled > 0 { n * c } else { 0 } {
            let dst = &mut out.data_mut()[plane_idx * pooled..(plane_idx + 1) * pooled];
            let plane = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = 2 * py * w + 2 * px;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (2 * py + dy) * w + 2 * px + dx;
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    dst[py * pw + px] = plane[best];
                    offsets.push(best as u32);
                }
            }
        }
        let indices = PoolIndices {
            shape: [n, c, ph, pw],
            src_h: h,
            src_w: w,
            offsets,
        };
        if self.tracking_branches() {
            let bits: Vec<u64> = indices.offsets.iter().map(|&o| o as u64).collect();
            self.note_branches(bits.into_iter());
        }
        let shared = Arc::new(indices.clone());
        let v = self.push(out, Op::MaxPool { input, indices: shared });
        Ok((v, indices))
    }

    /// Scatters `input` to the positions named by `indices` in a zero map of
    /// size `out_h x out_w`.
    pub fn maxunpool2d(&mut self, input: Var, indices: &PoolIndices, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != indices.shape {
            return Err(Error::shape(
                "maxunpool2d",
                format!("input shape {:?} does not match indices shape {:?}", x.shape(), indices.shape),
            ));
        }
        let [n, c, ph, pw] = x.shape();
        if out_h != 2 * ph || out_w != 2 * pw || (out_h, out_w) != (indices.src_h, indices.src_w) {
            return Err(Error::shape(
                "maxunpool2d",
                format!(
                    "output {out_h}x{out_w} must be twice the input {ph}x{pw} and match the pooled source {}x{}",
                    indices.src_h, indices.src_w
                ),
            ));
        }
        indices.validate()?;
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        let plane = out_h * out_w;
        let pooled = ph * pw;
        if pooled > 0 {
            for (p, (vals, offs)) in x
                .data()
                .chunks_exact(pooled)
                .zip(indices.offsets.chunks_exact(pooled))
                .enumerate()
            {
                let dst = &mut out.data_mut()[p * plane..(p + 1) * plane];
                for (&v, &o) in vals.iter().zip(offs) {
                    dst[o as usize] = v;
                }
            }
        }
        Ok(self.push(
            out,
            Op::MaxUnpool {
                input,
                indices: Arc::new(indices.clone()),
            },
        ))
    }
}

pub(super) fn maxpool_backward<T: Scalar>(input: Var, idx: &PoolIndices, g: &[T], sink: &mut GradSink<'_, T>) {
    let plane = idx.src_h * idx.src_w;
    let pooled = idx.shape[2] * idx.shape[3];
    if pooled == 0 {
        return;
    }
    sink.with(input, |dx| {
        for (p, (gs, offs)) in g.chunks_exact(pooled).zip(idx.offsets.chunks_exact(pooled)).enumerate() {
            let dst = &mut dx[p * plane..(p + 1) * plane];
            for (&gv, &o) in gs.iter().zip(offs) {
                dst[o as usize] = dst[o as usize] + gv;
            }
        }
    });
}

pub(super) fn maxunpool_backward<T: Scalar>(input: Var, idx: &PoolIndices, g: &[T], sink: &mut GradSink<'_, T>) {
    let plane = idx.src_h * idx.src_w;
    let pooled = idx.shape[2] * idx.shape[3];
    if pooled == 0 {
        return;
    }
    sink.with(input, |dx| {
        for (p, (dst, offs)) in dx.chunks_exact_mut(pooled).zip(idx.offsets.chunks_exact(pooled)).enumerate() {
            let src = &g[p * plane..(p + 1) * plane];
            for (d, &o) in dst.iter_mut().zip(offs) {
                *d = *d + src[o as usize];
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pool(t: Tensor<f64>) -> (Tensor<f64>, PoolIndices) {
        let mut g = Graph::new();
        let x = g.constant(t);
        let (y, idx) = g.maxpool2d(x).unwrap();
        (g.value(y).clone(), idx)
    }

    #[test]
    fn single_window() {
        let (y, idx) = pool(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.offsets(), &[3]);
    }

    #[test]
    fn ties_pick_first_in_scan_order() {
        let (y, idx) = pool(Tensor::full([1, 1, 2, 2], 7.0));
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(idx.offsets(), &[0]);
        let (_, idx) = pool(Tensor::matrix(2, 2, vec![0.0, 5.0, 5.0, 1.0]).unwrap());
        assert_eq!(idx.offsets(), &[1]);
    }

    #[test]
    fn matches_brute_force_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn([2, 3, 4, 6], |_| rng.random_range(-1.0..1.0));
        let (y, idx) = pool(x.clone());
        for a in 0..2 {
            for c in 0..3 {
                for py in 0..2 {
                    for px in 0..3 {
                        let mut best = (f64::NEG_INFINITY, 0);
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (yy, xx) = (2 * py + dy, 2 * px + dx);
                                let v = x.at([a, c, yy, xx]);
                                if v > best.0 {
                                    best = (v, yy * 6 + xx);
                                }
                            }
                        }
                        let i = y.offset([a, c, py, px]);
                        assert_eq!(y.data()[i], best.0);
                        assert_eq!(idx.offsets()[i] as usize, best.1);
                    }
                }
            }
        }
    }

    #[test]
    fn odd_sizes_are_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 1, 3, 4]));
        let err = g.maxpool2d(x).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn unpool_scatters_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn([1, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (p, idx) = g.maxpool2d(xv).unwrap();
        let u = g.maxunpool2d(p, &idx, 4, 4).unwrap();
        let out = g.value(u);
        for c in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let win = idx.offsets()[(c * 2 + y / 2) * 2 + xx / 2] as usize;
                    let want = if win == y * 4 + xx { x.at([0, c, y, xx]) } else { 0.0 };
                    assert_eq!(out.at([0, c, y, xx]), want);
                }
            }
        }
    }

    #[test]
    fn unpool_of_zero_is_zero() {
        let idx = PoolIndices::new([1, 1, 2, 2], 4, 4, vec![0, 3, 9, 15]).unwrap();
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let u = g.maxunpool2d(z, &idx, 4, 4).unwrap();
        assert!(g.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corrupt_indices_are_rejected() {
        // offset 2 is (0, 2): window (0, 1), not (0, 0)
        let idx = PoolIndices::new([1, 1, 2, 2], 4, 4, vec![2, 3, 9, 15]).unwrap();
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(
            g.maxunpool2d(z, &idx, 4, 4),
            Err(Error::CorruptIndices { offset: 2, row: 0, col: 0 })
        ));
        let idx = PoolIndices::new([1, 1, 2, 2], 4, 4, vec![0, 3, 9, 99]).unwrap();
        assert!(g.maxunpool2d(z, &idx, 4, 4).is_err());
    }

    #[test]
    fn unpool_rejects_wrong_output_size() {
        let idx = PoolIndices::new([1, 1, 2, 2], 4, 4, vec![0, 3, 9, 15]).unwrap();
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.maxunpool2d(z, &idx, 6, 4).is_err());
        let wrong = g.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(g.maxunpool2d(wrong, &idx, 4, 4).is_err());
    }
}
