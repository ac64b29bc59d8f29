use std::sync::Arc;

use super::graph::{GradSink, Graph, Op, Var};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Axis-aligned spatial rectangle `[y, y + h) x [x, x + w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("operands have shapes {a:?} and {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        if self.tracking_branches() {
            let bits: Vec<u64> = self.value(x).data().iter().map(|&v| (v > T::zero()) as u64).collect();
            self.note_branches(bits.into_iter());
        }
        self.push(out, Op::Relu(x))
    }

    /// Elementwise `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        if self.tracking_branches() {
            let bits: Vec<u64> = self.value(x).data().iter().map(|&v| (v > T::zero()) as u64).collect();
            self.note_branches(bits.into_iter());
        }
        self.push(out, Op::Abs(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let st = T::from_f64(s);
        let out = self.value(x).map(|v| v * st);
        self.push(out, Op::Scale(x, s))
    }

    /// Mean of every element, as a `(1, 1, 1, 1)` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let sum: T = t.data().iter().copied().sum();
        let out = Tensor::scalar(sum / T::from_f64(t.len().max(1) as f64));
        self.push(out, Op::MeanAll(x))
    }

    /// Concatenates along the channel axis; `n`, `h`, `w` must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_channels", "no inputs"));
        };
        let [n, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.shape(p);
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("expected (n, h, w) = ({n}, {h}, {w}), got ({pn}, {ph}, {pw})"),
                ));
            }
            c_total += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c_total * hw);
        for a in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[a * c * hw..(a + 1) * c * hw]);
            }
        }
        let out = Tensor::new([n, c_total, h, w], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels [{start}, {}) exceed c = {c}", start + len),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for a in 0..n {
            data.extend_from_slice(&t.data()[(a * c + start) * hw..(a * c + start + len) * hw]);
        }
        let out = Tensor::new([n, len, h, w], data)?;
        Ok(self.push(out, Op::SliceChannels { input: x, start }))
    }

    /// Softmax over the last axis, for every `(n, c, h)` row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.shape()[3];
        let mut out = t.clone();
        if cols > 0 {
            for row in out.data_mut().chunks_exact_mut(cols) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                row.iter_mut().for_each(|v| *v = *v / sum);
            }
        }
        self.push(out, Op::Softmax(x))
    }

    /// `a (1, 1, m, k) x b (1, 1, k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (1, 1, m, k) x b^T` where `b` is `(1, 1, n, k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let [an, ac, m, k] = self.shape(a);
        let [bn, bc, br, bcols] = self.shape(b);
        if an * ac != 1 || bn * bc != 1 {
            return Err(Error::shape("matmul", "operands must be (1, 1, rows, cols) matrices"));
        }
        let (kb, n) = if transpose_b { (bcols, br) } else { (br, bcols) };
        if kb != k {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: lhs cols = {k}, rhs rows = {kb}"),
            ));
        }
        let mut out = Tensor::zeros([1, 1, m, n]);
        let b_strides = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            b_strides,
            T::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
        Ok(self.push(out, Op::MatMul { a, b, transpose_b }))
    }

    /// Gathers one spatial rectangle of batch item `batch` into a
    /// `(1, 1, rect.h * rect.w, c)` matrix: one row per position (row-major
    /// inside the rectangle), one column per channel.
    pub fn region_matrix(&mut self, x: Var, batch: usize, rect: Rect) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        if batch >= n || rect.y + rect.h > h || rect.x + rect.w > w {
            return Err(Error::shape(
                "region_matrix",
                format!("rect {rect:?} of batch {batch} is outside ({n}, {c}, {h}, {w})"),
            ));
        }
        let p = rect.area();
        let mut data = vec![T::zero(); p * c];
        for ch in 0..c {
            for ry in 0..rect.h {
                for rx in 0..rect.w {
                    data[(ry * rect.w + rx) * c + ch] = t.at([batch, ch, rect.y + ry, rect.x + rx]);
                }
            }
        }
        let out = Tensor::new([1, 1, p, c], data)?;
        Ok(self.push(out, Op::RegionMatrix { input: x, batch, rect }))
    }

    /// Inverse layout of [`Graph::region_matrix`]: writes `parts` (ordered
    /// batch-major, then by rectangle) into an `(n, c, h, w)` map.
    pub fn assemble_regions(&mut self, parts: &[Var], rects: &[Rect], shape: Shape) -> Result<Var> {
        let [n, c, _, _] = shape;
        if parts.len() != n * rects.len() {
            return Err(Error::shape(
                "assemble_regions",
                format!("expected {} parts, got {}", n * rects.len(), parts.len()),
            ));
        }
        let mut out = Tensor::zeros(shape);
        for (i, &p) in parts.iter().enumerate() {
            let rect = rects[i % rects.len()];
            let a = i / rects.len();
            let t = self.value(p);
            if t.shape() != [1, 1, rect.area(), c] {
                return Err(Error::shape(
                    "assemble_regions",
                    format!("part {i} has shape {:?}, rect {rect:?} needs (1, 1, {}, {c})", t.shape(), rect.area()),
                ));
            }
            for ch in 0..c {
                for ry in 0..rect.h {
                    for rx in 0..rect.w {
                        let o = out.offset([a, ch, rect.y + ry, rect.x + rx]);
                        out.data_mut()[o] = t.data()[(ry * rect.w + rx) * c + ch];
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::AssembleRegions {
                parts: parts.to_vec(),
                rects: Arc::new(rects.to_vec()),
            },
        ))
    }

    /// Reflect-pads right and bottom up to `h x w`.
    pub fn reflect_pad(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [_, _, xh, xw] = self.shape(x);
        if h < xh || w < xw || (xh == 0 && h > 0) || (xw == 0 && w > 0) {
            return Err(Error::shape("reflect_pad", format!("cannot pad {xh}x{xw} to {h}x{w}")));
        }
        let out = reflect_pad(self.value(x), h, w);
        Ok(self.push(out, Op::ReflectPad(x)))
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [_, _, xh, xw] = self.shape(x);
        if h > xh || w > xw {
            return Err(Error::shape("crop", format!("cannot crop {xh}x{xw} to {h}x{w}")));
        }
        let out = crop_top_left(self.value(x), h, w);
        Ok(self.push(out, Op::Crop(x)))
    }
}

/// Mirror index without repeating the edge sample (`..., 2, 1, 0, 1, 2, ...`).
#[inline]
fn reflect_index(i: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let t = i % period;
    if t < n {
        t
    } else {
        period - t
    }
}

pub(super) fn reflect_pad<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, xh, xw] = x.shape();
    Tensor::from_fn([n, c, h, w], |[a, b, y, xx]| {
        x.at([a, b, reflect_index(y, xh), reflect_index(xx, xw)])
    })
}

pub(super) fn crop_top_left<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    Tensor::from_fn([n, c, h, w], |idx| x.at(idx))
}

pub(super) fn relu_backward<T: Scalar>(x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let xs = sink.value(x).data();
    sink.with(x, |d| {
        for ((d, &v), &gv) in d.iter_mut().zip(xs).zip(g) {
            if v > T::zero() {
                *d = *d + gv;
            }
        }
    });
}

pub(super) fn abs_backward<T: Scalar>(x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let xs = sink.value(x).data();
    sink.with(x, |d| {
        for ((d, &v), &gv) in d.iter_mut().zip(xs).zip(g) {
            if v > T::zero() {
                *d = *d + gv;
            } else if v < T::zero() {
                *d = *d - gv;
            }
        }
    });
}

pub(super) fn softmax_backward<T: Scalar>(x: Var, y: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let cols = y.shape()[3];
    if cols == 0 {
        return;
    }
    sink.with(x, |d| {
        for ((drow, yrow), grow) in d.chunks_exact_mut(cols).zip(y.data().chunks_exact(cols)).zip(g.chunks_exact(cols))
        {
            let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
            for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                *dv = *dv + yv * (gv - dot);
            }
        }
    });
}

pub(super) fn matmul_backward<T: Scalar>(a: Var, b: Var, transpose_b: bool, g: &[T], sink: &mut GradSink<'_, T>) {
    let [_, _, m, k] = sink.value(a).shape();
    let bt = sink.value(b);
    let at = sink.value(a);
    let n = if transpose_b { bt.shape()[2] } else { bt.shape()[3] };
    // dA (m x k) = G (m x n) * B^T; B^T is (n x k)
    let bt_strides = if transpose_b { (k as isize, 1) } else { (1, n as isize) };
    sink.with(a, |da| {
        T::gemm(m, n, k, T::one(), g, (n as isize, 1), bt.data(), bt_strides, T::one(), da, (k as isize, 1));
    });
    sink.with(b, |db| {
        if transpose_b {
            // dB (n x k) = G^T (n x m) * A (m x k)
            T::gemm(n, m, k, T::one(), g, (1, n as isize), at.data(), (k as isize, 1), T::one(), db, (k as isize, 1));
        } else {
            // dB (k x n) = A^T (k x m) * G (m x n)
            T::gemm(k, m, n, T::one(), at.data(), (1, k as isize), g, (n as isize, 1), T::one(), db, (n as isize, 1));
        }
    });
}

pub(super) fn concat_backward<T: Scalar>(parts: &[Var], out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let [n, c_total, h, w] = out.shape();
    let hw = h * w;
    let mut c0 = 0;
    for &p in parts {
        let c = sink.value(p).shape()[1];
        sink.with(p, |d| {
            for a in 0..n {
                let src = &g[(a * c_total + c0) * hw..(a * c_total + c0 + c) * hw];
                let dst = &mut d[a * c * hw..(a + 1) * c * hw];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        });
        c0 += c;
    }
}

pub(super) fn slice_backward<T: Scalar>(x: Var, start: usize, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let [n, len, h, w] = out.shape();
    let c = sink.value(x).shape()[1];
    let hw = h * w;
    sink.with(x, |d| {
        for a in 0..n {
            let dst = &mut d[(a * c + start) * hw..(a * c + start + len) * hw];
            let src = &g[a * len * hw..(a + 1) * len * hw];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
        }
    });
}

pub(super) fn region_matrix_backward<T: Scalar>(
    x: Var,
    batch: usize,
    rect: Rect,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let [_, c, h, w] = sink.value(x).shape();
    sink.with(x, |d| {
        for ch in 0..c {
            for ry in 0..rect.h {
                for rx in 0..rect.w {
                    let o = ((batch * c + ch) * h + rect.y + ry) * w + rect.x + rx;
                    d[o] = d[o] + g[(ry * rect.w + rx) * c + ch];
                }
            }
        }
    });
}

pub(super) fn assemble_backward<T: Scalar>(
    parts: &[Var],
    rects: &[Rect],
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let [_, c, h, w] = out.shape();
    for (i, &p) in parts.iter().enumerate() {
        let rect = rects[i % rects.len()];
        let a = i / rects.len();
        sink.with(p, |d| {
            for ch in 0..c {
                for ry in 0..rect.h {
                    for rx in 0..rect.w {
                        let o = ((a * c + ch) * h + rect.y + ry) * w + rect.x + rx;
                        let k = (ry * rect.w + rx) * c + ch;
                        d[k] = d[k] + g[o];
                    }
                }
            }
        });
    }
}

pub(super) fn reflect_pad_backward<T: Scalar>(x: Var, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let [n, c, h, w] = out.shape();
    let [_, _, xh, xw] = sink.value(x).shape();
    sink.with(x, |d| {
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    let sy = reflect_index(y, xh);
                    for xx in 0..w {
                        let sx = reflect_index(xx, xw);
                        let o = ((a * c + b) * xh + sy) * xw + sx;
                        d[o] = d[o] + g[((a * c + b) * h + y) * w + xx];
                    }
                }
            }
        }
    });
}

pub(super) fn crop_backward<T: Scalar>(x: Var, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let [n, c, h, w] = out.shape();
    let [_, _, xh, xw] = sink.value(x).shape();
    sink.with(x, |d| {
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    let src = &g[((a * c + b) * h + y) * w..][..w];
                    let dst = &mut d[((a * c + b) * xh + y) * xw..][..w];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
    });
}
