//! Stride-1 "same" convolution with 1x1 or 3x3 kernels, lowered to GEMM.

use super::graph::{GradSink, Graph, Op, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Graph<T> {
    /// `input (n, c_in, h, w)`, `weight (c_out, c_in, k, k)` with `k` in {1, 3},
    /// optional `bias` with `c_out` elements. Zero padding keeps `h x w`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let [_, c_in, _, _] = x.shape();
        let [c_out, w_in, kh, kw] = w.shape();
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape("conv2d", format!("kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        if w_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but weight expects c_in = {w_in}"),
            ));
        }
        let b = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.len() != c_out {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias has {} elements but c_out = {c_out}", bt.len()),
                    ));
                }
                Some(bt)
            }
            None => None,
        };
        let out = conv2d_forward(x, w, b);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
        ))
    }
}

/// Unrolls 3x3 zero-padded patches of one `(c, h, w)` image into a
/// `(c * 9) x (h * w)` matrix.
fn im2col3<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Transposed patch matrix: row `y * w + x` holds the `c * k * k` inputs seen
/// by output pixel `(y, x)`, in weight order. `k` is 1 or 3.
fn im2row<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, rows: &mut [T]) {
    let hw = h * w;
    let kdim = c * k * k;
    if k == 1 {
        for (p, row) in rows.chunks_exact_mut(kdim).enumerate() {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = img[ch * hw + p];
            }
        }
        return;
    }
    for y in 0..h {
        let out = &mut rows[y * w * kdim..(y + 1) * w * kdim];
        for ch in 0..c {
            let plane = &img[ch * hw..(ch + 1) * hw];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                let base = ch * 9 + ky * 3;
                if sy < 0 || sy >= h as isize {
                    for row in out.chunks_exact_mut(kdim) {
                        row[base..base + 3].fill(T::zero());
                    }
                    continue;
                }
                let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                for (x, row) in out.chunks_exact_mut(kdim).enumerate() {
                    let taps = &mut row[base..base + 3];
                    taps[0] = if x > 0 { src[x - 1] } else { T::zero() };
                    taps[1] = src[x];
                    taps[2] = if x + 1 < w { src[x + 1] } else { T::zero() };
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates columns back into the image.
fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d = *d + s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d = *d + s),
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, _, k, _] = w.shape();
    let hw = h * wd;
    let kdim = c_in * k * k;
    let mut out = Tensor::zeros([n, c_out, h, wd]);
    if hw == 0 {
        return out;
    }
    let mut cols = if k == 3 { vec![T::zero(); kdim * hw] } else { Vec::new() };
    for a in 0..n {
        let img = &x.data()[a * c_in * hw..(a + 1) * c_in * hw];
        let rhs: &[T] = if k == 3 {
            im2col3(img, c_in, h, wd, &mut cols);
            &cols
        } else {
            img
        };
        let dst = &mut out.data_mut()[a * c_out * hw..(a + 1) * c_out * hw];
        T::gemm(
            c_out,
            kdim,
            hw,
            T::one(),
            w.data(),
            (kdim as isize, 1),
            rhs,
            (hw as isize, 1),
            T::zero(),
            dst,
            (hw as isize, 1),
        );
        if let Some(b) = b {
            for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

pub(super) fn conv2d_backward<T: Scalar>(
    input: Var,
    weight: Var,
    bias: Option<Var>,
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let x = sink.value(input);
    let w = sink.value(weight);
    let [n, c_in, h, wd] = x.shape();
    let [c_out, _, k, _] = w.shape();
    let hw = h * wd;
    let kdim = c_in * k * k;
    if hw == 0 {
        return;
    }

    if sink.wants(weight) {
        let mut rows = vec![T::zero(); kdim * hw];
        sink.with(weight, |dw| {
            for a in 0..n {
                let img = &x.data()[a * c_in * hw..(a + 1) * c_in * hw];
                im2row(img, c_in, h, wd, k, &mut rows);
                let ga = &gout[a * c_out * hw..(a + 1) * c_out * hw];
                // dW += gout (c_out x hw) * rows (hw x kdim)
                T::gemm(
                    c_out,
                    hw,
                    kdim,
                    T::one(),
                    ga,
                    (hw as isize, 1),
                    &rows,
                    (kdim as isize, 1),
                    T::one(),
                    dw,
                    (kdim as isize, 1),
                );
            }
        });
    }

    if let Some(b) = bias {
        sink.with(b, |db| {
            for a in 0..n {
                let ga = &gout[a * c_out * hw..(a + 1) * c_out * hw];
                for (co, plane) in ga.chunks_exact(hw).enumerate() {
                    db[co] = db[co] + plane.iter().copied().sum::<T>();
                }
            }
        });
    }

    if sink.wants(input) {
        let mut dcols = if k == 3 { vec![T::zero(); kdim * hw] } else { Vec::new() };
        sink.with(input, |dx| {
            for a in 0..n {
                let ga = &gout[a * c_out * hw..(a + 1) * c_out * hw];
                let dimg = &mut dx[a * c_in * hw..(a + 1) * c_in * hw];
                // dcols = W^T (kdim x c_out) * gout (c_out x hw)
                if k == 3 {
                    T::gemm(
                        kdim,
                        c_out,
                        hw,
                        T::one(),
                        w.data(),
                        (1, kdim as isize),
                        ga,
                        (hw as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (hw as isize, 1),
                    );
                    col2im3(&dcols, c_in, h, wd, dimg);
                } else {
                    T::gemm(
                        kdim,
                        c_out,
                        hw,
                        T::one(),
                        w.data(),
                        (1, kdim as isize),
                        ga,
                        (hw as isize, 1),
                        T::one(),
                        dimg,
                        (hw as isize, 1),
                    );
                }
            }
        });
    }
}
