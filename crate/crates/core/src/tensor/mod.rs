//! Dense 4-D tensors with a recorded-graph reverse-mode autodiff engine.
//!
//! Tensors are laid out row-major as `(batch, channel, height, width)`.
//! Every differentiable computation goes through a [`Graph`], which records
//! one node per produced tensor and replays the records in reverse on
//! [`Graph::backward`].

mod conv;
pub mod gradcheck;
mod graph;
mod ops;
mod pool;
mod scalar;

pub use graph::{Graph, OpKind, Var};
pub use ops::Rect;
pub use pool::PoolIndices;
pub use scalar::Scalar;

use crate::error::{Error, Result};

/// `(n, c, h, w)`.
pub type Shape = [usize; 4];

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// A dense `(n, c, h, w)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); numel(&shape)],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(&shape));
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// A `1 x 1 x rows x cols` tensor used as a matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new([1, 1, rows, cols], data)
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, [a, b, y, x]: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((a * c + b) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    /// The single element of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| Scalar::to_f64(*a).to_bits() == Scalar::to_f64(*b).to_bits())
    }

    /// Reflect-pads right and bottom so both spatial sizes are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> (Self, CropRecord) {
        let [_, _, h, w] = self.shape;
        let record = CropRecord::for_multiple(h, w, m);
        (ops::reflect_pad(self, record.padded_h, record.padded_w), record)
    }

    /// Inverse of [`Tensor::pad_to_multiple`].
    pub fn crop(&self, record: &CropRecord) -> Self {
        ops::crop_top_left(self, record.h, record.w)
    }
}

/// Original spatial size of a padded tensor, used to undo the padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub h: usize,
    pub w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl CropRecord {
    pub fn for_multiple(h: usize, w: usize, m: usize) -> Self {
        let m = m.max(1);
        CropRecord {
            h,
            w,
            padded_h: h.div_ceil(m) * m,
            padded_w: w.div_ceil(m) * m,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.h == self.padded_h && self.w == self.padded_w
    }
}
