use std::path::Path;

use image::{ColorType, ExtendedColorType, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB8 {
    pub h: usize,
    pub w: usize,
    /// `h * w * 3` bytes, row-major, RGB interleaved.
    pub data: Vec<u8>,
}

/// Planar float RGB image, nominally in `[0, 1]` (masks may be signed).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF32 {
    pub h: usize,
    pub w: usize,
    /// Three planes of `h * w` values: R, then G, then B.
    pub data: Vec<f32>,
}

/// Float to byte: clamp to `[0, 1]`, scale, round half away from zero.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

impl ImageRGB8 {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::shape("ImageRGB8::new", format!("{} bytes for {h}x{w}x3", data.len())));
        }
        Ok(ImageRGB8 { h, w, data })
    }

    pub fn to_f32(&self) -> ImageF32 {
        let n = self.h * self.w;
        let mut data = vec![0.0f32; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        ImageF32 { h: self.h, w: self.w, data }
    }
}

impl ImageF32 {
    pub fn zeros(h: usize, w: usize) -> Self {
        ImageF32 { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::shape("ImageF32::new", format!("{} values for 3x{h}x{w}", data.len())));
        }
        Ok(ImageF32 { h, w, data })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn clamped(&self) -> ImageF32 {
        ImageF32 {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Clamps and rounds to 8 bits.
    pub fn to_rgb8(&self) -> ImageRGB8 {
        let n = self.h * self.w;
        let mut data = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[3 * i + c] = quantize(self.data[c * n + i]);
            }
        }
        ImageRGB8 { h: self.h, w: self.w, data }
    }

    /// Mirrors the image left to right.
    pub fn flip_horizontal(&self) -> ImageF32 {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.w) {
            row.reverse();
        }
        out
    }

    /// A `(1, 3, h, w)` tensor sharing the planar layout.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([1, 3, self.h, self.w], self.data.clone()).expect("planar layout matches")
    }

    /// Image `n` of an `(N, 3, h, w)` tensor.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Self> {
        let [b, c, h, w] = t.shape();
        if c != 3 || n >= b {
            return Err(Error::shape("ImageF32::from_tensor", format!("cannot take image {n} of {:?}", t.shape())));
        }
        let len = 3 * h * w;
        Ok(ImageF32 { h, w, data: t.data()[n * len..(n + 1) * len].to_vec() })
    }

    /// Maps the value range `[lo, hi]` affinely onto `[0, 1]`, used to view
    /// signed masks. A constant image maps to mid-gray.
    pub fn normalized(&self) -> ImageF32 {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let data = if span > 0.0 && span.is_finite() {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.5; self.data.len()]
        };
        ImageF32 { h: self.h, w: self.w, data }
    }
}

/// Reads a PNG as 8-bit RGB. Grayscale is expanded to three equal channels and
/// an alpha channel is dropped. Anything with more than 8 bits per sample is
/// rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB8> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Image { path: path.to_path_buf(), reason };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(bad("not a PNG image".into()));
    }
    let img = reader.decode().map_err(|e| bad(format!("decode failed: {e}")))?;
    let rgb = match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => img.to_rgb8(),
        other => return Err(bad(format!("unsupported pixel format {other:?}; only 8-bit images are accepted"))),
    };
    let (w, h) = rgb.dimensions();
    ImageRGB8::new(h as usize, w as usize, rgb.into_raw())
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(path: impl AsRef<Path>, img: &ImageRGB8) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer_with_format(
        path,
        &img.data,
        img.w as u32,
        img.h as u32,
        ExtendedColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::Image { path: path.to_path_buf(), reason: format!("encode failed: {e}") })
}

/// Width and height from the file header without decoding pixels.
pub fn image_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok((h as usize, w as usize))
}
