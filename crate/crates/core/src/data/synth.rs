//! Additive rain-streak synthesis and procedural clean scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::{self, Entry};

use super::image::ImageF32;

/// Streak distribution. Ranges are inclusive `(lo, hi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    pub num_streaks: (usize, usize),
    pub length: (f32, f32),
    /// Degrees from vertical.
    pub angle_mean: f32,
    pub angle_std: f32,
    pub width: (f32, f32),
    pub intensity: (f32, f32),
    /// Peak amplitude of the low-frequency haze added to the mask.
    pub mist_strength: f32,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            num_streaks: (15, 30),
            length: (6.0, 16.0),
            angle_mean: 10.0,
            angle_std: 6.0,
            width: (1.0, 1.5),
            intensity: (0.15, 0.45),
            mist_strength: 0.0,
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_streaks.0 > self.num_streaks.1 {
            return bad(format!("rain.num_streaks: {:?} is not lo..hi", self.num_streaks));
        }
        for (name, (lo, hi)) in [("length", self.length), ("width", self.width), ("intensity", self.intensity)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return bad(format!("rain.{name}: {lo}..{hi} is not a valid non-negative range"));
            }
        }
        if self.intensity.1 > 1.0 {
            return bad(format!("rain.intensity must lie in [0, 1], got upper bound {}", self.intensity.1));
        }
        if !(self.angle_std >= 0.0 && self.angle_mean.is_finite()) {
            return bad("rain.angle_std must be non-negative".into());
        }
        if !(self.mist_strength >= 0.0 && self.mist_strength <= 1.0) {
            return bad(format!("rain.mist_strength must lie in [0, 1], got {}", self.mist_strength));
        }
        Ok(())
    }

    /// Applies one `rain.*` key. `name` has the prefix already removed.
    pub fn set(&mut self, name: &str, e: &Entry) -> Result<()> {
        match name {
            "num_streaks" => self.num_streaks = kv::range(e)?,
            "length" => self.length = kv::range(e)?,
            "angle_mean" => self.angle_mean = kv::value(e)?,
            "angle_std" => self.angle_std = kv::value(e)?,
            "width" => self.width = kv::range(e)?,
            "intensity" => self.intensity = kv::range(e)?,
            "mist_strength" => self.mist_strength = kv::value(e)?,
            "seed" => self.seed = kv::value(e)?,
            _ => return Err(kv::unknown(e)),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "rain.num_streaks = {}..{}\nrain.length = {}..{}\nrain.angle_mean = {}\nrain.angle_std = {}\n\
             rain.width = {}..{}\nrain.intensity = {}..{}\nrain.mist_strength = {}\nrain.seed = {}\n",
            self.num_streaks.0,
            self.num_streaks.1,
            self.length.0,
            self.length.1,
            self.angle_mean,
            self.angle_std,
            self.width.0,
            self.width.1,
            self.intensity.0,
            self.intensity.1,
            self.mist_strength,
            self.seed
        )
    }

    /// Parses a file containing only `rain.*` keys.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut p = RainParams::default();
        for e in kv::parse(text)? {
            match e.key.strip_prefix("rain.") {
                Some(name) => p.set(name, &e)?,
                None => return Err(kv::unknown(&e)),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// One drawn segment, in pixel coordinates (x right, y down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Streak {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
    pub width: f32,
    pub intensity: f32,
}

impl Streak {
    /// Distance beyond which the stroke contributes exactly zero.
    pub fn reach(&self) -> f32 {
        self.width / 2.0 + 0.5
    }

    pub fn distance(&self, px: f32, py: f32) -> f32 {
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((px - self.x0) * dx + (py - self.y0) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (self.x0 + t * dx - px, self.y0 + t * dy - py);
        (cx * cx + cy * cy).sqrt()
    }

    /// Anti-aliased coverage of the pixel centred at `(px, py)`.
    pub fn coverage(&self, px: f32, py: f32) -> f32 {
        (self.reach() - self.distance(px, py)).clamp(0.0, 1.0)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi { lo } else { rng.random_range(lo..=hi) }
}

/// Samples streak geometry for an `h x w` image.
pub fn sample_streaks(h: usize, w: usize, params: &RainParams, rng: &mut ChaCha8Rng) -> Vec<Streak> {
    let (lo, hi) = params.num_streaks;
    let n = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let angle = Normal::new(params.angle_mean, params.angle_std.max(0.0)).expect("finite std");
    (0..n)
        .map(|_| {
            let cx = rng.random_range(0.0..w as f32);
            let cy = rng.random_range(0.0..h as f32);
            let len = uniform(rng, params.length);
            let theta = angle.sample(rng).to_radians();
            let width = uniform(rng, params.width);
            let intensity = uniform(rng, params.intensity);
            let (hx, hy) = (0.5 * len * theta.sin(), 0.5 * len * theta.cos());
            Streak { x0: cx - hx, y0: cy - hy, x1: cx + hx, y1: cy + hy, width, intensity }
        })
        .collect()
}

/// Accumulates streaks into a single-channel `h x w` plane.
pub fn render_streaks(h: usize, w: usize, streaks: &[Streak]) -> Vec<f32> {
    let mut plane = vec![0.0f32; h * w];
    for s in streaks {
        let r = s.reach();
        let x_lo = (s.x0.min(s.x1) - r).floor().max(0.0) as usize;
        let y_lo = (s.y0.min(s.y1) - r).floor().max(0.0) as usize;
        let x_hi = ((s.x0.max(s.x1) + r).ceil().max(0.0) as usize).min(w);
        let y_hi = ((s.y0.max(s.y1) + r).ceil().max(0.0) as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let c = s.coverage(x as f32 + 0.5, y as f32 + 0.5);
                if c > 0.0 {
                    plane[y * w + x] += s.intensity * c;
                }
            }
        }
    }
    plane
}

/// Smooth haze: a 4x4 lattice of uniform values, bilinearly upsampled.
fn mist(h: usize, w: usize, strength: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    const G: usize = 4;
    let lattice: Vec<f32> = (0..G * G).map(|_| rng.random::<f32>()).collect();
    let sample = |v: f32, n: usize| {
        let p = if n > 1 { v / (n - 1) as f32 * (G - 1) as f32 } else { 0.0 };
        let i = (p.floor() as usize).min(G - 2);
        (i, p - i as f32)
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (iy, fy) = sample(y as f32, h);
        for x in 0..w {
            let (ix, fx) = sample(x as f32, w);
            let at = |r: usize, c: usize| lattice[r * G + c];
            let top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
            let bot = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
            out[y * w + x] = strength * (top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Adds rain to `clean`. Returns `(rainy, mask)` where the mask is the
/// non-negative, pre-clamp additive layer (equal in all three channels) and
/// `rainy = clamp(clean + mask, 0, 1)`.
pub fn synth_rain(clean: &ImageF32, params: &RainParams) -> (ImageF32, ImageF32) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    synth_rain_with(clean, params, &mut rng).0
}

/// As [`synth_rain`] with an explicit generator; also returns the streaks.
pub fn synth_rain_with(
    clean: &ImageF32,
    params: &RainParams,
    rng: &mut ChaCha8Rng,
) -> ((ImageF32, ImageF32), Vec<Streak>) {
    let (h, w) = (clean.h, clean.w);
    let streaks = sample_streaks(h, w, params, rng);
    let mut layer = render_streaks(h, w, &streaks);
    if params.mist_strength > 0.0 {
        for (v, m) in layer.iter_mut().zip(mist(h, w, params.mist_strength, rng)) {
            *v += m;
        }
    }
    let mut mask = ImageF32::zeros(h, w);
    let mut rainy = ImageF32::zeros(h, w);
    let n = h * w;
    for c in 0..3 {
        for (i, &v) in layer.iter().enumerate() {
            mask.data[c * n + i] = v;
            rainy.data[c * n + i] = (clean.data[c * n + i] + v).clamp(0.0, 1.0);
        }
    }
    ((rainy, mask), streaks)
}

/// Downscales (bilinear, pixel-centre aligned) so the long side equals
/// `max_side`; smaller images are returned unchanged.
pub fn resize_long_side(img: &ImageF32, max_side: usize) -> ImageF32 {
    let long = img.h.max(img.w);
    if long <= max_side || max_side == 0 {
        return img.clone();
    }
    let scale = max_side as f64 / long as f64;
    let side = |n: usize| if n == long { max_side } else { ((n as f64 * scale).round() as usize).max(1) };
    resize_bilinear(img, side(img.h), side(img.w))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &ImageF32, oh: usize, ow: usize) -> ImageF32 {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i = s.floor() as usize;
        (i, (i + 1).min(n_in - 1), (s - i as f64) as f32)
    };
    let ys: Vec<_> = (0..oh).map(|y| coord(y, img.h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| coord(x, img.w, ow)).collect();
    let mut out = ImageF32::zeros(oh, ow);
    for c in 0..3 {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                out.data[(c * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// A deterministic synthetic "clean" scene: a sky-to-ground gradient with
/// a few flat-coloured rectangles and discs and a mild sinusoidal texture.
pub fn procedural_scene(h: usize, w: usize, seed: u64) -> ImageF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ce_7e5c_e7e5);
    let mut color = || [rng.random_range(0.05..0.7f32), rng.random_range(0.05..0.7), rng.random_range(0.05..0.7)];
    let top = color();
    let bottom = color();
    let mut img = ImageF32::zeros(h, w);
    let n = h * w;
    for y in 0..h {
        let t = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
        for x in 0..w {
            for c in 0..3 {
                img.data[c * n + y * w + x] = top[c] * (1.0 - t) + bottom[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let col = [rng.random_range(0.0..0.8f32), rng.random_range(0.0..0.8), rng.random_range(0.0..0.8)];
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let rx = rng.random_range(0.1..0.35) * w as f32;
        let ry = rng.random_range(0.1..0.35) * h as f32;
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f32 + 0.5 - cx) / rx, (y as f32 + 0.5 - cy) / ry);
                let inside = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    for (c, &v) in col.iter().enumerate() {
                        img.data[c * n + y * w + x] = v;
                    }
                }
            }
        }
    }
    let (fx, fy) = (rng.random_range(0.05..0.4f32), rng.random_range(0.05..0.4f32));
    let amp = rng.random_range(0.01..0.05f32);
    for y in 0..h {
        for x in 0..w {
            let t = amp * ((x as f32 * fx).sin() * (y as f32 * fy).cos());
            for c in 0..3 {
                let v = &mut img.data[c * n + y * w + x];
                *v = (*v + t).clamp(0.0, 1.0);
            }
        }
    }
    img
}
