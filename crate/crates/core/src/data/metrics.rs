//! Image quality metrics on the BT.601 luma channel, 8-bit scale.

use crate::error::{Error, Result};

use super::image::ImageF32;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const PEAK: f64 = 255.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Single-channel plane of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("Plane::new", format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Plane { h, w, data })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// `255 * (0.299 R + 0.587 G + 0.114 B)`. Linear, so signed inputs (masks)
/// are fine.
pub fn rgb_to_luminance(img: &ImageF32) -> Plane {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..img.h * img.w)
        .map(|i| PEAK * (LUMA[0] * r[i] as f64 + LUMA[1] * g[i] as f64 + LUMA[2] * b[i] as f64))
        .collect();
    Plane { h: img.h, w: img.w, data }
}

fn same_shape(op: &'static str, a: &Plane, b: &Plane) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB. Identical planes give `f64::INFINITY`.
pub fn psnr(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.data.is_empty() {
        return Err(Error::shape("psnr", "empty plane"));
    }
    let sse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = sse / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(h - k + 1) x (w - k + 1)`.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every fully contained 11x11 Gaussian
/// window (sigma 1.5, K1 0.01, K2 0.03, L 255).
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.h, a.w),
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (h, w) = (a.h, a.w);
    let sq = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<_>>();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&a.data, h, w, &taps);
    let mu_b = filter_valid(&b.data, h, w, &taps);
    let e_aa = filter_valid(&sq(&a.data), h, w, &taps);
    let e_bb = filter_valid(&sq(&b.data), h, w, &taps);
    let e_ab = filter_valid(&ab, h, w, &taps);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (maa, mbb, mab) = (ma * ma, mb * mb, ma * mb);
        let va = e_aa[i] - maa;
        let vb = e_bb[i] - mbb;
        let cov = e_ab[i] - mab;
        total += ((2.0 * mab + c1) * (2.0 * cov + c2)) / ((maa + mbb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Mean of the finite values and how many infinite ones were left out.
pub fn finite_mean(values: &[f64]) -> (Option<f64>, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let skipped = values.len() - finite.len();
    if finite.is_empty() {
        (None, skipped)
    } else {
        (Some(finite.iter().sum::<f64>() / finite.len() as f64), skipped)
    }
}

/// Five-number summary (min, quartiles, max) with linear interpolation.
pub fn quartiles(values: &[f64]) -> Option<[f64; 5]> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct windowed-statistics SSIM: explicit 2-D Gaussian weights, means,
    /// variances and covariance computed per window from scratch.
    pub(crate) fn ssim_oracle(a: &Plane, b: &Plane) -> f64 {
        let k = 11;
        let sigma: f64 = 1.5;
        let mut wts = vec![0.0; k * k];
        for y in 0..k {
            for x in 0..k {
                let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
                wts[y * k + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            }
        }
        let s: f64 = wts.iter().sum();
        wts.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=a.h - k {
            for x0 in 0..=a.w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        ma += wts[y * k + x] * a.at(y0 + y, x0 + x);
                        mb += wts[y * k + x] * b.at(y0 + y, x0 + x);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let da = a.at(y0 + y, x0 + x) - ma;
                        let db = b.at(y0 + y, x0 + x) - mb;
                        va += wts[y * k + x] * da * da;
                        vb += wts[y * k + x] * db * db;
                        cov += wts[y * k + x] * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    pub(crate) fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
        Plane::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn luminance_fixtures() {
        let white = ImageF32::new(1, 1, vec![1.0; 3]).unwrap();
        assert!((rgb_to_luminance(&white).data[0] - 255.0).abs() < 1e-12);
        let red = ImageF32::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((rgb_to_luminance(&red).data[0] - 76.245).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px: Vec<f32> = (0..3).map(|_| rng.random()).collect();
        let img = ImageF32::new(1, 1, px.clone()).unwrap();
        let hand = 255.0 * (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64);
        assert!((rgb_to_luminance(&img).data[0] - hand).abs() < 1e-12);
        assert!((LUMA.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn psnr_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_plane(&mut rng, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Plane::new(8, 8, a.data.iter().map(|v| v + 1.0).collect()).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        let c = random_plane(&mut rng, 8, 8);
        let mse = a.data.iter().zip(&c.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0;
        assert!((psnr(&a, &c).unwrap() - 10.0 * (65025.0 / mse).log10()).abs() < 1e-9);
        assert!(psnr(&a, &random_plane(&mut rng, 8, 9)).is_err());
    }

    #[test]
    fn uniform_rgb_offset_gives_48_131_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = ImageF32::new(16, 16, (0..768).map(|_| rng.random_range(0u8..255) as f32 / 255.0).collect()).unwrap();
        let pred = ImageF32::new(16, 16, gt.data.iter().map(|v| v + 1.0 / 255.0).collect()).unwrap();
        let p = psnr(&rgb_to_luminance(&pred), &rgb_to_luminance(&gt)).unwrap();
        assert!((p - 48.131).abs() < 1e-3, "{p}");
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_plane(&mut rng, 16, 16);
        let noise: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = [1.0, 4.0, 16.0]
            .iter()
            .map(|amp| {
                let b = Plane::new(16, 16, a.data.iter().zip(&noise).map(|(v, n)| v + amp * n).collect()).unwrap();
                psnr(&a, &b).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = random_plane(&mut rng, 32, 32);
            let b = Plane::new(32, 32, a.data.iter().map(|v| v + rng.random_range(-40.0..40.0)).collect()).unwrap();
            let got = ssim(&a, &b).unwrap();
            let want = ssim_oracle(&a, &b);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_self_is_exactly_one_and_inverse_is_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_plane(&mut rng, 20, 23);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let checker = Plane::new(16, 16, (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 55.0 } else { 200.0 }).collect()).unwrap();
        let inv = Plane::new(16, 16, checker.data.iter().map(|v| 255.0 - v).collect()).unwrap();
        assert!(ssim(&checker, &inv).unwrap() <= 0.0);
    }

    #[test]
    fn ssim_rejects_small_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_plane(&mut rng, 10, 40);
        assert!(ssim(&a, &a).unwrap_err().to_string().contains("window"));
    }

    #[test]
    fn finite_mean_skips_infinity() {
        assert_eq!(finite_mean(&[1.0, f64::INFINITY, 3.0]), (Some(2.0), 1));
        assert_eq!(finite_mean(&[f64::INFINITY]), (None, 1));
        assert_eq!(quartiles(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap(), [1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000, h in 11usize..20, w in 11usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_plane(&mut rng, h, w);
            let b = random_plane(&mut rng, h, w);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        }

        #[test]
        fn gray_maps_to_itself(v in 0.0f32..=1.0) {
            let img = ImageF32::new(1, 1, vec![v; 3]).unwrap();
            prop_assert!((rgb_to_luminance(&img).data[0] - 255.0 * v as f64).abs() < 1e-9);
        }
    }
}
