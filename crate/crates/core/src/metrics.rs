//! Full-reference image quality: PSNR and windowed SSIM.

use crate::error::{invalid, Result};
use crate::tomo::Image;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 300.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Dynamic range of `reference`, the default `data_range` for both metrics.
pub fn data_range_of(reference: &Image) -> f64 {
    let (lo, hi) = reference.min_max();
    hi - lo
}

fn resolve_range(reference: &Image, data_range: Option<f64>) -> Result<f64> {
    let range = data_range.unwrap_or_else(|| data_range_of(reference));
    if !(range > 0.0 && range.is_finite()) {
        return invalid(format!("data range must be positive and finite, got {range}"));
    }
    Ok(range)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio in dB of `a` against `reference`. Capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Image, reference: &Image, data_range: Option<f64>) -> Result<f64> {
    let range = resolve_range(reference, data_range)?;
    let err = mse(a, reference)?;
    if err == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (range * range / err).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" correlation with `kernel` along both axes.
fn filter_valid(data: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &data[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = kernel.iter().zip(&src[c..c + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (i, &kv) in kernel.iter().enumerate() {
            let src = &rows[(r + i) * ow..(r + i + 1) * ow];
            for (o, s) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Mean structural similarity over all positions of an 11x11 Gaussian
/// window (sigma 1.5) lying fully inside the image. Symmetric in `a` and `b`.
pub fn ssim(a: &Image, b: &Image, data_range: Option<f64>) -> Result<f64> {
    a.check_same_shape(b)?;
    let range = resolve_range(b, data_range)?;
    let (h, w) = a.shape();
    let win = 2 * SSIM_RADIUS + 1;
    if h < win || w < win {
        return invalid(format!("SSIM needs images of at least {win}x{win}, got {h}x{w}"));
    }
    let kernel = gaussian_window();
    let filt = |v: Vec<f64>| filter_valid(&v, h, w, &kernel);
    let (x, y) = (a.data(), b.data());
    let mx = filt(x.to_vec());
    let my = filt(y.to_vec());
    let mxx = filt(x.iter().map(|v| v * v).collect());
    let myy = filt(y.iter().map(|v| v * v).collect());
    let mxy = filt(x.iter().zip(y).map(|(p, q)| p * q).collect());
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let vxy = mxy[i] - ux * uy;
        let num = (2.0 * (ux * uy) + c1) * (2.0 * vxy + c2);
        let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(seed: f64, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| {
            let v = ((r as f64) * 12.9898 + (c as f64) * 78.233 + seed).sin() * 43758.5453;
            v - v.floor()
        })
    }

    #[test]
    fn psnr_analytic_values() {
        let a = Image::zeros(10, 10);
        let b = a.map(|_| 0.1);
        assert!((psnr(&b, &a, Some(1.0)).unwrap() - 20.0).abs() < 1e-12);
        let b = a.map(|_| 0.5);
        assert!((psnr(&b, &a, Some(1.0)).unwrap() - 6.020599913279624).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, Some(1.0)).unwrap(), PSNR_CAP);
    }

    #[test]
    fn shape_and_range_errors() {
        let a = Image::zeros(12, 12);
        assert!(psnr(&a, &Image::zeros(12, 13), Some(1.0)).is_err());
        assert!(psnr(&a, &a, None).is_err());
        assert!(ssim(&Image::zeros(10, 12), &Image::zeros(10, 12), Some(1.0)).is_err());
        assert!(ssim(&a, &Image::zeros(11, 12), Some(1.0)).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = pattern(1.0, 20, 17);
        let b = pattern(2.0, 20, 17);
        assert_eq!(ssim(&a, &a, Some(1.0)).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b, Some(1.0)).unwrap(), ssim(&b, &a, Some(1.0)).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let base = pattern(3.0, 32, 32);
        let noise: Vec<f64> = {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let n = Normal::new(0.0, 1.0).unwrap();
            (0..32 * 32).map(|_| n.sample(&mut rng)).collect()
        };
        let values: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&s| {
                let noisy =
                    Image::from_vec(32, 32, base.data().iter().zip(&noise).map(|(v, n)| v + s * n).collect()).unwrap();
                psnr(&noisy, &base, Some(1.0)).unwrap()
            })
            .collect();
        assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    #[test]
    fn ssim_matches_reference_values() {
        // skimage structural_similarity(gaussian_weights, sigma 1.5,
        // use_sample_covariance False, data_range 1) on the same pairs.
        let cases = [
            (16, 16, 0.88014334539667),
            (20, 17, 0.8544360086725783),
            (32, 32, 0.8682732431755641),
            (11, 24, 0.8980849603194395),
            (40, 28, 0.87619091317325),
        ];
        for (i, &(h, w, want)) in cases.iter().enumerate() {
            let a = lcg(100 + i as u64, h * w);
            let n = lcg(200 + i as u64, h * w);
            let b: Vec<f64> = a.iter().zip(&n).map(|(x, y)| 0.7 * x + 0.3 * y).collect();
            let a = Image::from_vec(h, w, a).unwrap();
            let b = Image::from_vec(h, w, b).unwrap();
            let got = ssim(&a, &b, Some(1.0)).unwrap();
            assert!((got - want).abs() < 1e-6, "case {i}: {got} vs {want}");
        }
    }

    #[test]
    fn contrast_inversion_is_negative() {
        let x = crate::phantom::shepp_logan(64, 1);
        let (lo, hi) = x.min_max();
        let inv = x.map(|v| hi + lo - v);
        let s = ssim(&inv, &x, None).unwrap();
        assert!(s < 0.0, "{s}");
    }

    proptest::proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed_a in 0u64..1000, seed_b in 0u64..1000, h in 11usize..24, w in 11usize..24) {
            let a = Image::from_vec(h, w, lcg(seed_a, h * w)).unwrap();
            let b = Image::from_vec(h, w, lcg(seed_b + 5000, h * w)).unwrap();
            let ab = ssim(&a, &b, Some(1.0)).unwrap();
            let ba = ssim(&b, &a, Some(1.0)).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
            proptest::prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
