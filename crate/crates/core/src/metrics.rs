//! Pixel-fidelity metrics: L1, MSE, PSNR and SSIM.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean absolute difference over all pixel-channels.
pub fn l1(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / n)
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10·log10(peak² / MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Valid-mode separable filtering of a `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, a)| a * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows (σ = 1.5) with
/// dynamic range 1. RGB inputs are compared on luminance.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let pa: Vec<f64> = a.to_gray().data().iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = b.to_gray().data().iter().map(|&v| v as f64).collect();
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a * b).collect() };

    let mu_a = filter_valid(&pa, h, w, &k);
    let mu_b = filter_valid(&pb, h, w, &k);
    let e_aa = filter_valid(&prod(&pa, &pa), h, w, &k);
    let e_bb = filter_valid(&prod(&pb, &pb), h, w, &k);
    let e_ab = filter_valid(&prod(&pa, &pb), h, w, &k);

    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let z = ImageTensor::filled(2, 2, 1, 0.0);
        let o = ImageTensor::filled(2, 2, 1, 1.0);
        assert_eq!(l1(&z, &z).unwrap(), 0.0);
        assert_eq!(l1(&z, &o).unwrap(), 1.0);
        let mut off = z.clone();
        off.set(1, 0, 0, 0.4);
        assert!((l1(&z, &off).unwrap() - 0.1).abs() < 1e-7);
    }

    #[test]
    fn psnr_examples() {
        let z = ImageTensor::filled(2, 2, 1, 0.0);
        let o = ImageTensor::filled(2, 2, 1, 1.0);
        assert_eq!(psnr(&z, &z, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&z, &o, 1.0).unwrap(), 0.0);
        let mut off = z.clone();
        off.set(0, 1, 0, 1.0);
        assert!((psnr(&z, &off, 1.0).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = ImageTensor::filled(2, 2, 1, 0.0);
        let b = ImageTensor::filled(2, 3, 1, 0.0);
        assert!(l1(&a, &b).is_err());
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn ssim_needs_eleven_pixels() {
        let a = ImageTensor::filled(10, 32, 1, 0.0);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = ImageTensor::from_fn(16, 20, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }
}
