//! Browser demo: render a synthetic glyph, degrade it with one of the noise
//! models, thin it, and sweep PSNR/SSIM over the noise level.
//!
//! Everything here is plain Rust over `charformer-core`; the
//! `#[wasm_bindgen]` exports only marshal RGBA buffers for `<canvas>`.

use charformer_core::metrics::{psnr, ssim};
use charformer_core::morphology::{binarize, skeletonize, Polarity};
use charformer_core::synth::{degrade, render_glyph, GlyphSpec, NoiseKind, NoiseSpec};
use charformer_core::{ImageTensor, Result};
use wasm_bindgen::prelude::*;

/// Straight RGBA8 for `ImageData`, gray images replicated across channels.
pub fn to_rgba(img: &ImageTensor) -> Vec<u8> {
    let rgb = img.to_rgb().quantize();
    rgb.data()
        .chunks_exact(3)
        .flat_map(|p| {
            let [r, g, b] = [p[0], p[1], p[2]].map(|v| (v * 255.0).round() as u8);
            [r, g, b, 255]
        })
        .collect()
}

fn glyph(seed: u64, strokes: usize, width: usize, canvas: usize) -> Result<ImageTensor> {
    render_glyph(&GlyphSpec {
        num_strokes: strokes,
        stroke_width: width,
        canvas,
        seed,
    })
}

fn noise(kind: &str, sigma: f64, seed: u64) -> Result<NoiseSpec> {
    let kind: NoiseKind = kind.parse()?;
    Ok(NoiseSpec {
        kind,
        sigma,
        sigma_range: (10.0, 50.0),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub clean: ImageTensor,
    pub noisy: ImageTensor,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn degrade_glyph(seed: u64, strokes: usize, width: usize, canvas: usize, kind: &str, sigma: f64) -> Result<Degraded> {
    let clean = glyph(seed, strokes, width, canvas)?.quantize();
    let noisy = degrade(&clean, &noise(kind, sigma, seed)?)?.quantize();
    Ok(Degraded {
        psnr: psnr(&noisy, &clean, 1.0)?,
        ssim: ssim(&noisy, &clean)?,
        clean,
        noisy,
    })
}

/// Otsu + Zhang–Suen skeleton of the clean glyph, foreground = 1.
pub fn glyph_skeleton(seed: u64, strokes: usize, width: usize, canvas: usize) -> Result<ImageTensor> {
    let clean = glyph(seed, strokes, width, canvas)?;
    Ok(skeletonize(&binarize(&clean.quantize(), Polarity::DarkOnLight)?).to_image())
}

/// `(sigma, psnr, ssim)` for `steps` noise levels evenly spaced over
/// `[0, max_sigma]`, all on the same glyph and noise seed.
pub fn sweep(seed: u64, strokes: usize, width: usize, canvas: usize, kind: &str, max_sigma: f64, steps: usize) -> Result<Vec<(f64, f64, f64)>> {
    let clean = glyph(seed, strokes, width, canvas)?.quantize();
    let n = steps.max(2);
    (0..n)
        .map(|i| {
            let sigma = max_sigma * i as f64 / (n - 1) as f64;
            let noisy = degrade(&clean, &noise(kind, sigma, seed)?)?.quantize();
            Ok((sigma, psnr(&noisy, &clean, 1.0)?, ssim(&noisy, &clean)?))
        })
        .collect()
}

fn js_err(e: charformer_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct DegradeView {
    clean: Vec<u8>,
    noisy: Vec<u8>,
    psnr: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl DegradeView {
    pub fn clean_rgba(&self) -> Vec<u8> {
        self.clean.clone()
    }

    pub fn noisy_rgba(&self) -> Vec<u8> {
        self.noisy.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

#[wasm_bindgen(js_name = degradeGlyph)]
pub fn degrade_glyph_js(seed: u32, strokes: u32, width: u32, canvas: u32, kind: &str, sigma: f64) -> std::result::Result<DegradeView, JsError> {
    let d = degrade_glyph(seed as u64, strokes as usize, width as usize, canvas as usize, kind, sigma).map_err(js_err)?;
    Ok(DegradeView {
        clean: to_rgba(&d.clean),
        noisy: to_rgba(&d.noisy),
        psnr: d.psnr,
        ssim: d.ssim,
    })
}

/// Skeleton as RGBA, drawn dark on white like the glyph itself.
#[wasm_bindgen(js_name = skeletonRgba)]
pub fn skeleton_rgba(seed: u32, strokes: u32, width: u32, canvas: u32) -> std::result::Result<Vec<u8>, JsError> {
    let s = glyph_skeleton(seed as u64, strokes as usize, width as usize, canvas as usize).map_err(js_err)?;
    Ok(to_rgba(&s.map(|v| 1.0 - v)))
}

/// Flattened `[sigma0, psnr0, ssim0, sigma1, ...]`.
#[wasm_bindgen(js_name = sigmaSweep)]
pub fn sigma_sweep(seed: u32, strokes: u32, width: u32, canvas: u32, kind: &str, max_sigma: f64, steps: u32) -> std::result::Result<Vec<f64>, JsError> {
    let rows = sweep(seed as u64, strokes as usize, width as usize, canvas as usize, kind, max_sigma, steps as usize).map_err(js_err)?;
    Ok(rows.into_iter().flat_map(|(s, p, q)| [s, p, q]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_layout() {
        let img = ImageTensor::from_fn(2, 3, 1, |y, x, _| if (y + x) % 2 == 0 { 1.0 } else { 0.0 });
        let px = to_rgba(&img);
        assert_eq!(px.len(), 2 * 3 * 4);
        assert_eq!(&px[..8], &[255, 255, 255, 255, 0, 0, 0, 255]);
    }

    #[test]
    fn zero_sigma_gaussian_is_lossless() {
        let d = degrade_glyph(3, 4, 3, 64, "gaussian", 0.0).unwrap();
        assert!(d.psnr.is_infinite());
        assert!((d.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_degrades_monotonically_at_the_ends() {
        let rows = sweep(7, 4, 3, 64, "mixed", 50.0, 5).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].0, 0.0);
        assert_eq!(rows[4].0, 50.0);
        assert!(rows[4].1 < rows[1].1);
        assert!(rows[4].2 < rows[1].2);
    }

    #[test]
    fn skeleton_is_thin_subset() {
        let s = glyph_skeleton(5, 4, 3, 64).unwrap();
        let clean = binarize(&glyph(5, 4, 3, 64).unwrap().quantize(), Polarity::DarkOnLight).unwrap();
        let b = charformer_core::BinaryImage::from_image(&s);
        assert!(b.count() > 0);
        assert!(b.is_subset_of(&clean));
    }

    #[test]
    fn unknown_noise_kind_is_an_error() {
        assert!(degrade_glyph(0, 4, 3, 64, "salt", 10.0).is_err());
    }
}
