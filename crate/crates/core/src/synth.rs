//! Procedural glyph rendering, the Gaussian/speckle/background degradation
//! models, and paired dataset generation.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::{self, DatasetManifest, ManifestEntry, Split};
use crate::morphology::{binarize, skeletonize, Polarity};
use crate::rng;

/// Blank border every stroke stays inside.
pub const GLYPH_MARGIN: usize = 4;
/// Centerline length bounds of a single stroke, in pixels.
pub const STROKE_LENGTH: (f64, f64) = (24.0, 72.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub num_strokes: usize,
    pub stroke_width: usize,
    pub canvas: usize,
    pub seed: u64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self {
            num_strokes: 4,
            stroke_width: 3,
            canvas: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Speckle,
    /// Speckle, then Gaussian, both at `sigma`.
    #[default]
    Mixed,
    /// Smooth multiplicative luminance field; `sigma` is unused.
    Background,
    /// `Mixed` with `sigma ~ Uniform(sigma_range)` drawn per image.
    BlindMixed,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian" => NoiseKind::Gaussian,
            "speckle" => NoiseKind::Speckle,
            "mixed" => NoiseKind::Mixed,
            "background" => NoiseKind::Background,
            "blind_mixed" | "blind-mixed" => NoiseKind::BlindMixed,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown noise kind {other:?} (gaussian, speckle, mixed, background, blind_mixed)"
                )))
            }
        })
    }
}

/// Noise parameters; `sigma` is a standard deviation on the 0–255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub sigma_range: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Mixed,
            sigma: 25.0,
            sigma_range: (10.0, 50.0),
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sigma_range;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma {} < 0", self.sigma)));
        }
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma range ({lo}, {hi}) must satisfy 0 <= lo <= hi"
            )));
        }
        Ok(())
    }
}

/// One training record: `I_D`, `I_GT`, `I_GT_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub noisy: ImageTensor,
    pub clean: ImageTensor,
    pub skeleton: ImageTensor,
    pub id: String,
    pub seed: u64,
}

type Point = (f64, f64);

fn polyline_length(points: &[Point]) -> f64 {
    points
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum()
}

fn random_stroke(rng: &mut impl Rng, start: Point) -> Vec<Point> {
    if rng.random_bool(0.35) {
        // circular arc through `start`
        let radius = rng.random_range(8.0..20.0);
        let theta0 = rng.random_range(0.0..2.0 * PI);
        let sweep_len = rng.random_range(STROKE_LENGTH.0..STROKE_LENGTH.1);
        let sweep = sweep_len / radius * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let center = (start.0 - radius * theta0.cos(), start.1 - radius * theta0.sin());
        let steps = (sweep_len.ceil() as usize).max(2);
        (0..=steps)
            .map(|i| {
                let a = theta0 + sweep * i as f64 / steps as f64;
                (center.0 + radius * a.cos(), center.1 + radius * a.sin())
            })
            .collect()
    } else {
        let segments = rng.random_range(1..=3);
        let mut pts = vec![start];
        let mut angle = rng.random_range(0.0..2.0 * PI);
        for _ in 0..segments {
            let len = rng.random_range(STROKE_LENGTH.0..STROKE_LENGTH.1) / segments as f64;
            let last = *pts.last().unwrap();
            pts.push((last.0 + len * angle.cos(), last.1 + len * angle.sin()));
            angle += rng.random_range(-2.0..2.0);
        }
        pts
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Render dark, connected strokes on a light page. Stroke cores are
/// `<= 0.15`, the page is `>= 0.9`, and edges are anti-aliased over one
/// pixel. The output is a 3-channel image with equal channels.
pub fn render_glyph(spec: &GlyphSpec) -> Result<ImageTensor> {
    if !(2..=8).contains(&spec.num_strokes) {
        return Err(Error::InvalidArgument(format!(
            "num_strokes {} outside [2, 8]",
            spec.num_strokes
        )));
    }
    if !(2..=6).contains(&spec.stroke_width) {
        return Err(Error::InvalidArgument(format!(
            "stroke_width {} outside [2, 6]",
            spec.stroke_width
        )));
    }
    let half = spec.stroke_width as f64 / 2.0;
    // anti-aliasing reaches half a pixel past the nominal edge
    let inset = GLYPH_MARGIN as f64 + half + 1.0;
    let canvas = spec.canvas as f64;
    if canvas - 2.0 * inset < 16.0 {
        return Err(Error::CanvasTooSmall {
            canvas: spec.canvas,
            margin: GLYPH_MARGIN,
        });
    }
    let (lo, hi) = (inset, canvas - 1.0 - inset);
    let inside = |p: &Point| p.0 >= lo && p.0 <= hi && p.1 >= lo && p.1 <= hi;

    let mut rng = rng::stream(spec.seed, "glyph");
    let page: f64 = rng.random_range(0.9..1.0);
    let ink: f64 = rng.random_range(0.0..0.15);

    let mut strokes: Vec<Vec<Point>> = Vec::with_capacity(spec.num_strokes);
    for s in 0..spec.num_strokes {
        let mut accepted = None;
        for _ in 0..200 {
            let start = if s == 0 {
                (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
            } else {
                let host = &strokes[rng.random_range(0..strokes.len())];
                host[rng.random_range(0..host.len())]
            };
            let pts = random_stroke(&mut rng, start);
            let len = polyline_length(&pts);
            if pts.iter().all(inside) && (STROKE_LENGTH.0 * 0.999..=STROKE_LENGTH.1).contains(&len)
            {
                accepted = Some(pts);
                break;
            }
        }
        let pts = accepted.unwrap_or_else(|| {
            // horizontal bar from an existing stroke towards the centre
            let mid = (lo + hi) / 2.0;
            let start = strokes.first().map_or((mid, mid), |first| first[0]);
            let end = if start.0 < mid {
                (hi.min(start.0 + STROKE_LENGTH.0), start.1)
            } else {
                (lo.max(start.0 - STROKE_LENGTH.0), start.1)
            };
            vec![start, end]
        });
        strokes.push(pts);
    }

    let segments: Vec<(Point, Point)> = strokes
        .iter()
        .flat_map(|pts| pts.windows(2).map(|w| (w[0], w[1])))
        .collect();
    let n = spec.canvas;
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let p = (x as f64, y as f64);
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let coverage = (half + 0.5 - d).clamp(0.0, 1.0);
            let v = (page + (ink - page) * coverage) as f32;
            data.extend_from_slice(&[v, v, v]);
        }
    }
    ImageTensor::new(n, n, 3, data)
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma / 255.0).expect("sigma validated non-negative")
}

/// `clip(img + n, 0, 1)` with `n ~ N(0, (sigma/255)^2)` per pixel-channel.
pub fn add_gaussian(img: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = rng::stream(seed, "gaussian");
    let dist = normal(sigma);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + dist.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    out
}

/// `clip(img · (1 + m), 0, 1)` with `m ~ N(0, (sigma/255)^2)`.
pub fn add_speckle(img: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = rng::stream(seed, "speckle");
    let dist = normal(sigma);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 * (1.0 + dist.sample(&mut rng))).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Smooth field `1 - a·G(x, y)` where `G` is a max-normalized sum of 2–4
/// random Gaussian blobs and `a ∈ [0.2, 0.5]`.
pub fn background_field(height: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, "background");
    let strength = rng.random_range(0.2..=0.5);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=4))
        .map(|_| {
            let side = height.min(width) as f64;
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(side / 8.0..side / 2.0),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let mut g: Vec<f64> = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            blobs
                .iter()
                .map(|&(cy, cx, s, amp)| {
                    amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum()
        })
        .collect();
    let peak = g.iter().cloned().fold(0.0, f64::max);
    for v in &mut g {
        *v = 1.0 - strength * *v / peak.max(f64::MIN_POSITIVE);
    }
    g
}

/// Noise level actually applied by `degrade` (the per-image draw for
/// `blind_mixed`).
pub fn effective_sigma(spec: &NoiseSpec) -> f64 {
    match spec.kind {
        NoiseKind::BlindMixed => {
            let (lo, hi) = spec.sigma_range;
            if lo == hi {
                lo
            } else {
                rng::stream(spec.seed, "blind_sigma").random_range(lo..hi)
            }
        }
        NoiseKind::Background => 0.0,
        _ => spec.sigma,
    }
}

pub fn degrade(img: &ImageTensor, spec: &NoiseSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let sigma = effective_sigma(spec);
    Ok(match spec.kind {
        NoiseKind::Gaussian => add_gaussian(img, sigma, spec.seed),
        NoiseKind::Speckle => add_speckle(img, sigma, spec.seed),
        NoiseKind::Mixed | NoiseKind::BlindMixed => {
            add_gaussian(&add_speckle(img, sigma, spec.seed), sigma, spec.seed)
        }
        NoiseKind::Background => {
            let field = background_field(img.height(), img.width(), spec.seed);
            let c = img.channels();
            let mut out = img.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = (*v as f64 * field[i / c]).clamp(0.0, 1.0) as f32;
            }
            out
        }
    })
}

/// Skeleton ground truth of a clean glyph, computed on its 8-bit form so
/// that it can be reproduced from the stored PNG.
pub fn skeleton_target(clean: &ImageTensor) -> Result<ImageTensor> {
    let mask = binarize(&clean.quantize(), Polarity::DarkOnLight)?;
    Ok(skeletonize(&mask).to_image())
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Per-sample seed: `hash(master_seed, id)`.
pub fn sample_seed(master_seed: u64, id: &str) -> u64 {
    rng::derive_seed(master_seed, id)
}

/// Generate sample `index` of a dataset; a pure function of its arguments.
pub fn generate_pair(
    glyph: &GlyphSpec,
    noise: &NoiseSpec,
    master_seed: u64,
    index: usize,
) -> Result<SamplePair> {
    let id = sample_id(index);
    let seed = sample_seed(master_seed, &id);
    let clean = render_glyph(&GlyphSpec {
        seed,
        ..glyph.clone()
    })?;
    let noisy = degrade(&clean, &NoiseSpec {
        seed,
        ..noise.clone()
    })?;
    let skeleton = skeleton_target(&clean)?;
    Ok(SamplePair {
        noisy,
        clean,
        skeleton,
        id,
        seed,
    })
}

/// Write `clean/`, `noisy/`, `skeleton/` PNG triplets plus `manifest.json`.
/// The last `holdout` samples form the test split.
pub fn make_dataset(
    n: usize,
    glyph: &GlyphSpec,
    noise: &NoiseSpec,
    master_seed: u64,
    holdout: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    noise.validate()?;
    for sub in [io::CLEAN_DIR, io::NOISY_DIR, io::SKELETON_DIR] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let pair = generate_pair(glyph, noise, master_seed, index)?;
        let file = format!("{}.png", pair.id);
        io::save_image(&pair.clean, &out_dir.join(io::CLEAN_DIR).join(&file))?;
        io::save_image(&pair.noisy, &out_dir.join(io::NOISY_DIR).join(&file))?;
        io::save_image(&pair.skeleton, &out_dir.join(io::SKELETON_DIR).join(&file))?;
        entries.push(ManifestEntry {
            id: pair.id,
            seed: pair.seed,
            sigma: effective_sigma(&NoiseSpec {
                seed: pair.seed,
                ..noise.clone()
            }),
            split: if index + holdout >= n {
                Split::Test
            } else {
                Split::Train
            },
        });
    }
    let manifest = DatasetManifest {
        master_seed,
        glyph: glyph.clone(),
        noise: noise.clone(),
        noise_order: "speckle_then_gaussian".to_string(),
        clean_dir: io::CLEAN_DIR.to_string(),
        noisy_dir: io::NOISY_DIR.to_string(),
        skeleton_dir: io::SKELETON_DIR.to_string(),
        samples: entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
