//! PNG codec, reflective padding, and the paired dataset directory layout
//! (`clean/`, `noisy/`, `skeleton/` with identical file names).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::{quantize_value, ImageTensor};
use crate::synth::{GlyphSpec, NoiseSpec, SamplePair};

pub const CLEAN_DIR: &str = "clean";
pub const NOISY_DIR: &str = "noisy";
pub const SKELETON_DIR: &str = "skeleton";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Read an 8-bit grayscale or RGB PNG; values become `v / 255`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let unsupported = |reason: String| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| unsupported(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(unsupported(format!("bit depth {depth:?}, expected 8")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(unsupported(format!("color type {other:?}, expected gray or RGB"))),
    };
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| unsupported("image too large".into()))?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| unsupported(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        data.extend(row[..w * channels].iter().map(|&b| b as f32 / 255.0));
    }
    ImageTensor::new(h, w, channels, data)
}

/// Write an 8-bit PNG (gray or RGB), rounding half to even.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        img.width() as u32,
        img.height() as u32,
    );
    encoder.set_color(if img.channels() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_value(v)).collect();
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Original size of a padded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`… 2 1 | 0 1 2 … n-1 | n-2 n-3 …`).
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pad bottom and right edges up to the next multiple of
/// `M · 2^(T/2)`.
pub fn pad_to_valid(img: &ImageTensor, config: &ModelConfig) -> (ImageTensor, CropRecord) {
    pad_to_multiple(img, config.size_multiple())
}

pub fn pad_to_multiple(img: &ImageTensor, multiple: usize) -> (ImageTensor, CropRecord) {
    let (h, w, c) = img.dims();
    let record = CropRecord {
        height: h,
        width: w,
    };
    let multiple = multiple.max(1);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return (img.clone(), record);
    }
    let padded = ImageTensor::from_fn(ph, pw, c, |y, x, k| {
        img.get(reflect_index(y, h), reflect_index(x, w), k)
    });
    (padded, record)
}

pub fn unpad(img: &ImageTensor, record: CropRecord) -> Result<ImageTensor> {
    img.crop(0, 0, record.height, record.width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Noise level actually applied to this sample.
    pub sigma: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub glyph: GlyphSpec,
    pub noise: NoiseSpec,
    pub noise_order: String,
    pub clean_dir: String,
    pub noisy_dir: String,
    pub skeleton_dir: String,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    /// Every id present in all three directories, splits disjoint.
    pub fn check(&self, dir: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("id {} listed twice", s.id)));
            }
            for sub in [&self.clean_dir, &self.noisy_dir, &self.skeleton_dir] {
                let p = dir.join(sub).join(format!("{}.png", s.id));
                if !p.is_file() {
                    return Err(Error::Dataset(format!("missing {}", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// PNG file stems in a directory, sorted.
pub fn list_png_ids(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// A loaded paired dataset with its split assignment.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub manifest: Option<DatasetManifest>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &SamplePair> {
        self.train.iter().chain(self.test.iter())
    }
}

/// Load `clean/`, `noisy/`, `skeleton/` triplets. With a manifest the splits
/// come from it; without one every pair is a training pair and the three
/// directories must hold the same file names.
pub fn load_dataset(dir: &Path) -> Result<PairedDataset> {
    let manifest = if dir.join(MANIFEST_FILE).is_file() {
        let m = DatasetManifest::load(dir)?;
        m.check(dir)?;
        Some(m)
    } else {
        None
    };
    let entries: Vec<(String, u64, Split)> = match &manifest {
        Some(m) => m.samples.iter().map(|s| (s.id.clone(), s.seed, s.split)).collect(),
        None => {
            let clean = list_png_ids(&dir.join(CLEAN_DIR))?;
            let noisy = list_png_ids(&dir.join(NOISY_DIR))?;
            let skel = list_png_ids(&dir.join(SKELETON_DIR))?;
            if clean != noisy || clean != skel {
                let odd: Vec<&String> = clean
                    .iter()
                    .chain(&noisy)
                    .chain(&skel)
                    .filter(|id| {
                        !(clean.contains(id) && noisy.contains(id) && skel.contains(id))
                    })
                    .collect();
                return Err(Error::Dataset(format!(
                    "{}: clean/noisy/skeleton differ for ids {odd:?}",
                    dir.display()
                )));
            }
            clean.into_iter().map(|id| (id, 0, Split::Train)).collect()
        }
    };
    let (cd, nd, sd) = match &manifest {
        Some(m) => (m.clean_dir.clone(), m.noisy_dir.clone(), m.skeleton_dir.clone()),
        None => (CLEAN_DIR.into(), NOISY_DIR.into(), SKELETON_DIR.into()),
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, seed, split) in entries {
        let file = format!("{id}.png");
        let clean = load_image(&dir.join(&cd).join(&file))?.to_rgb();
        let noisy = load_image(&dir.join(&nd).join(&file))?.to_rgb();
        let skeleton = load_image(&dir.join(&sd).join(&file))?.to_gray();
        if !clean.same_shape(&noisy) || clean.height() != skeleton.height() || clean.width() != skeleton.width() {
            return Err(Error::Dataset(format!("{id}: image sizes differ")));
        }
        let pair = SamplePair {
            noisy,
            clean,
            skeleton,
            id,
            seed,
        };
        match split {
            Split::Train => train.push(pair),
            Split::Test => test.push(pair),
        }
    }
    Ok(PairedDataset {
        root: dir.to_path_buf(),
        train,
        test,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (0..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pad_arithmetic() {
        let config = ModelConfig {
            window_size: 8,
            num_cfb: 4,
            ..ModelConfig::default()
        };
        let img = ImageTensor::filled(60, 70, 3, 0.5);
        let (p, rec) = pad_to_valid(&img, &config);
        assert_eq!((p.height(), p.width()), (64, 96));
        assert_eq!(unpad(&p, rec).unwrap(), img);

        let ok = ImageTensor::filled(64, 32, 1, 0.5);
        let (p, rec) = pad_to_valid(&ok, &config);
        assert_eq!(p, ok);
        assert_eq!(rec, CropRecord { height: 64, width: 32 });
    }
}
