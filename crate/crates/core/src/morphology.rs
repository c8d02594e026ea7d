//! Otsu binarization and Zhang–Suen thinning, used to derive skeleton
//! ground truth from clean glyph images.

use crate::error::{Error, Result};
use crate::image::{quantize_value, ImageTensor};

/// A {0, 1} image; 1 marks a stroke pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Build from arbitrary bytes; any non-zero value becomes foreground.
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                out.data[y * width + x] = f(y, x) as u8;
            }
        }
        out
    }

    /// Foreground where a single-channel value exceeds 0.5.
    pub fn from_image(img: &ImageTensor) -> Self {
        let gray = img.to_gray();
        Self::from_fn(gray.height(), gray.width(), |y, x| gray.get(y, x, 0) > 0.5)
    }

    /// Single-channel image with foreground 1.0 and background 0.0.
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::new(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    /// Zero outside the image bounds.
    #[inline]
    fn at(&self, y: isize, x: isize) -> u8 {
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_subset_of(&self, other: &BinaryImage) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// True if some 2×2 window is entirely foreground.
    pub fn has_solid_2x2(&self) -> bool {
        (1..self.height).any(|y| {
            (1..self.width).any(|x| {
                self.get(y, x) && self.get(y - 1, x) && self.get(y, x - 1) && self.get(y - 1, x - 1)
            })
        })
    }

    /// Number of 8-connected foreground components.
    pub fn count_components(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut stack = Vec::new();
        let mut components = 0;
        for start in 0..self.data.len() {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (y, x) = ((i / self.width) as isize, (i % self.width) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if self.at(ny, nx) == 1 {
                            let j = ny as usize * self.width + nx as usize;
                            if !seen[j] {
                                seen[j] = true;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        components
    }
}

/// Which side of the threshold holds the strokes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    DarkOnLight,
    LightOnDark,
}

fn histogram(gray: &ImageTensor) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in gray.data() {
        hist[quantize_value(v) as usize] += 1;
    }
    hist
}

/// Histogram bin `t` maximizing the between-class variance of the classes
/// `bin <= t` and `bin > t`; the first maximum wins.
fn otsu_bin(hist: &[u64; 256]) -> Result<u8> {
    if hist.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::ConstantImage);
    }
    let total: f64 = hist.iter().map(|&n| n as f64).sum();
    let total_sum: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let mut w0 = 0.0;
    let mut s0 = 0.0;
    let mut best = (0u8, f64::NEG_INFINITY);
    for (t, &n) in hist.iter().enumerate().take(255) {
        w0 += n as f64;
        s0 += t as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = s0 / w0 - (total_sum - s0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best.1 {
            best = (t as u8, between);
        }
    }
    Ok(best.0)
}

/// Otsu threshold of a single-channel (or luminance-converted) image over a
/// 256-bin histogram. The returned value sits halfway between the last bin
/// of the dark class and the first bin of the light class.
pub fn otsu_threshold(img: &ImageTensor) -> Result<f32> {
    let bin = otsu_bin(&histogram(&img.to_gray()))?;
    Ok((bin as f32 + 0.5) / 255.0)
}

/// Foreground mask on the stroke side of the Otsu threshold. Light-on-dark
/// input is handled by binarizing its negative as dark-on-light.
pub fn binarize(img: &ImageTensor, polarity: Polarity) -> Result<BinaryImage> {
    let gray = match polarity {
        Polarity::DarkOnLight => img.to_gray(),
        Polarity::LightOnDark => img.to_gray().map(|v| 1.0 - v),
    };
    let bin = otsu_bin(&histogram(&gray))?;
    Ok(BinaryImage::from_fn(gray.height(), gray.width(), |y, x| {
        quantize_value(gray.get(y, x, 0)) <= bin
    }))
}

/// Zhang–Suen thinning. Pixels outside the image count as background.
///
/// Plain Zhang–Suen can leave solid 2×2 blocks at stroke junctions and
/// diagonal steps, so each thinning pass is followed by a sweep that deletes
/// simple pixels (8-connectivity number 1) from such blocks. Both stages
/// repeat until neither changes the image, which makes the result
/// idempotent.
pub fn skeletonize(bin: &BinaryImage) -> BinaryImage {
    let mut img = bin.clone();
    loop {
        zhang_suen(&mut img);
        if !clear_solid_blocks(&mut img) {
            return img;
        }
    }
}

/// Run both Zhang–Suen sub-passes until a full pass deletes nothing.
pub fn zhang_suen(img: &mut BinaryImage) {
    let mut marked = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            marked.clear();
            for y in 0..img.height {
                for x in 0..img.width {
                    if img.data[y * img.width + x] == 1 && deletable(img, y, x, step) {
                        marked.push(y * img.width + x);
                    }
                }
            }
            for &i in &marked {
                img.data[i] = 0;
            }
            changed |= !marked.is_empty();
        }
        if !changed {
            return;
        }
    }
}

/// Sequentially delete simple pixels that sit in a solid 2×2 block.
/// Returns whether anything was deleted.
fn clear_solid_blocks(img: &mut BinaryImage) -> bool {
    let mut any = false;
    for y in 0..img.height {
        for x in 0..img.width {
            if img.get(y, x) && in_solid_block(img, y, x) && connectivity_number(img, y, x) == 1 {
                img.set(y, x, false);
                any = true;
            }
        }
    }
    any
}

fn in_solid_block(img: &BinaryImage, y: usize, x: usize) -> bool {
    let (y, x) = (y as isize, x as isize);
    [(-1, -1), (-1, 0), (0, -1), (0, 0)].iter().any(|&(oy, ox)| {
        let (y0, x0) = (y + oy, x + ox);
        img.at(y0, x0) & img.at(y0 + 1, x0) & img.at(y0, x0 + 1) & img.at(y0 + 1, x0 + 1) == 1
    })
}

/// Yokoi 8-connectivity number; a foreground pixel with value 1 can be
/// removed without changing the topology.
fn connectivity_number(img: &BinaryImage, y: usize, x: usize) -> u8 {
    let (y, x) = (y as isize, x as isize);
    // complements of x1..x8: E, NE, N, NW, W, SW, S, SE
    let c = [
        1 - img.at(y, x + 1),
        1 - img.at(y - 1, x + 1),
        1 - img.at(y - 1, x),
        1 - img.at(y - 1, x - 1),
        1 - img.at(y, x - 1),
        1 - img.at(y + 1, x - 1),
        1 - img.at(y + 1, x),
        1 - img.at(y + 1, x + 1),
    ];
    [0, 2, 4, 6]
        .iter()
        .map(|&k| c[k] - c[k] * c[(k + 1) % 8] * c[(k + 2) % 8])
        .sum()
}

#[inline]
fn deletable(img: &BinaryImage, y: usize, x: usize, step: usize) -> bool {
    let (y, x) = (y as isize, x as isize);
    // p2..p9, clockwise from north
    let p = [
        img.at(y - 1, x),
        img.at(y - 1, x + 1),
        img.at(y, x + 1),
        img.at(y + 1, x + 1),
        img.at(y + 1, x),
        img.at(y + 1, x - 1),
        img.at(y, x - 1),
        img.at(y - 1, x - 1),
    ];
    let neighbours: u8 = p.iter().sum();
    if !(2..=6).contains(&neighbours) {
        return false;
    }
    let transitions = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
    if transitions != 1 {
        return false;
    }
    let [p2, _, p4, _, p6, _, p8, _] = p;
    if step == 0 {
        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
    } else {
        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> ImageTensor {
        ImageTensor::from_fn(h, w, 1, |y, x, _| f(y, x))
    }

    #[test]
    fn two_level_threshold_separates() {
        let img = gray(4, 4, |y, _| if y < 2 { 0.2 } else { 0.8 });
        let t = otsu_threshold(&img).unwrap();
        assert!(t > 0.2 && t < 0.8, "{t}");
    }

    #[test]
    fn constant_image_has_no_threshold() {
        let img = gray(4, 4, |_, _| 0.5);
        assert!(matches!(otsu_threshold(&img), Err(Error::ConstantImage)));
        assert!(matches!(
            binarize(&img, Polarity::DarkOnLight),
            Err(Error::ConstantImage)
        ));
    }

    fn glyph_page() -> ImageTensor {
        gray(12, 12, |y, x| if (3..9).contains(&y) && (5..7).contains(&x) { 0.0 } else { 1.0 })
    }

    #[test]
    fn dark_glyph_is_foreground() {
        let page = glyph_page();
        let b = binarize(&page, Polarity::DarkOnLight).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(b.get(y, x), page.get(y, x, 0) == 0.0);
            }
        }
    }

    #[test]
    fn inverted_light_on_dark_matches() {
        let page = glyph_page();
        let inv = page.map(|v| 1.0 - v);
        assert_eq!(
            binarize(&page, Polarity::DarkOnLight).unwrap(),
            binarize(&inv, Polarity::LightOnDark).unwrap()
        );
    }

    #[test]
    fn rgb_input_uses_luminance() {
        let page = glyph_page().to_rgb();
        assert_eq!(
            binarize(&page, Polarity::DarkOnLight).unwrap(),
            binarize(&glyph_page(), Polarity::DarkOnLight).unwrap()
        );
    }

    #[test]
    fn empty_and_single_pixel() {
        let empty = BinaryImage::zeros(5, 7);
        assert_eq!(skeletonize(&empty), empty);
        let mut dot = BinaryImage::zeros(5, 5);
        dot.set(2, 2, true);
        assert_eq!(skeletonize(&dot), dot);
    }

    #[test]
    fn components_counted_with_diagonals() {
        let b = BinaryImage::from_raw(3, 3, vec![1, 0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
        assert_eq!(b.count_components(), 1);
        let b = BinaryImage::from_raw(3, 3, vec![1, 0, 1, 0, 0, 0, 1, 0, 1]).unwrap();
        assert_eq!(b.count_components(), 4);
    }
}
