//! `ImageTensor`: an H×W×C image with values in [0, 1], stored row-major
//! with interleaved channels.

use crate::error::{Error, Result};

/// Luminance weights used for every RGB → gray conversion in the crate.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("filled image has consistent shape")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("from_fn has consistent shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    /// Single-channel luminance view; a 1-channel image is returned as is.
    pub fn to_gray(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect();
        ImageTensor::new(self.height, self.width, 1, data).unwrap()
    }

    /// Replicate a gray image to three channels.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageTensor::new(self.height, self.width, 3, data).unwrap()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&self) -> ImageTensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Round to the 8-bit grid (ties to even), as happens at the PNG boundary.
    pub fn quantize(&self) -> ImageTensor {
        self.map(|v| quantize_value(v) as f32 / 255.0)
    }

    pub fn is_valid_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {height}x{width}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(ImageTensor::from_fn(height, width, self.channels, |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        }))
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        ImageTensor::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Concatenate images of equal height side by side.
    pub fn hstack(images: &[&ImageTensor]) -> Result<ImageTensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("hstack of zero images".into()))?;
        let channels = images.iter().map(|i| i.channels).max().unwrap();
        let height = first.height;
        if images.iter().any(|i| i.height != height) {
            return Err(Error::ShapeMismatch("hstack needs equal heights".into()));
        }
        let expanded: Vec<ImageTensor> = images
            .iter()
            .map(|i| if channels == 3 { i.to_rgb() } else { (*i).clone() })
            .collect();
        let width: usize = expanded.iter().map(|i| i.width).sum();
        let mut out = ImageTensor::filled(height, width, channels, 0.0);
        let mut x0 = 0;
        for img in &expanded {
            for y in 0..height {
                for x in 0..img.width {
                    for c in 0..channels {
                        out.set(y, x0 + x, c, img.get(y, x, c));
                    }
                }
            }
            x0 += img.width;
        }
        Ok(out)
    }
}

/// `round_ties_even(clamp(v, 0, 1) · 255)` as an 8-bit code.
pub fn quantize_value(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round_ties_even() as u8
}
