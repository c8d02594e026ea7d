//! Non-neural building blocks for character image denoising with glyph
//! supervision: configuration and shape arithmetic, the image carrier type,
//! binarization and Zhang–Suen skeletonization, procedural glyph rendering
//! with Gaussian/speckle/background degradations, PSNR/SSIM, and the PNG and
//! dataset directory conventions shared by the trainer and the CLI.

pub mod config;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod morphology;
pub mod rng;
pub mod synth;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use image::ImageTensor;
pub use morphology::BinaryImage;
