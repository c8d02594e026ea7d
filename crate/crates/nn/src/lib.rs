//! CharFormer: a dual-branch denoiser for character images. A windowed
//! self-attention branch restores the image while a convolutional branch
//! predicts the glyph skeleton, and fused channel/spatial attention couples
//! the two inside every block. Runs on a small tape-based autodiff engine
//! over `f64` NHWC tensors.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod fused;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use net::{CharFormer, ForwardResult};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use loss::{FeatureExtractor, LossBreakdown};
pub use train::{AblationVariant, Trainer};
