//! Run configuration (`model`, `train`, `data` sections) and the shape
//! arithmetic of the U-shaped feature extractor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::NoiseKind;

/// How the RSAB and GSNB outputs of one block are joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionScheme {
    /// `a = FA(r + g)`, `rec = a + r`, `gly = a + g`.
    #[default]
    ConA,
    /// `rec = FA(r + g) + r`, `gly = g`.
    ConB,
    /// `a = FA(g)`, `rec = a + r`, `gly = a + g`.
    ConC,
    /// `rec = FA(r + g)`, `gly = g`.
    ConD,
    /// No fused attention: `rec = r + g`, `gly = g`.
    NoFa,
}

/// Token mixer inside each RSAB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RsabMixer {
    #[default]
    Transformer,
    /// 3×3 convolution + LeakyReLU in place of every transformer layer.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width `C` of the shallow features.
    pub base_channels: usize,
    /// Number of CharFormer blocks `T` (even).
    pub num_cfb: usize,
    /// Transformer layers per RSAB (`K`).
    pub rsab_transformer_layers: usize,
    /// Attention window side `M` in pixels.
    pub window_size: usize,
    pub num_heads: usize,
    pub gsnb_depth: usize,
    /// Channel-attention reduction ratio `r`.
    pub ca_reduction: usize,
    /// Weight `φ` of the skeleton losses.
    pub glyph_loss_weight: f64,
    pub input_channels: usize,
    pub skeleton_channels: usize,
    pub connection: ConnectionScheme,
    pub rsab_mixer: RsabMixer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_cfb: 4,
            rsab_transformer_layers: 3,
            window_size: 8,
            num_heads: 2,
            gsnb_depth: 2,
            ca_reduction: 8,
            glyph_loss_weight: 1.0,
            input_channels: 3,
            skeleton_channels: 1,
            connection: ConnectionScheme::ConA,
            rsab_mixer: RsabMixer::Transformer,
        }
    }
}

/// Smallest hidden width of the channel-attention MLP.
pub const MIN_CA_HIDDEN: usize = 4;

impl ModelConfig {
    /// Side length every input dimension must be a multiple of: `M · 2^(T/2)`.
    pub fn size_multiple(&self) -> usize {
        self.window_size << (self.num_cfb / 2)
    }

    /// Hidden width of the channel-attention MLP at `channels`.
    pub fn ca_hidden(&self, channels: usize) -> usize {
        (channels / self.ca_reduction.max(1)).max(MIN_CA_HIDDEN.min(channels))
    }

    /// Violations of constraints that do not depend on the input size.
    pub fn structural_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("base_channels", self.base_channels),
            ("num_cfb", self.num_cfb),
            ("rsab_transformer_layers", self.rsab_transformer_layers),
            ("window_size", self.window_size),
            ("num_heads", self.num_heads),
            ("gsnb_depth", self.gsnb_depth),
            ("ca_reduction", self.ca_reduction),
        ];
        for (name, value) in positive {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if !self.num_cfb.is_multiple_of(2) {
            v.push(format!("num_cfb T={} must be even", self.num_cfb));
        }
        if self.num_heads > 0 && !self.base_channels.is_multiple_of(self.num_heads) {
            v.push(format!(
                "base_channels C={} is not divisible by num_heads={}",
                self.base_channels, self.num_heads
            ));
        }
        if !(self.glyph_loss_weight.is_finite() && self.glyph_loss_weight >= 0.0) {
            v.push(format!(
                "glyph_loss_weight {} must be a finite non-negative number",
                self.glyph_loss_weight
            ));
        }
        if self.input_channels != 3 {
            v.push(format!("input_channels must be 3, got {}", self.input_channels));
        }
        if self.skeleton_channels != 1 {
            v.push(format!(
                "skeleton_channels must be 1, got {}",
                self.skeleton_channels
            ));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualMode {
    /// Load VGG16 weights from `perceptual_weights`.
    Pretrained,
    /// Same architecture with frozen seeded random weights.
    #[default]
    FixedRandom,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerName,
    pub perceptual_mode: PerceptualMode,
    pub perceptual_weights: Option<String>,
    /// Divides every VGG16 stage width; 1 is the stock network.
    pub perceptual_width_divisor: usize,
    /// Evaluate every this many iterations; `None` means `max(50, iterations / 20)`.
    pub eval_every: Option<usize>,
    /// Cap on held-out images scored per evaluation.
    pub eval_limit: Option<usize>,
    /// Sample triplets written per evaluation.
    pub sample_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            min_learning_rate: 1e-6,
            iterations: 1000,
            batch_size: 4,
            crop_size: 64,
            seed: 0,
            optimizer: OptimizerName::Adam,
            perceptual_mode: PerceptualMode::FixedRandom,
            perceptual_weights: None,
            perceptual_width_divisor: 1,
            eval_every: None,
            eval_limit: None,
            sample_images: 2,
        }
    }
}

impl TrainConfig {
    pub fn eval_interval(&self) -> usize {
        self.eval_every
            .unwrap_or_else(|| (self.iterations / 20).max(50))
            .max(1)
    }

    pub fn violations(&self, model: &ModelConfig) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            v.push("learning_rate must be finite and non-negative".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".to_string());
        }
        if self.perceptual_width_divisor == 0 {
            v.push("perceptual_width_divisor must be positive".to_string());
        }
        let multiple = model.size_multiple();
        if multiple > 0 && (self.crop_size == 0 || !self.crop_size.is_multiple_of(multiple)) {
            v.push(format!(
                "crop_size {} is not a positive multiple of M*2^(T/2) = {multiple}",
                self.crop_size
            ));
        }
        if self.perceptual_mode == PerceptualMode::Pretrained && self.perceptual_weights.is_none()
        {
            v.push("perceptual_mode=pretrained needs perceptual_weights".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub canvas: usize,
    pub count: usize,
    /// Trailing samples assigned to the held-out split.
    pub holdout: usize,
    pub noise: NoiseKind,
    pub sigma: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub num_strokes: usize,
    pub stroke_width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            count: 64,
            holdout: 8,
            noise: NoiseKind::Mixed,
            sigma: 25.0,
            sigma_lo: 10.0,
            sigma_hi: 50.0,
            num_strokes: 4,
            stroke_width: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable 64-bit digest of the canonical JSON form, as hex.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::rng::derive_seed(0, &text))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.structural_violations();
        v.extend(self.train.violations(&self.model));
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Config(self.violations.join("; ")))
        }
    }
}

/// Check a model configuration against an input size.
pub fn validate(config: &ModelConfig, input_shape: (usize, usize)) -> ValidationReport {
    let mut violations = config.structural_violations();
    let multiple = config.size_multiple();
    if multiple > 0 {
        for (name, side) in [("height", input_shape.0), ("width", input_shape.1)] {
            if side == 0 || side % multiple != 0 {
                violations.push(format!(
                    "{name} {side} is not divisible by M*2^(T/2) = {multiple}"
                ));
            }
        }
    }
    ValidationReport { violations }
}

/// Feature shape `(h, w, c)` produced by block `index` (0 is the shallow
/// feature map). The decoder mirrors the encoder.
pub fn scale_at(
    config: &ModelConfig,
    input_shape: (usize, usize),
    index: usize,
) -> Result<(usize, usize, usize)> {
    let t = config.num_cfb;
    if index > t {
        return Err(Error::InvalidArgument(format!(
            "block index {index} outside 0..={t}"
        )));
    }
    let level = if index <= t / 2 { index } else { t - index };
    Ok((
        input_shape.0 >> level,
        input_shape.1 >> level,
        config.base_channels << level,
    ))
}
