//! Pixel and perceptual losses and the total training objective.

use std::path::Path;

use charformer_core::config::{PerceptualMode, TrainConfig};
use charformer_core::{metrics, rng, ImageTensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::net::ForwardResult;
use crate::params::he_normal;
use crate::tensor::Tensor;

/// Per-channel normalization applied before the feature extractor.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Seed of the frozen random extractor; fixed so that losses are comparable
/// across runs with different training seeds.
pub const FIXED_RANDOM_SEED: u64 = 0x5647_4731_3600;

/// Truncated VGG-16 trunk: `(cout, pool_before, stage_after)` per 3×3 conv,
/// where `stage_after` marks relu2_2 and relu3_3.
const VGG16_TRUNK: [(usize, bool, bool); 7] = [
    (64, false, false),
    (64, false, false),
    (128, true, false),
    (128, false, true),
    (256, true, false),
    (256, false, false),
    (256, false, true),
];

/// Index of each trunk conv inside torchvision's `vgg16().features`.
const TORCHVISION_INDEX: [usize; 7] = [0, 2, 5, 7, 10, 12, 14];

#[derive(Debug, Clone)]
struct VggConv {
    /// `[3, 3, cin, cout]`
    weight: Tensor,
    bias: Tensor,
    pool_before: bool,
    stage_after: bool,
}

/// Frozen feature extractor behind the perceptual loss.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    mode: PerceptualMode,
    convs: Vec<VggConv>,
}

impl FeatureExtractor {
    /// Seeded random weights; `width_divisor` shrinks every layer.
    pub fn fixed_random(width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Shape("perceptual width divisor must be positive".into()));
        }
        let mut rng = rng::stream(FIXED_RANDOM_SEED, "vgg16");
        let mut cin = 3;
        let convs = VGG16_TRUNK
            .iter()
            .map(|&(cout, pool_before, stage_after)| {
                let cout = (cout / width_divisor).max(1);
                let weight = he_normal(&mut rng, &[3, 3, cin, cout], 9 * cin);
                cin = cout;
                VggConv {
                    weight,
                    bias: Tensor::zeros(&[cout]),
                    pool_before,
                    stage_after,
                }
            })
            .collect();
        Ok(Self {
            mode: PerceptualMode::FixedRandom,
            convs,
        })
    }

    /// Load ImageNet weights from a safetensors file using torchvision's
    /// `features.{i}.weight` / `features.{i}.bias` names and
    /// `[cout, cin, kh, kw]` layout (f32 or f64).
    pub fn pretrained(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| charformer_core::Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e))?;
        let mut cin = 3;
        let mut convs = Vec::with_capacity(VGG16_TRUNK.len());
        for (&(cout, pool_before, stage_after), idx) in VGG16_TRUNK.iter().zip(TORCHVISION_INDEX) {
            let w = read_f64(&st, &format!("features.{idx}.weight"), &[cout, cin, 3, 3], path)?;
            let b = read_f64(&st, &format!("features.{idx}.bias"), &[cout], path)?;
            let mut weight = vec![0.0; w.len()];
            for o in 0..cout {
                for i in 0..cin {
                    for k in 0..9 {
                        weight[(k * cin + i) * cout + o] = w[(o * cin + i) * 9 + k];
                    }
                }
            }
            convs.push(VggConv {
                weight: Tensor::new(&[3, 3, cin, cout], weight)?,
                bias: Tensor::new(&[cout], b)?,
                pool_before,
                stage_after,
            });
            cin = cout;
        }
        Ok(Self {
            mode: PerceptualMode::Pretrained,
            convs,
        })
    }

    pub fn off() -> Self {
        Self {
            mode: PerceptualMode::Off,
            convs: Vec::new(),
        }
    }

    pub fn from_config(train: &TrainConfig) -> Result<Self> {
        match train.perceptual_mode {
            PerceptualMode::Off => Ok(Self::off()),
            PerceptualMode::FixedRandom => Self::fixed_random(train.perceptual_width_divisor),
            PerceptualMode::Pretrained => {
                let path = train.perceptual_weights.as_deref().ok_or_else(|| {
                    charformer_core::Error::Config("perceptual_mode=pretrained needs perceptual_weights".into())
                })?;
                Self::pretrained(Path::new(path))
            }
        }
    }

    pub fn mode(&self) -> PerceptualMode {
        self.mode
    }

    /// Stage activations (relu2_2, relu3_3) of an NHWC batch with 1 or 3
    /// channels in `[0, 1]`.
    pub fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let x = match g.shape(x)[3] {
            1 => g.concat_last(&[x, x, x]),
            3 => x,
            c => panic!("feature extractor takes 1 or 3 channels, got {c}"),
        };
        let mean = g.constant(Tensor::from_parts(vec![1, 1, 1, 3], IMAGENET_MEAN.map(|m| -m).to_vec()));
        let inv_std = g.constant(Tensor::from_parts(vec![1, 1, 1, 3], IMAGENET_STD.map(|s| 1.0 / s).to_vec()));
        let x = g.add_bcast(x, mean);
        let mut x = g.mul_bcast(x, inv_std);
        let mut stages = Vec::new();
        for conv in &self.convs {
            if conv.pool_before {
                x = g.max_pool2(x);
            }
            let w = g.constant(conv.weight.clone());
            let b = g.constant(conv.bias.clone());
            let y = g.conv2d(x, w, Some(b), 1, 1);
            x = g.relu(y);
            if conv.stage_after {
                stages.push(x);
            }
        }
        stages
    }

    /// `Σ_stages mean|φ(a) − φ(b)|` as a graph scalar; zero when off.
    pub fn perceptual(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        assert_eq!(g.shape(a), g.shape(b), "perceptual: shape mismatch");
        if self.mode == PerceptualMode::Off {
            return g.constant(Tensor::scalar(0.0));
        }
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.l1_mean(x, y);
            total = Some(match total {
                Some(t) => g.add(t, d),
                None => d,
            });
        }
        total.expect("extractor has stages")
    }
}

fn read_f64(st: &safetensors::SafeTensors, name: &str, shape: &[usize], path: &Path) -> Result<Vec<f64>> {
    let t = st
        .tensor(name)
        .map_err(|e| Error::checkpoint(path, format!("{name}: {e}")))?;
    if t.shape() != shape {
        return Err(Error::checkpoint(
            path,
            format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
        ));
    }
    let bytes = t.data();
    match t.dtype() {
        safetensors::Dtype::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()),
        safetensors::Dtype::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()),
        d => Err(Error::checkpoint(path, format!("{name} has unsupported dtype {d:?}"))),
    }
}

/// The four loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_rec: f64,
    pub lp_rec: f64,
    pub l1_gly: f64,
    pub lp_gly: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(l1_rec: f64, lp_rec: f64, l1_gly: f64, lp_gly: f64, phi: f64) -> Self {
        Self {
            l1_rec,
            lp_rec,
            l1_gly,
            lp_gly,
            total: (l1_rec + lp_rec) + phi * (l1_gly + lp_gly),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l1_rec, self.lp_rec, self.l1_gly, self.lp_gly, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Element-wise mean over several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = Self::default();
        for b in items {
            m.l1_rec += b.l1_rec / n;
            m.lp_rec += b.lp_rec / n;
            m.l1_gly += b.l1_gly / n;
            m.lp_gly += b.lp_gly / n;
            m.total += b.total / n;
        }
        m
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} l1_rec={:.6} lp_rec={:.6} l1_gly={:.6} lp_gly={:.6}",
            self.total, self.l1_rec, self.lp_rec, self.l1_gly, self.lp_gly
        )
    }
}

/// Graph handles of the objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l1_rec: Var,
    pub lp_rec: Var,
    pub l1_gly: Var,
    pub lp_gly: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l1_rec: g.scalar(self.l1_rec),
            lp_rec: g.scalar(self.lp_rec),
            l1_gly: g.scalar(self.l1_gly),
            lp_gly: g.scalar(self.lp_gly),
            total: g.scalar(self.total),
        }
    }
}

/// `L1(I_R) + LP(I_R) + φ (L1(I_S) + LP(I_S))`.
pub fn objective(
    g: &mut Graph,
    fe: &FeatureExtractor,
    restored: Var,
    skeleton: Var,
    gt: Var,
    gt_skeleton: Var,
    phi: f64,
) -> LossVars {
    let l1_rec = g.l1_mean(restored, gt);
    let lp_rec = fe.perceptual(g, restored, gt);
    let l1_gly = g.l1_mean(skeleton, gt_skeleton);
    let lp_gly = fe.perceptual(g, skeleton, gt_skeleton);
    let rec = g.add(l1_rec, lp_rec);
    let gly = g.add(l1_gly, lp_gly);
    let gly = g.scale(gly, phi);
    let total = g.add(rec, gly);
    LossVars {
        l1_rec,
        lp_rec,
        l1_gly,
        lp_gly,
        total,
    }
}

pub fn l1_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(metrics::l1(a, b)?)
}

pub fn perceptual_loss(a: &ImageTensor, b: &ImageTensor, fe: &FeatureExtractor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mut g = Graph::detached(false);
    let x = g.constant(Tensor::from_images(&[a])?);
    let y = g.constant(Tensor::from_images(&[b])?);
    let p = fe.perceptual(&mut g, x, y);
    Ok(g.scalar(p))
}

/// Objective on a single prediction, evaluated without gradients.
pub fn total_loss(
    fwd: &ForwardResult,
    gt: &ImageTensor,
    gt_skeleton: &ImageTensor,
    phi: f64,
    fe: &FeatureExtractor,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown::compose(
        l1_loss(&fwd.restored, gt)?,
        perceptual_loss(&fwd.restored, gt, fe)?,
        l1_loss(&fwd.skeleton_pred, gt_skeleton)?,
        perceptual_loss(&fwd.skeleton_pred, gt_skeleton, fe)?,
        phi,
    ))
}
