//! The CharFormer network: input projector, U-shaped stack of dual-branch
//! blocks (RSAB + GSNB joined by fused attention), output projector and
//! glyph head.

use charformer_core::config::{scale_at, validate, ModelConfig, RsabMixer};
use charformer_core::io::{pad_to_valid, unpad};
use charformer_core::{rng, ImageTensor};
use rand_chacha::ChaCha8Rng;

use crate::attention::{merge_var, partition_var, TransformerLayer};
use crate::error::{Error, Result};
use crate::fused::{fuse_branches, uses_fused_attention, FusedAttention};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, ConvTranspose2x2, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
    Flat,
}

impl Direction {
    pub fn out_channels(self, c: usize) -> usize {
        match self {
            Direction::Down => 2 * c,
            Direction::Up => c / 2,
            Direction::Flat => c,
        }
    }
}

/// Trailing convolution of a branch: stride-2 3×3 (down), 2×2 stride-2
/// transposed (up) or plain 3×3 (flat).
#[derive(Debug, Clone)]
pub enum Resample {
    Down(Conv2d),
    Up(ConvTranspose2x2),
    Flat(Conv2d),
}

impl Resample {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, dir: Direction) -> Self {
        let co = dir.out_channels(c);
        match dir {
            Direction::Down => Resample::Down(Conv2d::new(store, rng, name, c, co, 3, 2, true)),
            Direction::Up => Resample::Up(ConvTranspose2x2::new(store, rng, name, c, co)),
            Direction::Flat => Resample::Flat(Conv2d::new(store, rng, name, c, co, 3, 1, true)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            Resample::Down(c) | Resample::Flat(c) => c.forward(g, x),
            Resample::Up(c) => c.forward(g, x),
        }
    }
}

/// Residual projection matching a [`Resample`]: 1×1 stride 2 (down),
/// 1×1 then nearest 2× upsampling (up), identity (flat).
#[derive(Debug, Clone)]
pub enum SkipProjection {
    Down(Conv2d),
    Up(Conv2d),
    Identity,
}

impl SkipProjection {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, dir: Direction) -> Self {
        let co = dir.out_channels(c);
        match dir {
            Direction::Down => SkipProjection::Down(Conv2d::new(store, rng, name, c, co, 1, 2, true)),
            Direction::Up => SkipProjection::Up(Conv2d::new(store, rng, name, c, co, 1, 1, true)),
            Direction::Flat => SkipProjection::Identity,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            SkipProjection::Down(c) => c.forward(g, x),
            SkipProjection::Up(c) => {
                let y = c.forward(g, x);
                g.upsample2(y)
            }
            SkipProjection::Identity => x,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Mixer {
    Transformer(Vec<TransformerLayer>),
    Conv(Vec<Conv2d>),
}

/// Residual self-attention block: `resample(mixer(f)) + skip(f)`.
#[derive(Debug, Clone)]
pub struct Rsab {
    pub mixer: Mixer,
    pub resample: Resample,
    pub skip: SkipProjection,
    pub window: usize,
}

impl Rsab {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        dir: Direction,
        config: &ModelConfig,
    ) -> Self {
        let k = config.rsab_transformer_layers;
        let mixer = match config.rsab_mixer {
            RsabMixer::Transformer => Mixer::Transformer(
                (0..k)
                    .map(|l| {
                        TransformerLayer::new(
                            store,
                            rng,
                            &format!("{name}.layer{l}"),
                            c,
                            config.num_heads,
                            config.window_size,
                        )
                    })
                    .collect(),
            ),
            RsabMixer::Conv => Mixer::Conv(
                (0..k)
                    .map(|l| Conv2d::new(store, rng, &format!("{name}.conv{l}"), c, c, 3, 1, true))
                    .collect(),
            ),
        };
        Self {
            mixer,
            resample: Resample::new(store, rng, &format!("{name}.resample"), c, dir),
            skip: SkipProjection::new(store, rng, &format!("{name}.skip"), c, dir),
            window: config.window_size,
        }
    }

    /// Output of the token mixer, before resampling.
    pub fn mix(&self, g: &mut Graph, f: Var) -> Var {
        match &self.mixer {
            Mixer::Transformer(layers) => {
                let shape = g.value(f).dims4().expect("rsab input");
                let mut x = partition_var(g, f, self.window);
                for layer in layers {
                    x = layer.forward_windows(g, x);
                }
                merge_var(g, x, shape, self.window)
            }
            Mixer::Conv(convs) => convs.iter().fold(f, |x, conv| {
                let y = conv.forward(g, x);
                g.leaky_relu(y, LEAKY_SLOPE)
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, f: Var) -> Var {
        let m = self.mix(g, f);
        let r = self.resample.forward(g, m);
        let s = self.skip.forward(g, f);
        g.add(r, s)
    }

    pub fn transformer_layers(&self) -> &[TransformerLayer] {
        match &self.mixer {
            Mixer::Transformer(l) => l,
            Mixer::Conv(_) => &[],
        }
    }
}

/// Glyph structural block: `resample(convs(f)) + skip(f)`.
#[derive(Debug, Clone)]
pub struct Gsnb {
    pub convs: Vec<Conv2d>,
    pub resample: Resample,
    pub skip: SkipProjection,
}

impl Gsnb {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        dir: Direction,
        depth: usize,
    ) -> Self {
        Self {
            convs: (0..depth)
                .map(|l| Conv2d::new(store, rng, &format!("{name}.conv{l}"), c, c, 3, 1, true))
                .collect(),
            resample: Resample::new(store, rng, &format!("{name}.resample"), c, dir),
            skip: SkipProjection::new(store, rng, &format!("{name}.skip"), c, dir),
        }
    }

    pub fn forward(&self, g: &mut Graph, f: Var) -> Var {
        let x = self.convs.iter().fold(f, |x, conv| {
            let y = conv.forward(g, x);
            g.leaky_relu(y, LEAKY_SLOPE)
        });
        let r = self.resample.forward(g, x);
        let s = self.skip.forward(g, f);
        g.add(r, s)
    }
}

/// Branch outputs of one block.
#[derive(Debug, Clone, Copy)]
pub struct CfbOutputs {
    pub rec: Var,
    pub gly: Var,
}

/// Intermediate values of one block, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct CfbTrace {
    pub rsab: Var,
    pub gsnb: Var,
    pub out: CfbOutputs,
}

#[derive(Debug, Clone)]
pub struct Cfb {
    pub rsab: Rsab,
    pub gsnb: Gsnb,
    pub fa: Option<FusedAttention>,
    pub direction: Direction,
    pub config: ModelConfig,
}

impl Cfb {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        direction: Direction,
        config: &ModelConfig,
    ) -> Self {
        let rsab = Rsab::new(store, rng, &format!("{name}.rsab"), c, direction, config);
        let gsnb = Gsnb::new(store, rng, &format!("{name}.gsnb"), c, direction, config.gsnb_depth);
        let co = direction.out_channels(c);
        let fa = uses_fused_attention(config.connection)
            .then(|| FusedAttention::new(store, rng, &format!("{name}.fa"), co, config.ca_hidden(co)));
        Self {
            rsab,
            gsnb,
            fa,
            direction,
            config: config.clone(),
        }
    }

    pub fn forward_traced(&self, g: &mut Graph, rec_in: Var, gly_in: Var) -> CfbTrace {
        assert_eq!(g.shape(rec_in), g.shape(gly_in), "block inputs differ in shape");
        let rsab = self.rsab.forward(g, rec_in);
        let gsnb = self.gsnb.forward(g, gly_in);
        let (rec, gly) = fuse_branches(g, self.config.connection, self.fa.as_ref(), rsab, gsnb);
        CfbTrace {
            rsab,
            gsnb,
            out: CfbOutputs { rec, gly },
        }
    }

    pub fn forward(&self, g: &mut Graph, rec_in: Var, gly_in: Var) -> CfbOutputs {
        self.forward_traced(g, rec_in, gly_in).out
    }
}

/// Decoder skip: channel concatenation then a 1×1 convolution, per branch.
#[derive(Debug, Clone)]
pub struct SkipMerge {
    pub rec: Conv2d,
    pub gly: Conv2d,
}

impl SkipMerge {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            rec: Conv2d::new(store, rng, &format!("{name}.rec"), 2 * c, c, 1, 1, true),
            gly: Conv2d::new(store, rng, &format!("{name}.gly"), 2 * c, c, 1, 1, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, current: CfbOutputs, skip: CfbOutputs) -> CfbOutputs {
        let r = g.concat_last(&[current.rec, skip.rec]);
        let l = g.concat_last(&[current.gly, skip.gly]);
        CfbOutputs {
            rec: self.rec.forward(g, r),
            gly: self.gly.forward(g, l),
        }
    }
}

/// Graph handles of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub shallow: Var,
    pub restored: Var,
    pub skeleton: Var,
    pub blocks: Vec<CfbTrace>,
}

/// Restored image `I_R` (3 channels) and predicted skeleton `I_S` (1 channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub restored: ImageTensor,
    pub skeleton_pred: ImageTensor,
}

#[derive(Debug, Clone)]
pub struct CharFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub input_proj: Conv2d,
    pub blocks: Vec<Cfb>,
    /// `merges[i]` joins `F_DF_i` with `F_DF_{T−i}` before block `i + 1`.
    pub merges: Vec<Option<SkipMerge>>,
    pub output_proj: [Conv2d; 3],
    pub glyph_head: Conv2d,
}

impl CharFormer {
    /// Build and initialize from the `init` stream of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let problems = config.structural_violations();
        if !problems.is_empty() {
            return Err(charformer_core::Error::Config(problems.join("; ")).into());
        }
        let mut rng = rng::stream(seed, "init");
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let c = config.base_channels;
        let t = config.num_cfb;
        let input_proj = Conv2d::new(s, rng, "input_proj", config.input_channels, c, 3, 1, true);
        let level = |i: usize| if i <= t / 2 { i } else { t - i };
        let mut blocks = Vec::with_capacity(t);
        let mut merges = Vec::with_capacity(t);
        for i in 0..t {
            let ci = c << level(i);
            merges.push((t / 2 < i && i < t).then(|| SkipMerge::new(s, rng, &format!("merge{i}"), ci)));
            let dir = if i < t / 2 { Direction::Down } else { Direction::Up };
            blocks.push(Cfb::new(s, rng, &format!("cfb{}", i + 1), ci, dir, config));
        }
        let output_proj = [
            Conv2d::new(s, rng, "output_proj.0", c, c, 3, 1, true),
            Conv2d::new(s, rng, "output_proj.1", c, c, 3, 1, true),
            Conv2d::new(s, rng, "output_proj.2", c, config.input_channels, 3, 1, true),
        ];
        let glyph_head = Conv2d::new(s, rng, "glyph_head", c, config.skeleton_channels, 3, 1, true);
        Ok(Self {
            config: config.clone(),
            params: store,
            input_proj,
            blocks,
            merges,
            output_proj,
            glyph_head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        Ok(validate(&self.config, (height, width)).into_result()?)
    }

    /// `F_SF = LeakyReLU(conv3×3(I_D))`.
    pub fn input_projector(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.input_proj.forward(g, x);
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    /// Run the `T` blocks from `F_REC_0 = F_GLY_0 = F_SF`.
    pub fn deep_feature_extractor(&self, g: &mut Graph, f_sf: Var) -> (CfbOutputs, Vec<CfbTrace>) {
        let mut outputs: Vec<CfbOutputs> = vec![CfbOutputs { rec: f_sf, gly: f_sf }];
        let mut traces = Vec::with_capacity(self.blocks.len());
        let t = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            let input = match &self.merges[i] {
                Some(merge) => merge.forward(g, outputs[i], outputs[t - i]),
                None => outputs[i],
            };
            let trace = block.forward_traced(g, input.rec, input.gly);
            outputs.push(trace.out);
            traces.push(trace);
        }
        (outputs[t], traces)
    }

    /// `I_R = σ(conv(LReLU(conv(LReLU(conv(F_SF + F_REC))))))`.
    pub fn output_projector(&self, g: &mut Graph, f_sf: Var, f_rec: Var) -> Var {
        let mut x = g.add(f_sf, f_rec);
        for (k, conv) in self.output_proj.iter().enumerate() {
            x = conv.forward(g, x);
            if k < 2 {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        g.sigmoid(x)
    }

    /// `I_S = σ(conv3×3(F_GLY))`.
    pub fn glyph_head(&self, g: &mut Graph, f_gly: Var) -> Var {
        let y = self.glyph_head.forward(g, f_gly);
        g.sigmoid(y)
    }

    /// Full pass on an NHWC batch whose size is already valid.
    pub fn forward(&self, g: &mut Graph, x: Var) -> ForwardVars {
        let shallow = self.input_projector(g, x);
        let (out, blocks) = self.deep_feature_extractor(g, shallow);
        let restored = self.output_projector(g, shallow, out.rec);
        let skeleton = self.glyph_head(g, out.gly);
        ForwardVars {
            shallow,
            restored,
            skeleton,
            blocks,
        }
    }

    /// Checked inference on an NHWC batch of valid size.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let [_, h, w, c] = x.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.config.input_channels)));
        }
        self.check_input(h, w)?;
        let mut g = Graph::new(&self.params, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv);
        Ok((g.value(out.restored).clone(), g.value(out.skeleton).clone()))
    }

    /// Denoise one image of any size: reflect-pad, run, crop back.
    pub fn infer(&self, img: &ImageTensor) -> Result<ForwardResult> {
        let rgb = img.to_rgb();
        let (padded, record) = pad_to_valid(&rgb, &self.config);
        let x = Tensor::from_images(&[&padded])?;
        let (r, s) = self.forward_tensor(&x)?;
        let restored = r.to_images()?.remove(0);
        let skeleton = s.to_images()?.remove(0);
        Ok(ForwardResult {
            restored: unpad(&restored, record)?,
            skeleton_pred: unpad(&skeleton, record)?,
        })
    }

    /// Expected `(h, w, c)` of block `i`'s outputs for an `H×W` input.
    pub fn block_scale(&self, input: (usize, usize), i: usize) -> Result<(usize, usize, usize)> {
        Ok(scale_at(&self.config, input, i)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            num_cfb: 2,
            rsab_transformer_layers: 1,
            window_size: 4,
            num_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shapes_follow_the_u() {
        let m = CharFormer::new(&micro(), 0).unwrap();
        let x = Tensor::full(&[1, 8, 8, 3], 0.5);
        let mut g = Graph::new(&m.params, false);
        let xv = g.constant(x);
        let out = m.forward(&mut g, xv);
        assert_eq!(g.shape(out.blocks[0].out.rec), &[1, 4, 4, 8]);
        assert_eq!(g.shape(out.blocks[1].out.gly), &[1, 8, 8, 4]);
        assert_eq!(g.shape(out.restored), &[1, 8, 8, 3]);
        assert_eq!(g.shape(out.skeleton), &[1, 8, 8, 1]);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let m = CharFormer::new(&micro(), 0).unwrap();
        assert!(m.forward_tensor(&Tensor::full(&[1, 6, 8, 3], 0.5)).is_err());
        let bad = ModelConfig {
            num_cfb: 3,
            ..micro()
        };
        assert!(CharFormer::new(&bad, 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = CharFormer::new(&micro(), 9).unwrap();
        let b = CharFormer::new(&micro(), 9).unwrap();
        let c = CharFormer::new(&micro(), 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        use crate::gradcheck::check_params;
        use rand::Rng;
        let m = CharFormer::new(&micro(), 3).unwrap();
        let mut r = rng::stream(5, "gc");
        let mut t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = t(&[1, 8, 8, 3]).map(|v| 0.5 + 0.5 * v);
        let (wr, ws) = (t(&[1, 8, 8, 3]), t(&[1, 8, 8, 1]));
        let picks: Vec<_> = m
            .params
            .iter()
            .map(|(id, _, v)| (id, r.random_range(0..v.len())))
            .collect();
        let mut store = m.params.clone();
        let checks = check_params(&mut store, &picks, |g| {
            let xv = g.constant(x.clone());
            let out = m.forward(g, xv);
            let a = g.constant(wr.clone());
            let b = g.constant(ws.clone());
            let pr = g.mul(out.restored, a);
            let ps = g.mul(out.skeleton, b);
            let sr = g.sum_all(pr);
            let ss = g.sum_all(ps);
            g.add(sr, ss)
        });
        let worst = checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
        assert!(worst.rel_error < 1e-4, "{worst:?}");
    }
}
