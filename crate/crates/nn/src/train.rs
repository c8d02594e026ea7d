//! Optimization loop, evaluation, checkpoint/resume, the ablation harness
//! and glyph visualization.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use charformer_core::config::{ConnectionScheme, ModelConfig, RsabMixer, RunConfig};
use charformer_core::io::{list_png_ids, load_image, save_image, PairedDataset};
use charformer_core::metrics::{psnr, ssim};
use charformer_core::synth::SamplePair;
use charformer_core::{rng, BinaryImage, ImageTensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{objective, FeatureExtractor, LossBreakdown};
use crate::net::CharFormer;
use crate::optim::{cosine_lr, Optimizer};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "iteration,lr,loss_total,l1_rec,lp_rec,l1_gly,lp_gly,eval_psnr,eval_ssim";
pub const LATEST_CHECKPOINT: &str = "checkpoints/latest.safetensors";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.safetensors";
pub const ABORT_FILE: &str = "abort.json";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    charformer_core::Error::io(path, e).into()
}

/// Stacked training tensors: noisy and clean `[n, h, w, 3]`, skeleton
/// `[n, h, w, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub noisy: Tensor,
    pub clean: Tensor,
    pub skeleton: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SamplePair]) -> Result<Self> {
        let noisy: Vec<ImageTensor> = pairs.iter().map(|p| p.noisy.to_rgb()).collect();
        let clean: Vec<ImageTensor> = pairs.iter().map(|p| p.clean.to_rgb()).collect();
        let skel: Vec<ImageTensor> = pairs.iter().map(|p| p.skeleton.to_gray()).collect();
        Ok(Self {
            noisy: Tensor::from_images(&noisy.iter().collect::<Vec<_>>())?,
            clean: Tensor::from_images(&clean.iter().collect::<Vec<_>>())?,
            skeleton: Tensor::from_images(&skel.iter().collect::<Vec<_>>())?,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random `crop × crop` window plus a coin-flip horizontal mirror, applied
/// identically to all three images of a pair.
pub fn augment(pair: &SamplePair, crop: usize, rng: &mut impl Rng) -> Result<SamplePair> {
    let (h, w, _) = pair.clean.dims();
    if h < crop || w < crop {
        return Err(charformer_core::Error::ImageTooSmall {
            height: h,
            width: w,
            min: crop,
        }
        .into());
    }
    let y0 = rng.random_range(0..=h - crop);
    let x0 = rng.random_range(0..=w - crop);
    let flip = rng.random_bool(0.5);
    let f = |img: &ImageTensor| -> Result<ImageTensor> {
        let c = img.crop(y0, x0, crop, crop)?;
        Ok(if flip { c.flip_horizontal() } else { c })
    };
    Ok(SamplePair {
        noisy: f(&pair.noisy)?,
        clean: f(&pair.clean)?,
        skeleton: f(&pair.skeleton)?,
        id: pair.id.clone(),
        seed: pair.seed,
    })
}

/// Dataset indices of the batch used at `iteration`. Sample position
/// `p = iteration·batch + j` falls in epoch `p / n`, and every epoch visits
/// the data in its own seeded permutation.
pub fn batch_indices(seed: u64, iteration: u64, batch: usize, n: usize) -> Vec<usize> {
    assert!(n > 0, "empty training set");
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let p = iteration * batch as u64 + j;
            let epoch = p / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng::indexed_stream(seed, "epoch", epoch));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("cached permutation").1[(p % n as u64) as usize]
        })
        .collect()
}

/// Model, optimizer and progress of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: CharFormer,
    pub optimizer: Optimizer,
    pub extractor: FeatureExtractor,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let problems = config.violations();
        if !problems.is_empty() {
            return Err(charformer_core::Error::Config(problems.join("; ")).into());
        }
        let model = CharFormer::new(&config.model, config.train.seed)?;
        Ok(Self {
            optimizer: Optimizer::new(config.train.optimizer, &model.params),
            extractor: FeatureExtractor::from_config(&config.train)?,
            config: config.clone(),
            model,
            iteration: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt.meta.config.clone();
        let optimizer = ckpt
            .optimizer
            .unwrap_or_else(|| Optimizer::new(config.train.optimizer, &ckpt.model.params));
        Ok(Self {
            extractor: FeatureExtractor::from_config(&config.train)?,
            model: ckpt.model,
            optimizer,
            iteration: ckpt.meta.iteration,
            config,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.train.seed
    }

    /// Learning rate of the next step.
    pub fn learning_rate(&self) -> f64 {
        let t = &self.config.train;
        cosine_lr(t.learning_rate, t.min_learning_rate, self.iteration as usize, t.iterations)
    }

    /// Augmented batch for the next step, a pure function of
    /// `(seed, iteration, data)`.
    pub fn sample_batch(&self, pairs: &[SamplePair]) -> Result<Batch> {
        let t = &self.config.train;
        let idx = batch_indices(self.seed(), self.iteration, t.batch_size, pairs.len());
        let mut rng = rng::indexed_stream(self.seed(), "train", self.iteration);
        let items = idx
            .iter()
            .map(|&i| augment(&pairs[i], t.crop_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_pairs(&items.iter().collect::<Vec<_>>())
    }

    /// Loss terms on a batch without updating anything.
    pub fn loss(&self, batch: &Batch) -> Result<LossBreakdown> {
        self.model.check_input(batch.noisy.shape()[1], batch.noisy.shape()[2])?;
        let mut g = Graph::new(&self.model.params, false);
        let lv = self.build_objective(&mut g, batch);
        Ok(lv.breakdown(&g))
    }

    fn build_objective(&self, g: &mut Graph, batch: &Batch) -> crate::loss::LossVars {
        let x = g.constant(batch.noisy.clone());
        let gt = g.constant(batch.clean.clone());
        let gs = g.constant(batch.skeleton.clone());
        let out = self.model.forward(g, x);
        objective(
            g,
            &self.extractor,
            out.restored,
            out.skeleton,
            gt,
            gs,
            self.config.model.glyph_loss_weight,
        )
    }

    /// One optimizer update on the total loss. Returns the loss terms
    /// measured before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.model.check_input(batch.noisy.shape()[1], batch.noisy.shape()[2])?;
        let lr = self.learning_rate();
        let (breakdown, grads) = {
            let mut g = Graph::new(&self.model.params, true);
            let lv = self.build_objective(&mut g, batch);
            let b = lv.breakdown(&g);
            if !b.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration,
                    terms: b.to_string(),
                });
            }
            (b, g.backward(lv.total).into_params())
        };
        self.optimizer.update(&mut self.model.params, &grads, lr);
        self.iteration += 1;
        Ok(breakdown)
    }

    pub fn meta(&self, last_loss: Option<LossBreakdown>, best_psnr: Option<f64>) -> CheckpointMeta {
        CheckpointMeta {
            format: checkpoint::FORMAT_VERSION,
            fingerprint: self.config.fingerprint(),
            config: self.config.clone(),
            iteration: self.iteration,
            seed: self.seed(),
            optimizer: self.optimizer.kind,
            optimizer_step: self.optimizer.step,
            has_moments: true,
            last_loss,
            best_psnr,
            num_parameters: self.model.num_parameters(),
        }
    }

    pub fn save(&self, path: &Path, last_loss: Option<LossBreakdown>, best_psnr: Option<f64>) -> Result<()> {
        checkpoint::save(path, &self.model, Some(&self.optimizer), &self.meta(last_loss, best_psnr))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the unprocessed noisy inputs on the same images.
    pub noisy_psnr: f64,
    pub noisy_ssim: f64,
    pub glyph_f1: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// F1 of `pred > 0.5` against `target > 0.5`; 1 when both are empty.
pub fn glyph_f1(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let (p, t) = (BinaryImage::from_image(pred), BinaryImage::from_image(target));
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.data().iter().zip(t.data()) {
        match (a != 0, b != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Full-image scores of `model` on `pairs`.
pub fn evaluate(model: &CharFormer, pairs: &[SamplePair]) -> Result<EvalSummary> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut noisy = Vec::with_capacity(pairs.len());
    let mut f1 = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.infer(&p.noisy)?;
        let clean = p.clean.to_rgb();
        rows.push(EvalRow {
            id: p.id.clone(),
            psnr: psnr(&out.restored, &clean, 1.0)?,
            ssim: ssim(&out.restored, &clean)?,
        });
        let n = p.noisy.to_rgb();
        noisy.push((psnr(&n, &clean, 1.0)?, ssim(&n, &clean)?));
        f1.push(glyph_f1(&out.skeleton_pred, &p.skeleton)?);
    }
    Ok(EvalSummary {
        psnr: mean(rows.iter().map(|r| r.psnr)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        noisy_psnr: mean(noisy.iter().map(|r| r.0)),
        noisy_ssim: mean(noisy.iter().map(|r| r.1)),
        glyph_f1: mean(f1.into_iter()),
        rows,
    })
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:e},{:.8},{:.8},{:.8},{:.8},{:.8},{},{}",
            self.iteration,
            self.lr,
            self.loss.total,
            self.loss.l1_rec,
            self.loss.lp_rec,
            self.loss.l1_gly,
            self.loss.lp_gly,
            opt(self.eval_psnr),
            opt(self.eval_ssim)
        )
    }

    fn iteration_of(line: &str) -> Option<u64> {
        line.split(',').next()?.parse().ok()
    }
}

#[derive(Debug, Default)]
pub struct FitOptions {
    /// Continue from this checkpoint; its configuration must match.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub iterations: u64,
    pub history: Vec<MetricsRow>,
    pub final_loss: Option<LossBreakdown>,
    pub last_eval: Option<EvalSummary>,
    pub checkpoint: PathBuf,
}

/// Eval split: the held-out pairs (or the training pairs when there are
/// none), capped at `eval_limit`.
pub fn eval_pairs(data: &PairedDataset, limit: Option<usize>) -> &[SamplePair] {
    let set = if data.test.is_empty() { &data.train } else { &data.test };
    &set[..limit.unwrap_or(usize::MAX).min(set.len())]
}

fn write_samples(model: &CharFormer, pairs: &[SamplePair], dir: &Path, iteration: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for p in pairs {
        let out = model.infer(&p.noisy)?;
        let strip = ImageTensor::hstack(&[&p.noisy.to_rgb(), &out.restored, &out.skeleton_pred.to_rgb()])?;
        save_image(&strip, &dir.join(format!("iter{iteration:07}_{}.png", p.id)))?;
    }
    Ok(())
}

/// Train on `data`, writing `metrics.csv`, checkpoints and sample strips to
/// `out_dir`. `progress` sees every metrics row as it is produced.
pub fn fit(
    config: &RunConfig,
    data: &PairedDataset,
    out_dir: &Path,
    options: &FitOptions,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(charformer_core::Error::Dataset(format!("{}: no training pairs", data.root.display())).into());
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let config_path = out_dir.join("config.json");
    fs::write(&config_path, config.to_json() + "\n").map_err(|e| io_err(&config_path, e))?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let (mut trainer, lines, mut best) = match &options.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.meta.fingerprint != config.fingerprint() {
                return Err(charformer_core::Error::Config(format!(
                    "{} was written by a different configuration",
                    path.display()
                ))
                .into());
            }
            let best = ckpt.meta.best_psnr;
            let trainer = Trainer::from_checkpoint(ckpt)?;
            let kept: Vec<String> = fs::read_to_string(&metrics_path)
                .unwrap_or_default()
                .lines()
                .skip(1)
                .filter(|l| MetricsRow::iteration_of(l).is_some_and(|i| i <= trainer.iteration))
                .map(str::to_string)
                .collect();
            (trainer, kept, best)
        }
        None => (Trainer::new(config)?, Vec::new(), None),
    };
    let mut csv = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let emit = |csv: &mut fs::File, line: &str| -> Result<()> {
        writeln!(csv, "{line}").map_err(|e| io_err(&metrics_path, e))
    };
    emit(&mut csv, METRICS_HEADER)?;
    for l in &lines {
        emit(&mut csv, l)?;
    }

    let latest = out_dir.join(LATEST_CHECKPOINT);
    if trainer.iteration == 0 {
        trainer.save(&latest, None, None)?;
    }
    let total = config.train.iterations as u64;
    let interval = config.train.eval_interval() as u64;
    let evals = eval_pairs(data, config.train.eval_limit);
    let samples = &evals[..config.train.sample_images.min(evals.len())];
    let mut history = Vec::new();
    let mut last_eval = None;
    let mut final_loss = None;
    while trainer.iteration < total {
        let lr = trainer.learning_rate();
        let batch = trainer.sample_batch(&data.train)?;
        let loss = match trainer.step(&batch) {
            Ok(l) => l,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                let dump = serde_json::json!({
                    "iteration": trainer.iteration,
                    "lr": lr,
                    "error": e.to_string(),
                    "fingerprint": config.fingerprint(),
                });
                let path = out_dir.join(ABORT_FILE);
                fs::write(&path, dump.to_string()).map_err(|e| io_err(&path, e))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        final_loss = Some(loss);
        let it = trainer.iteration;
        let mut row = MetricsRow {
            iteration: it,
            lr,
            loss,
            eval_psnr: None,
            eval_ssim: None,
        };
        if it % interval == 0 || it == total {
            let summary = evaluate(&trainer.model, evals)?;
            row.eval_psnr = Some(summary.psnr);
            row.eval_ssim = Some(summary.ssim);
            write_samples(&trainer.model, samples, &out_dir.join("samples"), it)?;
            if best.is_none_or(|b| summary.psnr > b) {
                best = Some(summary.psnr);
                trainer.save(&out_dir.join(BEST_CHECKPOINT), Some(loss), best)?;
            }
            trainer.save(&latest, Some(loss), best)?;
            last_eval = Some(summary);
        }
        let line = row.to_csv();
        emit(&mut csv, &line)?;
        progress(&row);
        history.push(row);
    }
    Ok(TrainReport {
        iterations: trainer.iteration,
        history,
        final_loss,
        last_eval,
        checkpoint: latest,
    })
}

/// Denoise every PNG of `in_dir` into `out_dir` under the same name.
pub fn denoise_dir(model: &CharFormer, in_dir: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let ids = list_png_ids(in_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    for id in &ids {
        let img = load_image(&in_dir.join(format!("{id}.png")))?;
        let out = model.infer(&img)?;
        save_image(&out.restored, &out_dir.join(format!("{id}.png")))?;
    }
    Ok(ids)
}

/// PSNR/SSIM of every prediction against the ground truth of the same name.
/// Both directories must hold exactly the same ids.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<EvalRow>> {
    let pred = list_png_ids(pred_dir)?;
    let gt = list_png_ids(gt_dir)?;
    if pred != gt {
        let odd: Vec<&String> = pred
            .iter()
            .filter(|id| !gt.contains(id))
            .chain(gt.iter().filter(|id| !pred.contains(id)))
            .collect();
        return Err(charformer_core::Error::Dataset(format!(
            "{} and {} differ for ids {odd:?}",
            pred_dir.display(),
            gt_dir.display()
        ))
        .into());
    }
    pred.iter()
        .map(|id| {
            let p = load_image(&pred_dir.join(format!("{id}.png")))?;
            let g = load_image(&gt_dir.join(format!("{id}.png")))?;
            let (p, g) = if p.channels() == g.channels() { (p, g) } else { (p.to_rgb(), g.to_rgb()) };
            Ok(EvalRow {
                id: id.clone(),
                psnr: psnr(&p, &g, 1.0)?,
                ssim: ssim(&p, &g)?,
            })
        })
        .collect()
}

/// `id,psnr,ssim` rows followed by a `mean` row.
pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut s = String::from("id,psnr,ssim\n");
    for r in rows {
        s += &format!("{},{:.6},{:.6}\n", r.id, r.psnr, r.ssim);
    }
    s += &format!(
        "mean,{:.6},{:.6}\n",
        mean(rows.iter().map(|r| r.psnr)),
        mean(rows.iter().map(|r| r.ssim))
    );
    fs::write(path, s).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    FullConA,
    ConB,
    ConC,
    ConD,
    BackboneNoFa,
    RsabConvOnly,
    Rsab1tl,
    Rsab3tl,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::FullConA,
        AblationVariant::ConB,
        AblationVariant::ConC,
        AblationVariant::ConD,
        AblationVariant::BackboneNoFa,
        AblationVariant::RsabConvOnly,
        AblationVariant::Rsab1tl,
        AblationVariant::Rsab3tl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::FullConA => "full_con_a",
            AblationVariant::ConB => "con_b",
            AblationVariant::ConC => "con_c",
            AblationVariant::ConD => "con_d",
            AblationVariant::BackboneNoFa => "backbone_no_fa",
            AblationVariant::RsabConvOnly => "rsab_conv_only",
            AblationVariant::Rsab1tl => "rsab_1tl",
            AblationVariant::Rsab3tl => "rsab_3tl",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AblationVariant::FullConA => "FA(r+g) added to both branches",
            AblationVariant::ConB => "FA(r+g) added to the reconstruction branch only",
            AblationVariant::ConC => "FA(g) added to both branches",
            AblationVariant::ConD => "FA(r+g) replaces the reconstruction branch",
            AblationVariant::BackboneNoFa => "r+g into reconstruction, g passes through",
            AblationVariant::RsabConvOnly => "3x3 convolutions instead of transformer layers",
            AblationVariant::Rsab1tl => "one transformer layer per RSAB",
            AblationVariant::Rsab3tl => "three transformer layers per RSAB",
        }
    }

    /// The model configuration of this variant on top of `base`.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            AblationVariant::FullConA => c.connection = ConnectionScheme::ConA,
            AblationVariant::ConB => c.connection = ConnectionScheme::ConB,
            AblationVariant::ConC => c.connection = ConnectionScheme::ConC,
            AblationVariant::ConD => c.connection = ConnectionScheme::ConD,
            AblationVariant::BackboneNoFa => c.connection = ConnectionScheme::NoFa,
            AblationVariant::RsabConvOnly => c.rsab_mixer = RsabMixer::Conv,
            AblationVariant::Rsab1tl => c.rsab_transformer_layers = 1,
            AblationVariant::Rsab3tl => c.rsab_transformer_layers = 3,
        }
        c
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s || (s == "con_a" && *v == AblationVariant::FullConA))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Comma-separated variant names; `all` selects every variant.
pub fn parse_variants(list: &str) -> Result<Vec<AblationVariant>> {
    if list.trim() == "all" {
        return Ok(AblationVariant::ALL.to_vec());
    }
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

pub fn build_variant(variant: AblationVariant, config: &ModelConfig, seed: u64) -> Result<CharFormer> {
    CharFormer::new(&variant.apply(config), seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub psnr: f64,
    pub ssim: f64,
    pub final_loss: f64,
    pub num_parameters: usize,
}

/// Train every variant with the same seed and budget and score it on the
/// evaluation split.
pub fn ablate(
    data: &PairedDataset,
    variants: &[AblationVariant],
    base: &RunConfig,
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if data.train.is_empty() {
        return Err(charformer_core::Error::Dataset(format!("{}: no training pairs", data.root.display())).into());
    }
    let evals = eval_pairs(data, base.train.eval_limit);
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let config = RunConfig {
            model: v.apply(&base.model),
            ..base.clone()
        };
        let mut trainer = Trainer::new(&config)?;
        let mut last = f64::NAN;
        while (trainer.iteration as usize) < config.train.iterations {
            let batch = trainer.sample_batch(&data.train)?;
            last = trainer.step(&batch)?.total;
        }
        let summary = evaluate(&trainer.model, evals)?;
        let row = AblationRow {
            variant: v,
            psnr: summary.psnr,
            ssim: summary.ssim,
            final_loss: last,
            num_parameters: trainer.model.num_parameters(),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut s = String::from("variant,psnr,ssim,final_loss,num_parameters\n");
    for r in rows {
        s += &format!("{},{:.6},{:.6},{:.8},{}\n", r.variant, r.psnr, r.ssim, r.final_loss, r.num_parameters);
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphVisual {
    pub id: String,
    /// noisy, clean, thresholded predicted skeleton
    pub paths: [PathBuf; 3],
    pub f1: f64,
}

/// Write `{id}_noisy.png`, `{id}_clean.png` and `{id}_glyph.png` (the
/// predicted skeleton thresholded at 0.5) for every pair.
pub fn visualize_glyphs(model: &CharFormer, pairs: &[SamplePair], out_dir: &Path) -> Result<Vec<GlyphVisual>> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    pairs
        .iter()
        .map(|p| {
            let out = model.infer(&p.noisy)?;
            let glyph = BinaryImage::from_image(&out.skeleton_pred).to_image();
            let paths = ["noisy", "clean", "glyph"].map(|k| out_dir.join(format!("{}_{k}.png", p.id)));
            save_image(&p.noisy, &paths[0])?;
            save_image(&p.clean, &paths[1])?;
            save_image(&glyph, &paths[2])?;
            Ok(GlyphVisual {
                id: p.id.clone(),
                f1: glyph_f1(&out.skeleton_pred, &p.skeleton)?,
                paths,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_visit_every_index_once() {
        let n = 7;
        let mut seen: Vec<usize> = (0..7).flat_map(|it| batch_indices(3, it, 3, n)).collect();
        assert_eq!(seen.len(), 21);
        for epoch in seen.chunks_mut(n) {
            epoch.sort();
            assert_eq!(epoch, (0..n).collect::<Vec<_>>().as_slice());
        }
        assert_eq!(batch_indices(3, 4, 3, n), batch_indices(3, 4, 3, n));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert_eq!(parse_variants("all").unwrap().len(), 8);
        assert!(matches!(parse_variants("con_b,nope"), Err(Error::UnknownVariant(s)) if s == "nope"));
    }

    #[test]
    fn f1_counts() {
        let a = BinaryImage::from_fn(2, 2, |y, _| y == 0).to_image();
        let b = BinaryImage::from_fn(2, 2, |_, x| x == 0).to_image();
        assert_eq!(glyph_f1(&a, &a).unwrap(), 1.0);
        assert_eq!(glyph_f1(&a, &b).unwrap(), 0.5);
        let z = ImageTensor::filled(2, 2, 1, 0.0);
        assert_eq!(glyph_f1(&z, &z).unwrap(), 1.0);
    }
}
