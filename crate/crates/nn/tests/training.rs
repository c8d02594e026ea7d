use std::path::Path;

use charformer_core::config::{ModelConfig, PerceptualMode, RunConfig};
use charformer_core::io::load_dataset;
use charformer_core::synth::{generate_pair, make_dataset, GlyphSpec, NoiseSpec, SamplePair};
use charformer_nn::checkpoint;
use charformer_nn::train::{self, AblationVariant, FitOptions, Trainer, ABORT_FILE, METRICS_FILE, METRICS_HEADER};
use charformer_nn::{CharFormer, Error, Tensor};

fn tiny_config(iterations: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig {
        base_channels: 8,
        num_cfb: 2,
        rsab_transformer_layers: 1,
        window_size: 8,
        num_heads: 2,
        gsnb_depth: 1,
        ..ModelConfig::default()
    };
    c.train.iterations = iterations;
    c.train.batch_size = 2;
    c.train.crop_size = 32;
    c.train.learning_rate = 1e-3;
    c.train.perceptual_width_divisor = 16;
    c.train.eval_every = Some(2);
    c.train.sample_images = 1;
    c
}

fn pairs(n: usize) -> Vec<SamplePair> {
    let glyph = GlyphSpec {
        canvas: 32,
        ..GlyphSpec::default()
    };
    (0..n).map(|i| generate_pair(&glyph, &NoiseSpec::default(), 9, i).unwrap()).collect()
}

fn dataset(dir: &Path, n: usize, holdout: usize) {
    let glyph = GlyphSpec {
        canvas: 32,
        ..GlyphSpec::default()
    };
    make_dataset(n, &glyph, &NoiseSpec::default(), 9, holdout, dir).unwrap();
}

#[test]
fn repeated_batch_descends() {
    let mut t = Trainer::new(&tiny_config(50)).unwrap();
    let data = pairs(2);
    let batch = t.sample_batch(&data).unwrap();
    let first = t.loss(&batch).unwrap().total;
    for _ in 0..50 {
        t.step(&batch).unwrap();
    }
    let last = t.loss(&batch).unwrap().total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut config = tiny_config(3);
    config.train.learning_rate = 0.0;
    let mut t = Trainer::new(&config).unwrap();
    let before = t.model.params.clone();
    let batch = t.sample_batch(&pairs(2)).unwrap();
    t.step(&batch).unwrap();
    assert_eq!(t.model.params, before);
}

#[test]
fn same_seed_same_loss_sequence() {
    let data = pairs(3);
    let run = || {
        let mut t = Trainer::new(&tiny_config(4)).unwrap();
        (0..4)
            .map(|_| {
                let b = t.sample_batch(&data).unwrap();
                t.step(&b).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn one_step_moves_every_module() {
    let mut t = Trainer::new(&tiny_config(1)).unwrap();
    let before = t.model.params.clone();
    let batch = t.sample_batch(&pairs(2)).unwrap();
    t.step(&batch).unwrap();
    for prefix in ["input_proj", "cfb1.rsab", "cfb1.gsnb", "cfb1.fa", "cfb2.rsab", "cfb2.gsnb", "cfb2.fa", "output_proj", "glyph_head"] {
        let moved = t
            .model
            .params
            .iter()
            .filter(|(_, name, _)| name.starts_with(prefix))
            .any(|(id, _, v)| v != before.get(id));
        assert!(moved, "{prefix} did not change");
    }
}

#[test]
fn nan_parameter_aborts_the_step() {
    let mut t = Trainer::new(&tiny_config(1)).unwrap();
    let id = t.model.params.find("glyph_head.bias").unwrap();
    t.model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let batch = t.sample_batch(&pairs(2)).unwrap();
    assert!(matches!(t.step(&batch), Err(Error::NonFiniteLoss { iteration: 0, .. })));
}

#[test]
fn divergent_fit_writes_abort_dump() {
    let dir = tempfile::tempdir().unwrap();
    dataset(&dir.path().join("data"), 3, 1);
    let data = load_dataset(&dir.path().join("data")).unwrap();
    let mut config = tiny_config(20);
    config.train.learning_rate = 1e200;
    config.train.perceptual_mode = PerceptualMode::Off;
    let out = dir.path().join("run");
    let err = train::fit(&config, &data, &out, &FitOptions::default(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join(ABORT_FILE)).unwrap()).unwrap();
    assert!(dump["iteration"].as_u64().is_some());
    assert!(dump["error"].as_str().unwrap().contains("l1_rec"));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&tiny_config(2)).unwrap();
    let data = pairs(2);
    let batch = t.sample_batch(&data).unwrap();
    t.step(&batch).unwrap();
    let path = dir.path().join("ckpt.safetensors");
    t.save(&path, None, Some(12.5)).unwrap();
    assert!(checkpoint::manifest_path(&path).exists());
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.model.params, t.model.params);
    assert_eq!(loaded.optimizer.as_ref(), Some(&t.optimizer));
    assert_eq!(loaded.meta.iteration, 1);
    assert_eq!(loaded.meta.best_psnr, Some(12.5));
    let x = Tensor::from_images(&[&data[0].noisy.to_rgb()]).unwrap();
    assert_eq!(loaded.model.forward_tensor(&x).unwrap(), t.model.forward_tensor(&x).unwrap());
}

#[test]
fn checkpoint_with_wrong_shapes_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(&tiny_config(1)).unwrap();
    let path = dir.path().join("ckpt.safetensors");
    t.save(&path, None, None).unwrap();
    let mut meta = checkpoint::load_meta(&path).unwrap();
    meta.config.model.base_channels = 16;
    std::fs::write(checkpoint::manifest_path(&path), serde_json::to_string(&meta).unwrap()).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Checkpoint { .. })));
}

#[test]
fn zero_iterations_writes_initial_checkpoint_and_empty_history() {
    let dir = tempfile::tempdir().unwrap();
    dataset(&dir.path().join("data"), 3, 1);
    let data = load_dataset(&dir.path().join("data")).unwrap();
    let out = dir.path().join("run");
    let report = train::fit(&tiny_config(0), &data, &out, &FitOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(report.iterations, 0);
    assert!(report.history.is_empty());
    let csv = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(csv.trim_end(), METRICS_HEADER);
    let ckpt = checkpoint::load(&report.checkpoint).unwrap();
    assert_eq!(ckpt.meta.iteration, 0);
    assert_eq!(ckpt.model.params, CharFormer::new(&tiny_config(0).model, 0).unwrap().params);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    dataset(&dir.path().join("data"), 4, 1);
    let data = load_dataset(&dir.path().join("data")).unwrap();
    let config = tiny_config(6);

    let full = dir.path().join("full");
    let straight = train::fit(&config, &data, &full, &FitOptions::default(), &mut |_| {}).unwrap();

    // Stop after 4 iterations by training a prefix, then resume with the full budget.
    let part = dir.path().join("part");
    let mut trainer = Trainer::new(&config).unwrap();
    for _ in 0..4 {
        let b = trainer.sample_batch(&data.train).unwrap();
        trainer.step(&b).unwrap();
    }
    let ckpt = part.join("checkpoints/latest.safetensors");
    trainer.save(&ckpt, None, None).unwrap();
    let resumed = train::fit(&config, &data, &part, &FitOptions { resume: Some(ckpt) }, &mut |_| {}).unwrap();

    let tail: Vec<_> = straight.history[4..].iter().map(|r| r.loss).collect();
    let again: Vec<_> = resumed.history.iter().map(|r| r.loss).collect();
    assert_eq!(tail, again);
    let a = checkpoint::load(&straight.checkpoint).unwrap();
    let b = checkpoint::load(&resumed.checkpoint).unwrap();
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn resume_with_other_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    dataset(&dir.path().join("data"), 3, 1);
    let data = load_dataset(&dir.path().join("data")).unwrap();
    let out = dir.path().join("run");
    let report = train::fit(&tiny_config(0), &data, &out, &FitOptions::default(), &mut |_| {}).unwrap();
    let err = train::fit(&tiny_config(5), &data, &out, &FitOptions { resume: Some(report.checkpoint) }, &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("different configuration"));
}

#[test]
fn fit_writes_metrics_samples_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    dataset(&dir.path().join("data"), 4, 1);
    let data = load_dataset(&dir.path().join("data")).unwrap();
    let out = dir.path().join("run");
    let mut seen = 0;
    let report = train::fit(&tiny_config(4), &data, &out, &FitOptions::default(), &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    let csv = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[2].split(',').count(), 9);
    assert!(!lines[2].ends_with(','), "iteration 2 is evaluated: {}", lines[2]);
    assert!(lines[1].ends_with(",,"), "iteration 1 is not evaluated: {}", lines[1]);
    assert!(out.join("checkpoints/best.safetensors").exists());
    assert!(out.join("samples/iter0000004_00003.png").exists());
    assert!(out.join("config.json").exists());
    assert!(report.last_eval.unwrap().psnr.is_finite());
}

#[test]
fn every_variant_trains_one_step_with_finite_loss() {
    let base = tiny_config(1);
    let data = pairs(2);
    for v in AblationVariant::ALL {
        let config = RunConfig {
            model: v.apply(&base.model),
            ..base.clone()
        };
        let mut t = Trainer::new(&config).unwrap();
        let b = t.sample_batch(&data).unwrap();
        assert!(t.step(&b).unwrap().is_finite(), "{v}");
    }
}

#[test]
fn con_a_is_the_default_model_and_backbone_is_smaller() {
    let base = tiny_config(1).model;
    let a = train::build_variant(AblationVariant::FullConA, &base, 5).unwrap();
    let d = CharFormer::new(&base, 5).unwrap();
    assert_eq!(a.params, d.params);
    let x = Tensor::from_images(&[&pairs(1)[0].noisy.to_rgb()]).unwrap();
    assert_eq!(a.forward_tensor(&x).unwrap(), d.forward_tensor(&x).unwrap());
    let b = train::build_variant(AblationVariant::BackboneNoFa, &base, 5).unwrap();
    assert!(b.num_parameters() < a.num_parameters());
}

#[test]
fn visualize_writes_three_images_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let model = CharFormer::new(&tiny_config(1).model, 0).unwrap();
    let data = pairs(2);
    let out = train::visualize_glyphs(&model, &data, dir.path()).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 6);
    let glyph = charformer_core::io::load_image(&out[0].paths[2]).unwrap();
    assert!(glyph.data().iter().all(|&v| v == 0.0 || v == 1.0));
}
