use std::path::Path;
use std::process::{Command, Output};

use charformer_core::io::{load_image, save_image};
use charformer_core::ImageTensor;

const MICRO: &str = r#"{
  "model": { "base_channels": 8, "num_cfb": 2, "rsab_transformer_layers": 1,
             "window_size": 8, "num_heads": 2, "gsnb_depth": 1 },
  "train": { "learning_rate": 0.001, "iterations": 50, "batch_size": 2, "crop_size": 32,
             "perceptual_mode": "off", "eval_every": 25, "sample_images": 1 }
}"#;

fn charformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_charformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let out = charformer(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let t = text(&out);
    for cmd in ["synth", "skeletonize", "train", "denoise", "eval", "ablate", "visualize-glyphs"] {
        assert!(t.contains(cmd), "{cmd} missing from help:\n{t}");
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = charformer(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("Usage"));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"num_cfb": 3}}"#).unwrap();
    let out = charformer(&["--config", p(&bad), "train", "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert!(text(&out).contains("must be even"));
}

#[test]
fn eval_with_mismatched_ids_exits_1_naming_them() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    let img = ImageTensor::filled(8, 8, 1, 0.5);
    for (d, ids) in [(&pred, ["a", "b"]), (&gt, ["a", "c"])] {
        std::fs::create_dir_all(d).unwrap();
        for id in ids {
            save_image(&img, &d.join(format!("{id}.png"))).unwrap();
        }
    }
    let csv = dir.path().join("eval.csv");
    let out = charformer(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--csv", p(&csv)]);
    assert_eq!(out.status.code(), Some(1));
    let t = text(&out);
    assert!(t.contains("\"b\"") && t.contains("\"c\""), "{t}");
    assert!(!csv.exists());
}

#[test]
fn denoise_with_missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = charformer(&[
        "denoise",
        "--ckpt",
        p(&dir.path().join("none.safetensors")),
        "--in",
        p(dir.path()),
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn skeletonize_writes_binary_png() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::from_fn(16, 16, 1, |y, x, _| {
        if (5..10).contains(&y) && (2..14).contains(&x) {
            0.0
        } else {
            1.0
        }
    });
    let (src, dst) = (dir.path().join("bar.png"), dir.path().join("skel.png"));
    save_image(&img, &src).unwrap();
    let out = charformer(&["skeletonize", "--in", p(&src), "--out", p(&dst)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let skel = load_image(&dst).unwrap();
    assert!(skel.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let on = skel.data().iter().filter(|&&v| v == 1.0).count();
    assert!(on > 0 && on < 5 * 12);
}

#[test]
fn synth_train_denoise_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("micro.json");
    std::fs::write(&config, MICRO).unwrap();
    let (data, run, pred, csv) = (root.join("data"), root.join("run"), root.join("pred"), root.join("eval.csv"));

    let out = charformer(&["--seed", "3", "synth", "--out", p(&data), "--count", "8", "--holdout", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("\"seed\": 3"), "resolved config is printed");

    let out = charformer(&["--config", p(&config), "--seed", "3", "train", "--data", p(&data), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 51);
    let ckpt = run.join("checkpoints/latest.safetensors");
    assert!(ckpt.exists());

    let out = charformer(&["denoise", "--ckpt", p(&ckpt), "--in", p(&data.join("noisy")), "--out", p(&pred)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));

    let out = charformer(&["eval", "--pred", p(&pred), "--gt", p(&data.join("clean")), "--csv", p(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let table = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "id,psnr,ssim");
    assert_eq!(lines.len(), 1 + 8 + 1);
    assert!(lines[9].starts_with("mean,"));
    for row in &lines[1..] {
        let psnr: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(psnr.is_finite() && psnr > 0.0, "{row}");
    }

    let glyphs = root.join("glyphs");
    let out = charformer(&["visualize-glyphs", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&glyphs)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(glyphs.join("00006_glyph.png").exists());
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("micro.json");
    std::fs::write(&config, MICRO).unwrap();
    let (data, csv) = (root.join("data"), root.join("ablation.csv"));
    let out = charformer(&["synth", "--out", p(&data), "--count", "4", "--holdout", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let out = charformer(&[
        "--config",
        p(&config),
        "ablate",
        "--variants",
        "full_con_a,backbone_no_fa",
        "--iterations",
        "2",
        "--data",
        p(&data),
        "--csv",
        p(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let table = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,psnr,ssim,final_loss,num_parameters");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("full_con_a,") && lines[2].starts_with("backbone_no_fa,"));

    let out = charformer(&["ablate", "--variants", "nope", "--data", p(&data), "--csv", p(&csv)]);
    assert_eq!(out.status.code(), Some(1));
}
