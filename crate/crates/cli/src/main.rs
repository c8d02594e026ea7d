//! `charformer` command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid arguments, configuration or
//! dataset contents, 2 on runtime failures (I/O, checkpoints, divergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use charformer_core::config::RunConfig;
use charformer_core::io::{list_png_ids, load_dataset, load_image, save_image};
use charformer_core::morphology::{binarize, skeletonize, Polarity};
use charformer_core::synth::{make_dataset, GlyphSpec, NoiseKind, NoiseSpec};
use charformer_nn::checkpoint;
use charformer_nn::train::{self, eval_pairs, AblationRow, FitOptions, MetricsRow};
use charformer_nn::Error;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "charformer", version, about = "Glyph-fusion character image denoising")]
struct Cli {
    /// Master seed; overrides `train.seed` of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON run configuration (`model`, `train`, `data` sections).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic paired dataset.
    Synth(SynthArgs),
    /// Otsu-binarize and thin a PNG (or every PNG of a directory).
    Skeletonize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Strokes are lighter than the background.
        #[arg(long)]
        light_on_dark: bool,
    },
    /// Train a model on a paired dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Denoise every PNG of a directory with a trained checkpoint.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth of the same file names.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Train and score ablation variants with a shared budget.
    Ablate {
        /// Comma-separated variant names, or `all`.
        #[arg(long, default_value = "all")]
        variants: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Overrides `train.iterations` for every variant.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Write noisy / clean / predicted-skeleton triplets for a dataset.
    VisualizeGlyphs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// Trailing samples assigned to the test split.
    #[arg(long)]
    holdout: Option<usize>,
    /// gaussian, speckle, mixed, background or blind_mixed.
    #[arg(long)]
    noise: Option<NoiseKind>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    sigma_lo: Option<f64>,
    #[arg(long)]
    sigma_hi: Option<f64>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    strokes: Option<usize>,
    #[arg(long)]
    stroke_width: Option<usize>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        use charformer_core::Error as Core;
        let msg = e.to_string();
        match e {
            Error::Core(Core::Io { .. }) | Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::Checkpoint { .. } => {
                Failure::Runtime(msg)
            }
            _ => Failure::Usage(msg),
        }
    }
}

impl From<charformer_core::Error> for Failure {
    fn from(e: charformer_core::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn resolve_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn check(config: &RunConfig) -> Outcome {
    let v = config.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("invalid configuration: {}", v.join("; "))))
    }
}

fn print_config(config: &RunConfig) {
    println!("resolved config:\n{}", config.to_json());
}

fn run(cli: Cli) -> Outcome {
    let mut config = resolve_config(&cli)?;
    match cli.command {
        Command::Synth(args) => synth(&mut config, args),
        Command::Skeletonize {
            input,
            out,
            light_on_dark,
        } => {
            print_config(&config);
            let polarity = if light_on_dark {
                Polarity::LightOnDark
            } else {
                Polarity::DarkOnLight
            };
            skeletonize_path(&input, &out, polarity)
        }
        Command::Train {
            data,
            out,
            iterations,
            resume,
        } => {
            if let Some(n) = iterations {
                config.train.iterations = n;
            }
            print_config(&config);
            check(&config)?;
            let dataset = load_dataset(&data)?;
            let mut progress = |row: &MetricsRow| {
                if row.eval_psnr.is_some() || row.iteration == 1 {
                    println!("{}", row.to_csv());
                }
            };
            println!("{}", train::METRICS_HEADER);
            let report = train::fit(&config, &dataset, &out, &FitOptions { resume }, &mut progress)?;
            println!("trained {} iterations; checkpoint {}", report.iterations, report.checkpoint.display());
            if let Some(e) = report.last_eval {
                println!(
                    "eval psnr {:.3} ssim {:.4} (noisy {:.3} / {:.4}) glyph_f1 {:.3}",
                    e.psnr, e.ssim, e.noisy_psnr, e.noisy_ssim, e.glyph_f1
                );
            }
            Ok(())
        }
        Command::Denoise { ckpt, input, out } => {
            let loaded = checkpoint::load(&ckpt)?;
            print_config(&loaded.meta.config);
            let ids = train::denoise_dir(&loaded.model, &input, &out)?;
            println!("denoised {} images into {}", ids.len(), out.display());
            Ok(())
        }
        Command::Eval { pred, gt, csv } => {
            print_config(&config);
            let rows = train::evaluate_dirs(&pred, &gt)?;
            train::write_eval_csv(&rows, &csv)?;
            let n = rows.len() as f64;
            println!(
                "{} images: mean psnr {:.3} ssim {:.4}",
                rows.len(),
                rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                rows.iter().map(|r| r.ssim).sum::<f64>() / n
            );
            Ok(())
        }
        Command::Ablate {
            variants,
            data,
            csv,
            iterations,
        } => {
            if let Some(n) = iterations {
                config.train.iterations = n;
            }
            print_config(&config);
            check(&config)?;
            let variants = train::parse_variants(&variants)?;
            let dataset = load_dataset(&data)?;
            let mut progress = |r: &AblationRow| {
                println!(
                    "{:<16} psnr {:.3} ssim {:.4} loss {:.5} params {}",
                    r.variant.name(),
                    r.psnr,
                    r.ssim,
                    r.final_loss,
                    r.num_parameters
                );
            };
            let rows = train::ablate(&dataset, &variants, &config, &mut progress)?;
            train::write_ablation_csv(&rows, &csv)?;
            Ok(())
        }
        Command::VisualizeGlyphs {
            ckpt,
            data,
            out,
            limit,
        } => {
            let loaded = checkpoint::load(&ckpt)?;
            print_config(&loaded.meta.config);
            let dataset = load_dataset(&data)?;
            let pairs = eval_pairs(&dataset, limit);
            for v in train::visualize_glyphs(&loaded.model, pairs, &out)? {
                println!("{} f1 {:.3} -> {}", v.id, v.f1, v.paths[2].display());
            }
            Ok(())
        }
    }
}

fn synth(config: &mut RunConfig, args: SynthArgs) -> Outcome {
    let d = &mut config.data;
    macro_rules! set {
        ($($field:ident <- $arg:expr),*) => {
            $(if let Some(v) = $arg { d.$field = v; })*
        };
    }
    set!(count <- args.count, holdout <- args.holdout, noise <- args.noise, sigma <- args.sigma,
        sigma_lo <- args.sigma_lo, sigma_hi <- args.sigma_hi, canvas <- args.canvas,
        num_strokes <- args.strokes, stroke_width <- args.stroke_width);
    print_config(config);
    let d = &config.data;
    let glyph = GlyphSpec {
        num_strokes: d.num_strokes,
        stroke_width: d.stroke_width,
        canvas: d.canvas,
        seed: 0,
    };
    let noise = NoiseSpec {
        kind: d.noise,
        sigma: d.sigma,
        sigma_range: (d.sigma_lo, d.sigma_hi),
        seed: 0,
    };
    let manifest = make_dataset(d.count, &glyph, &noise, config.train.seed, d.holdout.min(d.count), &args.out)?;
    println!("wrote {} samples to {}", manifest.samples.len(), args.out.display());
    Ok(())
}

fn skeletonize_file(input: &Path, out: &Path, polarity: Polarity) -> Outcome {
    let img = load_image(input)?;
    let skel = skeletonize(&binarize(&img, polarity)?);
    save_image(&skel.to_image(), out)?;
    Ok(())
}

fn skeletonize_path(input: &Path, out: &Path, polarity: Polarity) -> Outcome {
    if !input.is_dir() {
        return skeletonize_file(input, out, polarity);
    }
    std::fs::create_dir_all(out).map_err(|e| charformer_core::Error::io(out, e))?;
    let ids = list_png_ids(input)?;
    for id in &ids {
        let name = format!("{id}.png");
        skeletonize_file(&input.join(&name), &out.join(&name), polarity)?;
    }
    println!("skeletonized {} images into {}", ids.len(), out.display());
    Ok(())
}
