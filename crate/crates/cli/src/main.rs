use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crace::data::config::{parse_config, render_config};
use crace::data::synthetic::{write_synthetic, SyntheticConfig};
use crace::data::{pnm, Checkpoint, Dataset};
use crace::metrics::{evaluate_dataset, EvalOptions, MeanFMode, PrAggregation};
use crace::network::InputMode;
use crace::trainer::{load_network, predict_image, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "crace",
    version,
    about = "Salient object detection with cross-attention context extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on an `images/ gts/ [depths/]` dataset.
    Train(TrainArgs),
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Run a trained checkpoint on a directory of images.
    Predict(PredictArgs),
    /// Write a procedural dataset.
    GenData(GenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` configuration; defaults are used when omitted.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `total_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Directory for metrics.txt, metrics.csv, per_image.csv and pr_curve.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    label: String,
    /// Average PR points over images instead of pooling counts.
    #[arg(long)]
    per_image_pr: bool,
    /// Mean F at the adaptive threshold instead of over the curve.
    #[arg(long)]
    adaptive_mf: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of `.ppm` images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of `.pgm` depth maps; required for RGB-D checkpoints.
    #[arg(long)]
    depth_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Network input side; defaults to the checkpoint's `input_size`.
    #[arg(long)]
    size: Option<usize>,
    /// Also write every level's saliency and edge maps under `levels/`.
    #[arg(long)]
    dump_levels: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    depth: bool,
    /// Paint objects with the background so only depth separates them.
    #[arg(long)]
    camouflage: bool,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Run(crace::Error),
}

impl From<crace::Error> for Failure {
    fn from(e: crace::Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, crace::Error> {
    std::fs::read_to_string(path).map_err(|e| crace::Error::io(path, e))
}

fn train(args: TrainArgs) -> CliResult {
    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(&Checkpoint::load(path)?)?,
        None => {
            let cfg = match &args.config {
                Some(path) => {
                    let (cfg, step) = parse_config(&read_text(path)?)?;
                    if step != 0 {
                        return Err(Failure::Usage(
                            "`step` belongs in checkpoints, not in a config file".into(),
                        ));
                    }
                    cfg
                }
                None => TrainConfig::default(),
            };
            Trainer::new(cfg)?
        }
    };
    if let Some(steps) = args.steps {
        if steps < trainer.step_index() {
            return Err(Failure::Usage(format!(
                "--steps {steps} is below the checkpoint's step {}",
                trainer.step_index()
            )));
        }
        trainer.config.total_steps = steps;
        trainer.config.validate()?;
    }
    let with_depth = trainer.config.network.mode == InputMode::Rgbd;
    let dataset = Dataset::load(&args.data, with_depth)?;
    log::info!(
        "training {} images for {} steps from step {}",
        dataset.len(),
        trainer.config.total_steps,
        trainer.step_index()
    );
    std::fs::create_dir_all(&args.out).map_err(|e| crace::Error::io(&args.out, e))?;
    let cfg_path = args.out.join("config.txt");
    std::fs::write(&cfg_path, render_config(&trainer.config, 0)).map_err(|e| crace::Error::io(&cfg_path, e))?;
    trainer.run(&dataset, Some(&args.out))?;
    if let Some(last) = trainer.log.last() {
        println!("step {} loss {:.5}", last.step, last.total);
    }
    println!("wrote {}", args.out.join("final.ckpt").display());
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let opts = EvalOptions {
        aggregation: if args.per_image_pr {
            PrAggregation::PerImage
        } else {
            PrAggregation::Dataset
        },
        mean_f: if args.adaptive_mf {
            MeanFMode::Adaptive
        } else {
            MeanFMode::Curve
        },
    };
    let report = evaluate_dataset(&args.pred, &args.gt, opts)?;
    print!("{}", report.to_table(&args.label));
    if let Some(out) = &args.out {
        report.write_to(out, &args.label)?;
    }
    Ok(())
}

fn predict(args: PredictArgs) -> CliResult {
    let (net, cfg) = load_network(&Checkpoint::load(&args.checkpoint)?)?;
    match (net.mode(), &args.depth_dir) {
        (InputMode::Rgb, Some(_)) => {
            return Err(Failure::Usage(
                "--depth-dir given but the checkpoint is an RGB-mode network".into(),
            ))
        }
        (InputMode::Rgbd, None) => {
            return Err(Failure::Usage(
                "the checkpoint is an RGB-D network; pass --depth-dir".into(),
            ))
        }
        _ => {}
    }
    let size = args.size.unwrap_or(cfg.input_size);
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Failure::Usage(format!(
            "--size {size} is not a positive multiple of 32"
        )));
    }
    let images = pnm::list_images(&args.images, "ppm")?;
    if images.is_empty() {
        return Err(crace::Error::Dataset(format!("no .ppm images in {}", args.images.display())).into());
    }
    let depths = args
        .depth_dir
        .as_deref()
        .map(|d| pnm::list_images(d, "pgm"))
        .transpose()?;
    if let Some(d) = &depths {
        let missing: Vec<&str> = images
            .keys()
            .filter(|k| !d.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(crace::Error::Dataset(format!("no depth map for: {}", missing.join(", "))).into());
        }
    }
    for (id, path) in &images {
        let image = pnm::read_rgb(path)?;
        let depth = depths.as_ref().map(|d| pnm::read_gray(&d[id])).transpose()?;
        let pred = predict_image(&net, &image, depth.as_ref(), size)?;
        pnm::write_gray(&args.out.join(format!("{id}.pgm")), pred.map())?;
        if args.dump_levels {
            let dir = args.out.join("levels");
            for (i, (s, e)) in pred.saliency.iter().zip(&pred.edges).enumerate() {
                pnm::write_gray(&dir.join(format!("{id}_s{}.pgm", i + 2)), s)?;
                pnm::write_gray(&dir.join(format!("{id}_e{}.pgm", i + 2)), e)?;
            }
        }
    }
    println!("wrote {} maps to {}", images.len(), args.out.display());
    Ok(())
}

fn gen_data(args: GenArgs) -> CliResult {
    if args.camouflage && !args.depth {
        log::warn!("--camouflage without --depth hides objects from every input");
    }
    let cfg = SyntheticConfig {
        with_depth: args.depth,
        camouflage: args.camouflage,
        ..SyntheticConfig::new(args.n, args.size, args.seed)
    };
    let samples = write_synthetic(&args.out, &cfg)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
