//! Command-line surface: train, evaluate, visualize, and run the
//! erasing-threshold ablation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deep_miner::config::{load_config, TrainConfig};
use deep_miner::data::{load_dir, load_image, synth_dataset};
use deep_miner::metrics::evaluate_model;
use deep_miner::model::load_checkpoint;
use deep_miner::train::{ablate_threshold, train_with_logger};
use deep_miner::viz::visualize_masks;

#[derive(Parser)]
#[command(
    name = "deep-miner",
    about = "Multi-branch re-identification: train, evaluate, visualize, ablate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a directory or the synthetic dataset.
    Eval(EvalArgs),
    /// Dump per-branch activation heatmaps plus erasing saliency and masks.
    Viz(VizArgs),
    /// Train one model per erasing threshold and tabulate mAP / Rank-1.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// `synth`, or a directory holding `query/` and `gallery/` subdirectories.
    #[arg(long)]
    data: String,
    /// Largest rank reported in the CMC curve.
    #[arg(long, default_value_t = 5)]
    k_max: usize,
    /// Seed for the synthetic dataset (`--data synth`).
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PNG/JPEG/PPM/BMP); resized to the model's input extent.
    #[arg(long)]
    image: PathBuf,
    /// Output directory for the PPM files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Config file; must describe a single-erased-branch model.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated thresholds, e.g. `0.5,0.6,0.7,0.8,0.9,0.99`.
    #[arg(long)]
    taus: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> deep_miner::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Viz(args) => cmd_viz(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn cmd_train(args: TrainArgs) -> deep_miner::Result<()> {
    let mut cfg: TrainConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let outcome = train_with_logger(&cfg, |r| {
        let eval = match r.eval {
            Some((map, rank1)) => format!("  mAP {map:.4}  Rank-1 {rank1:.4}"),
            None => String::new(),
        };
        let branches = r
            .branch_means
            .iter()
            .map(|b| format!("{}={:.3}", b.branch, b.total))
            .collect::<Vec<_>>()
            .join(" ");
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:>10.4}  [{branches}]{eval}",
            r.epoch, r.lr, r.mean_total
        );
    })?;
    if let Some((epoch, map)) = outcome.history.best {
        println!("best epoch {epoch}: mAP {map:.6}");
    }
    if let Some(eval) = &outcome.history.final_eval {
        print!("{}", eval.format_report());
    }
    if let Some(path) = &cfg.checkpoint {
        println!("checkpoint: {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> deep_miner::Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (h, w) = (model.cfg().input_h, model.cfg().input_w);
    let result = if args.data == "synth" {
        // same protocol as training-time evaluation: hold out the last 4
        // samples of each of the 8 toy identities, query = gallery = holdout
        let full = synth_dataset(8, 16, 2, h, w, args.seed)?;
        let (_, eval_ds) = full.split_holdout(4);
        evaluate_model(&model, &eval_ds, &eval_ds, args.k_max)?
    } else {
        let base = PathBuf::from(&args.data);
        let query = base.join("query");
        let gallery = base.join("gallery");
        if !query.is_dir() || !gallery.is_dir() {
            return Err(deep_miner::Error::Config(format!(
                "{} must contain query/ and gallery/ subdirectories",
                base.display()
            )));
        }
        let q = load_dir(&query, h, w)?;
        let g = load_dir(&gallery, h, w)?;
        for (path, why) in q.skipped.iter().chain(&g.skipped) {
            eprintln!("skipped {}: {why}", path.display());
        }
        evaluate_model(&model, &q.dataset, &g.dataset, args.k_max)?
    };
    print!("{}", result.format_report());
    Ok(())
}

fn cmd_viz(args: VizArgs) -> deep_miner::Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let image = load_image(&args.image, model.cfg().input_h, model.cfg().input_w)?;
    let files = visualize_masks(&model, &image, &args.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> deep_miner::Result<()> {
    let cfg = load_config(&args.config)?;
    let taus: Vec<f64> = args
        .taus
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| deep_miner::Error::Config(format!("bad tau '{s}'")))
        })
        .collect::<deep_miner::Result<_>>()?;
    let report = ablate_threshold(&cfg, &taus)?;
    print!("{report}");
    Ok(())
}
