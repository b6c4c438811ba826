//! Command-line surface: synthetic dataset generation, training,
//! evaluation, the ablation runner, and overlay rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ntre::config::TrainConfig;
use ntre::data::{generate_synthetic_dataset, Dataset, SyntheticSpec};
use ntre::eval::{ablate, evaluate, render_episode_overlay, AblationConfig, MetricsReport};
use ntre::train::{train, Checkpoint};

#[derive(Parser)]
#[command(
    name = "ntre",
    about = "Few-shot segmentation with background and distractor elimination"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes-with-distractors dataset.
    GenSynth {
        /// Flat key=value spec file ("-" for built-in defaults).
        spec_file: String,
        out_dir: PathBuf,
    },
    /// Train a model from a flat key=value config file.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on seeded novel-split episodes.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, short, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory (defaults to the checkpoint's embedded path).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also append a CSV row (with header if the file is new) here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate the four ablation variants plus the
    /// negative-policy comparison.
    Ablate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
        folds: Vec<usize>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        policy_seeds: usize,
        /// Write the full report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render a query overlay (TP red, FP green, FN blue) for one episode.
    Overlay {
        checkpoint: PathBuf,
        /// Sampling seed that identifies the episode.
        episode_id: u64,
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn run() -> ntre::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenSynth { spec_file, out_dir } => {
            let spec = if spec_file == "-" {
                SyntheticSpec::default()
            } else {
                SyntheticSpec::from_file(spec_file.as_ref())?
            };
            generate_synthetic_dataset(&spec, &out_dir)?;
            println!(
                "wrote {} images over {} classes to {}",
                spec.num_classes * spec.images_per_class,
                spec.num_classes,
                out_dir.display()
            );
        }
        Command::Train { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let outcome = train(&cfg)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "trained {} steps: L_T {:.4}, L_BG {:.4}, L_PCL {:.4}, total {:.4}",
                    outcome.log.len(),
                    last.l_t,
                    last.l_bg,
                    last.l_pcl,
                    last.total
                );
            }
            match outcome.checkpoint_path {
                Some(p) => println!("checkpoint: {}", p.display()),
                None => println!("no out_dir configured; checkpoint not written"),
            }
        }
        Command::Eval {
            checkpoint,
            fold,
            k,
            pairs,
            seed,
            dataset,
            csv,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data_dir = dataset.unwrap_or_else(|| ckpt.config.dataset.clone());
            let ds = Dataset::load(&data_dir)?;
            let report = evaluate(&ckpt, &ds, fold, k, pairs, seed)?;
            println!("{}", report.to_json());
            if let Some(path) = csv {
                let mut text = if path.exists() {
                    std::fs::read_to_string(&path).map_err(|e| ntre::Error::io(&path, e))?
                } else {
                    format!("{}\n", MetricsReport::csv_header())
                };
                text.push_str(&report.csv_row());
                text.push('\n');
                std::fs::write(&path, text).map_err(|e| ntre::Error::io(&path, e))?;
            }
        }
        Command::Ablate {
            config,
            seeds,
            folds,
            pairs,
            policy_seeds,
            json,
        } => {
            let base = TrainConfig::from_file(&config)?;
            let mut ab = AblationConfig::new(base);
            ab.seeds = seeds;
            ab.folds = folds;
            ab.policy_seeds = policy_seeds;
            if let Some(p) = pairs {
                ab.eval_pairs = p;
            }
            let report = ablate(&ab)?;
            println!("{}", report.table());
            if let Some(path) = json {
                std::fs::write(&path, report.to_json()).map_err(|e| ntre::Error::io(&path, e))?;
            }
        }
        Command::Overlay {
            checkpoint,
            episode_id,
            out,
            dataset,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data_dir = dataset.unwrap_or_else(|| ckpt.config.dataset.clone());
            let ds = Dataset::load(&data_dir)?;
            render_episode_overlay(&ckpt, &ds, episode_id, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
