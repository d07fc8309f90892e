use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use interformer::config::Config;
use interformer::data::{synth_generate, SynthSpec};
use interformer::harness::{self, write_report};

#[derive(Parser)]
#[command(name = "interformer", version, about = "Hand and interacting-object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override a key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    /// Preset or file, then `INTERFORMER_*` variables, then `--set`.
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path).with_context(|| format!("reading {}", path.display()))?,
            None => Config::preset(&self.preset)?,
        };
        cfg.apply_env(std::env::vars())?;
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints under `train.checkpoint_dir`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on `data.eval_split` and print a JSON report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Name recorded in the report.
        #[arg(long, default_value = "interformer")]
        name: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Export predicted index images into this directory.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Predict the label map and contact map of one image.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render a synthetic dataset as `<out>/images` and `<out>/labels`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.7)]
        p_left: f64,
        #[arg(long, default_value_t = 0.7)]
        p_right: f64,
        #[arg(long, default_value_t = 0.7)]
        p_hold: f64,
        #[arg(long, default_value_t = 0.3)]
        p_two_hand: f64,
        #[arg(long, default_value_t = 2)]
        max_distractors: usize,
    },
    /// Build `table.md` and `scatter.svg` from metric report files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Print the fully resolved configuration.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { cfg, resume } => {
            let cfg = cfg.load()?;
            let path = harness::train(&cfg, resume.as_deref())?;
            println!("{}", path.display());
        }
        Command::Eval {
            cfg,
            checkpoint,
            name,
            out,
            export,
        } => {
            let cfg = cfg.load()?;
            let report = harness::evaluate(&cfg, &checkpoint, &name, export.as_deref())?;
            let json = report.to_json()?;
            if let Some(path) = out {
                std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{json}");
        }
        Command::Predict {
            cfg,
            checkpoint,
            image,
            out,
        } => {
            let cfg = cfg.load()?;
            let loaded = harness::load_model(&cfg, &checkpoint)?;
            let (labels, boundary) = harness::predict_file(&loaded, &image, &out)?;
            println!("{}\n{}", labels.display(), boundary.display());
        }
        Command::Synth {
            out,
            seed,
            count,
            size,
            p_left,
            p_right,
            p_hold,
            p_two_hand,
            max_distractors,
        } => {
            let spec = SynthSpec {
                seed,
                count,
                size,
                p_left,
                p_right,
                p_hold,
                p_two_hand,
                max_distractors,
            };
            let summary = synth_generate(&spec, &out)?;
            log::info!("wrote {} samples to {}", summary.count, out.display());
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Report { metrics, out } => {
            write_report(&metrics, &out)?;
            println!("{}", out.display());
        }
        Command::ShowConfig { cfg } => print!("{}", cfg.load()?.to_file_string()),
    }
    Ok(())
}
