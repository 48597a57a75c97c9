use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icp_lab::commands::{self, FigureKind, FigureOptions, Metric};
use icp_lab::config::{ConfigBuilder, ExperimentConfig};
use icp_lab::CliError;

#[derive(Parser)]
#[command(name = "icp-lab", version, about = "Train, evaluate and ablate information competing representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration (defaults apply to missing keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set hp.variant=VIB`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set trainer.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig, CliError> {
        let mut b = ConfigBuilder::new();
        if let Some(path) = &self.config {
            b.apply_file(path)?;
        }
        for o in &self.overrides {
            b.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            b.apply_override(&format!("trainer.seed={seed}"))?;
        }
        b.build()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoints, metrics and a run manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        output_dir: PathBuf,
        /// Continue from this checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma list of error, mig, mse, ssim.
        #[arg(long, default_value = "error")]
        metrics: String,
        /// Dataset cache directory to score instead of the run's own data.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also write the report to `<dir>/eval_step_<step>.json`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Weight heatmaps (supervised) or latent traversals (self-supervised).
    Figures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// heatmap or traversal.
        #[arg(long)]
        kind: String,
        /// Traversed coordinates: `all` or e.g. `z0,y1`.
        #[arg(long, default_value = "all")]
        dims: String,
        /// Frames per traversal.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Dataset row to traverse from.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to `<run>/figures`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Variant x seed sweep summarized as one table.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            output_dir,
            resume,
        } => {
            let cfg = config.build()?;
            let m = commands::train(&cfg, &output_dir, resume.as_deref())?;
            println!(
                "trained {} steps; config {}; final checkpoint {}",
                m.steps_completed.unwrap_or(0),
                &m.config_hash[..12],
                output_dir.join(m.artifacts.final_checkpoint.unwrap_or_default()).display()
            );
        }
        Command::Eval {
            checkpoint,
            metrics,
            dataset,
            output_dir,
        } => {
            let metrics = Metric::parse_list(&metrics)?;
            let run = commands::load_run(&checkpoint, dataset.as_deref())?;
            let report = commands::eval(&run, &metrics)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(dir) = output_dir {
                write(&dir.join(format!("eval_step_{:08}.json", run.manifest.step)), &text)?;
            }
            println!("{text}");
        }
        Command::Figures {
            checkpoint,
            kind,
            dims,
            steps,
            index,
            dataset,
            output_dir,
        } => {
            let opts = FigureOptions {
                kind: kind.parse::<FigureKind>()?,
                dims,
                steps,
                index,
            };
            let out = match output_dir.or_else(|| commands::run_dir_of(&checkpoint).map(|d| d.join("figures"))) {
                Some(d) => d,
                None => return Err(CliError::Config("cannot infer a run directory; pass --output-dir".into())),
            };
            let run = commands::load_run(&checkpoint, dataset.as_deref())?;
            for path in commands::figures(&run, &opts, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Ablation { config, output_dir } => {
            let cfg = config.build()?;
            let report = commands::ablation(&cfg, &output_dir)?;
            print!("{}", report.text);
            let failed: Vec<_> = report.rows.iter().filter(|r| r.is_failed()).map(|r| r.variant.name()).collect();
            if !failed.is_empty() {
                return Err(CliError::Failed(format!("failed rows: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("cannot create `{}`: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("icp-lab: {e}");
            e.into()
        }
    }
}
