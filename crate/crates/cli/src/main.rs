//! Command-line driver wiring simulate → prepare → train → eval → ablate →
//! report into reproducible runs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 simulation
//! or processing error, 5 non-finite training abort. Diagnostics go to
//! stderr; stdout carries machine-readable JSON summaries only (except
//! `report`, whose purpose is human-readable text).
//!
//! Setting the `THERMODEPTH_VERBOSE` environment variable (any non-empty
//! value) turns on per-stage progress lines on stderr; it is the only
//! environment variable the tool reads.

mod commands;
mod errors;
mod output;

use clap::{Args, Parser, Subcommand};

use errors::CliError;

#[derive(Parser)]
#[command(name = "thermodepth", version, about = "Synthetic active-thermography defect-depth pipeline")]
struct Cli {
    /// Master seed (simulation) or training seed, depending on the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file for the command.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PrepareFlags {
    /// Keep every N-th frame.
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Subsampled curve length (stripe side).
    #[arg(long, default_value_t = 1024)]
    target_len: usize,
    /// Skip the log-enhancement step.
    #[arg(long)]
    no_enhance: bool,
    /// Model input side; stripe side must be divisible by it.
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    /// Moving-average window (odd).
    #[arg(long, default_value_t = 5)]
    smooth_window: usize,
    /// Polynomial degree of the log-time fit.
    #[arg(long, default_value_t = 5)]
    poly_degree: usize,
}

#[derive(Args)]
struct TrainFlags {
    /// Hybrid loss weight λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip_max_norm: Option<f64>,
    /// Plateau scheduler reduction factor.
    #[arg(long)]
    lr_factor: Option<f64>,
    /// Plateau patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Minimum improvement of the validation loss.
    #[arg(long)]
    min_improve: Option<f64>,
    /// Head dropout rate.
    #[arg(long)]
    dropout: Option<f64>,
    /// Regression head: rrh or single-fc.
    #[arg(long)]
    head: Option<String>,
    /// Train/val/test fractions, e.g. 0.70,0.15,0.15.
    #[arg(long)]
    split_ratios: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled per-pixel curves from the conduction simulator.
    Simulate {
        /// Labeled curves per defect depth.
        #[arg(long, default_value_t = 197)]
        pixels_per_depth: usize,
        /// Uniform per-pixel flux jitter fraction (0 disables).
        #[arg(long, default_value_t = 0.02)]
        flux_jitter: f64,
    },
    /// Reconstruct stripe images (PGM) from a curve dataset.
    Prepare {
        /// Directory holding manifest.json and curve CSVs.
        #[arg(long)]
        data: std::path::PathBuf,
        #[command(flatten)]
        flags: PrepareFlags,
    },
    /// Train the depth regressor on a prepared dataset.
    Train {
        /// Directory holding the prepared manifest and PGMs.
        #[arg(long)]
        data: std::path::PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint on its own test split.
    Eval {
        /// Checkpoint JSON (defaults pair it with <dir>/split.json).
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        /// Prepared dataset directory.
        #[arg(long)]
        data: std::path::PathBuf,
        /// Split file; defaults to split.json next to the checkpoint.
        #[arg(long)]
        split: Option<std::path::PathBuf>,
    },
    /// Run the four-arm ablation grid (enhancement × RRH) on curve data.
    Ablate {
        /// Directory holding manifest.json and curve CSVs.
        #[arg(long)]
        data: std::path::PathBuf,
        #[command(flatten)]
        prepare_flags: PrepareFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
    },
    /// Render a report CSV as aligned text.
    Report {
        /// report_overall.csv, report_per_depth.csv or ablation.csv.
        #[arg(long)]
        input: std::path::PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            pixels_per_depth,
            flux_jitter,
        } => commands::simulate(
            cli.config.as_deref(),
            cli.out.as_deref(),
            cli.seed,
            pixels_per_depth,
            flux_jitter,
        ),
        Command::Prepare { data, flags } => {
            commands::prepare(&data, cli.out.as_deref(), &flags.into())
        }
        Command::Train { data, flags } => commands::train(
            &data,
            cli.out.as_deref(),
            cli.config.as_deref(),
            cli.seed,
            &flags,
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => commands::eval(&checkpoint, &data, split.as_deref(), cli.out.as_deref()),
        Command::Ablate {
            data,
            prepare_flags,
            train_flags,
        } => commands::ablate(
            &data,
            cli.out.as_deref(),
            cli.config.as_deref(),
            cli.seed,
            &prepare_flags.into(),
            &train_flags,
        ),
        Command::Report { input } => commands::report(&input),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

impl From<PrepareFlags> for thermodepth::reconstruct::PrepareOptions {
    fn from(f: PrepareFlags) -> Self {
        Self {
            stride: f.stride,
            target_len: f.target_len,
            smooth_window: f.smooth_window,
            poly_degree: f.poly_degree,
            enhance: !f.no_enhance,
            input_size: f.input_size,
        }
    }
}

impl TrainFlags {
    /// Overlay the flags onto a base training config.
    fn apply(&self, base: &mut thermodepth::training::TrainConfig) -> Result<(), CliError> {
        if let Some(v) = self.lambda {
            base.lambda = v;
        }
        if let Some(v) = self.lr {
            base.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            base.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.clip_max_norm {
            base.clip_max_norm = v;
        }
        if let Some(v) = self.lr_factor {
            base.scheduler.factor = v;
        }
        if let Some(v) = self.patience {
            base.scheduler.patience = v;
        }
        if let Some(v) = self.min_improve {
            base.scheduler.min_improve = v;
        }
        if let Some(spec) = &self.split_ratios {
            let parts: Vec<f64> = spec
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(format!("--split-ratios `{spec}`: {e}")))?;
            if parts.len() != 3 {
                return Err(CliError::Config(format!(
                    "--split-ratios needs three comma-separated values, got `{spec}`"
                )));
            }
            base.split_ratios = [parts[0], parts[1], parts[2]];
        }
        Ok(())
    }

    fn head_kind(&self) -> Result<Option<thermodepth::model::HeadKind>, CliError> {
        match self.head.as_deref() {
            None => Ok(None),
            Some("rrh") => Ok(Some(thermodepth::model::HeadKind::Rrh)),
            Some("single-fc") => Ok(Some(thermodepth::model::HeadKind::SingleFc)),
            Some(other) => Err(CliError::Config(format!(
                "unknown head `{other}` (expected rrh or single-fc)"
            ))),
        }
    }
}
