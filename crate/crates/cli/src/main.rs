use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use floodfuse_cli::commands::{self, AblationTable, ExportOptions, Settings, TrainOptions, DEFAULT_BETAS};
use floodfuse_cli::CliError;
use floodfuse_core::embed::EmbeddingStage;

#[derive(Parser)]
#[command(name = "floodfuse", version, about = "Dual-path transformer/CNN flood segmentation experiments")]
struct Cli {
    /// Default output root for run directories.
    #[arg(long, global = true, env = "FLOODFUSE_OUTPUT")]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the train split, select by the monitor, report on test.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue an interrupted run in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Random search over the [tuner] space.
    Tune { config: PathBuf },
    /// K-fold cross-validation with disjoint test folds.
    Kfold {
        config: PathBuf,
        #[arg(short, long, default_value_t = 4)]
        k: usize,
    },
    /// One training per fusion bias factor.
    BetaSweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETAS.to_vec())]
        betas: Vec<f64>,
    },
    /// Ablation table: `modules` or `cnn_widths`.
    Ablate {
        config: PathBuf,
        #[arg(value_parser = parse_table)]
        table: AblationTable,
    },
    /// Write the configured dataset as native tiles.
    SynthData {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-component parameter counts.
    Inventory {
        config: PathBuf,
        /// Directory for inventory.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feature maps and PCA renderings of one tile.
    ExportEmbeddings {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: Option<String>,
        #[arg(long = "level")]
        levels: Vec<usize>,
        #[arg(long = "stage", value_parser = parse_stage)]
        stages: Vec<EmbeddingStage>,
    },
}

fn parse_table(s: &str) -> Result<AblationTable, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn parse_stage(s: &str) -> Result<EmbeddingStage, String> {
    s.parse().map_err(|e: floodfuse_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings {
        output_root: cli.output,
        args: std::env::args().collect(),
    };
    let dir = match cli.command {
        Command::Train { config, seed, resume } => commands::cmd_train(&config, &TrainOptions { seed, resume }, &settings)?,
        Command::Evaluate { config, checkpoint, split } => commands::cmd_evaluate(&config, &checkpoint, &split, &settings)?,
        Command::Tune { config } => commands::cmd_tune(&config, &settings)?,
        Command::Kfold { config, k } => commands::cmd_kfold(&config, k, &settings)?,
        Command::BetaSweep { config, betas } => commands::cmd_beta_sweep(&config, &betas, &settings)?,
        Command::Ablate { config, table } => commands::cmd_ablate(&config, table, &settings)?,
        Command::SynthData { config, out } => commands::cmd_synth_data(&config, &out)?,
        Command::Inventory { config, out } => {
            commands::cmd_inventory(&config, out.as_deref())?;
            return Ok(());
        }
        Command::ExportEmbeddings { config, checkpoint, sample, levels, stages } => commands::cmd_export_embeddings(
            &config,
            &ExportOptions { checkpoint, sample, levels, stages },
            &settings,
        )?,
    };
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
