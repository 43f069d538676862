mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cresnet::data::DatasetName;
use cresnet::Error;

#[derive(Parser, Debug)]
#[command(name = "cresnet", version, about = "Cross-residual networks: cost analysis, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List registry architectures.
    ListArchs {
        #[arg(long, value_enum, default_value_t = ListFormat::Text)]
        format: ListFormat,
    },
    /// Static parameter and FLOP report for an architecture.
    Analyze {
        /// Registry name or path to a TOML spec.
        arch: String,
        #[arg(long, value_parser = parse_size, default_value = "32x32")]
        input_size: [usize; 2],
        #[arg(long, default_value_t = 100)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost reductions of SUBJECT relative to BASELINE.
    Compare {
        subject: String,
        baseline: String,
        #[arg(long, value_parser = parse_size, default_value = "32x32")]
        input_size: [usize; 2],
        #[arg(long, default_value_t = 100)]
        classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an architecture and write logs and checkpoints.
    Train {
        arch: String,
        #[arg(long)]
        dataset: DatasetName,
        /// Falls back to $CRESNET_DATA_DIR, then ./data.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the preset's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Test error of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: DatasetName,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Write an architecture as a TOML spec.
    ExportSpec {
        arch: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ListFormat {
    Text,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Preset {
    Desk,
    Paper,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("invalid dimension {v:?} in {s:?}")),
    };
    Ok([dim(h)?, dim(w)?])
}

/// 2 usage or input, 3 data, format or checkpoint, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnknownArch { .. } | Error::InvalidSpec(_) | Error::SpecParse { .. } | Error::Config(_) => 2,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::CheckpointVersion { .. }
        | Error::CheckpointChecksum
        | Error::CheckpointMismatch(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ListArchs { format } => commands::list_archs(matches!(format, ListFormat::Json)),
        Command::Analyze {
            arch,
            input_size,
            classes,
            format,
            out,
        } => commands::analyze(&arch, input_size, classes, matches!(format, ReportFormat::Csv), out.as_deref()),
        Command::Compare {
            subject,
            baseline,
            input_size,
            classes,
            out,
        } => commands::compare(&subject, &baseline, input_size, classes, out.as_deref()),
        Command::Train {
            arch,
            dataset,
            data_dir,
            preset,
            seed,
            epochs,
            out_dir,
            dry_run,
        } => commands::train(commands::TrainArgs {
            arch,
            dataset,
            data_dir,
            paper: preset == Preset::Paper,
            seed,
            epochs,
            out_dir,
            dry_run,
        }),
        Command::Eval {
            checkpoint,
            dataset,
            data_dir,
        } => commands::eval(&checkpoint, dataset, data_dir),
        Command::ExportSpec { arch, out } => commands::export_spec(&arch, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
