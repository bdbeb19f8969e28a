use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rga_cli::commands::{
    cmd_bench, cmd_eval, cmd_export_attn, cmd_export_relations, cmd_gradcheck, cmd_param_count,
    cmd_train, GradcheckOptions,
};
use rga_cli::config::RunConfig;
use rga_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "rga",
    about = "Relation-aware global attention workbench: gradient checks, toy re-identification training, attention exporters, and benchmarks",
    version
)]
struct Cli {
    /// Plain-text key=value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set module=nl.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every analytic gradient against central differences.
    Gradcheck {
        /// Also check the full configured model on a 2-image batch.
        #[arg(long)]
        full_model: bool,
        /// Probe at most this many elements per parameter tensor.
        #[arg(long, value_name = "N")]
        max_samples: Option<usize>,
        /// Test hook: corrupt the named parameter's analytic gradient.
        #[arg(long, value_name = "PARAM", hide = true)]
        corrupt: Option<String>,
        /// Scale factor for the corrupted gradient.
        #[arg(long, default_value_t = 10.0, hide = true)]
        corrupt_scale: f64,
    },
    /// Train on the synthetic identities; write a checkpoint and loss trace.
    Train {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long, value_name = "FILE")]
        trace: PathBuf,
    },
    /// Evaluate a checkpoint: CMC ranks and mean average precision.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Metric CSV.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
    /// Export one block's spatial attention map for one image (PGM + CSV).
    ExportAttn {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Index into the generated dataset.
        #[arg(long)]
        image: usize,
        /// Block whose attention map to export.
        #[arg(long)]
        block: usize,
        #[arg(long, value_name = "FILE")]
        pgm: PathBuf,
        #[arg(long, value_name = "FILE")]
        csv: PathBuf,
    },
    /// Export pairwise-relation rows for chosen target positions.
    ExportRelations {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long)]
        block: usize,
        /// Comma-separated flat positions (row-major over the block's map).
        #[arg(long, value_delimiter = ',', value_name = "I,J,...")]
        targets: Vec<usize>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Print parameter counts for the configured model.
    ParamCount,
    /// Time module forward passes over a size sweep and write a CSV.
    Bench {
        /// Comma-separated sizes as NxC (positions x channels).
        #[arg(long, value_delimiter = ',', value_name = "NxC,...", default_values_t = [
            String::from("64x32"), String::from("256x64"), String::from("1024x128")
        ])]
        sizes: Vec<String>,
        /// Timed repetitions after one warmup.
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, value_name = "FILE")]
        csv: PathBuf,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{s}'")))
        })
        .collect()
}

fn parse_sizes(raw: &[String]) -> Result<Vec<(usize, usize)>> {
    raw.iter()
        .map(|s| {
            let parse = |part: &str| {
                part.parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("bad size '{s}', expected NxC")))
            };
            let (n, c) = s
                .split_once('x')
                .ok_or_else(|| CliError::Usage(format!("bad size '{s}', expected NxC")))?;
            Ok((parse(n)?, parse(c)?))
        })
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    let overrides = parse_overrides(&cli.set)?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    write!(out, "# resolved configuration\n{}\n", cfg.echo())
        .map_err(|e| CliError::Failed(format!("write: {e}")))?;
    match cli.command {
        Command::Gradcheck {
            full_model,
            max_samples,
            corrupt,
            corrupt_scale,
        } => {
            let opts = GradcheckOptions {
                full_model,
                max_samples,
                corrupt: corrupt.map(|name| (name, corrupt_scale)),
            };
            cmd_gradcheck(&cfg, &opts, &mut out)
        }
        Command::Train { checkpoint, trace } => {
            cmd_train(&cfg, &checkpoint, &trace, &mut out).map(|_| true)
        }
        Command::Eval { checkpoint, report } => {
            cmd_eval(&cfg, &checkpoint, &report, &mut out).map(|_| true)
        }
        Command::ExportAttn {
            checkpoint,
            image,
            block,
            pgm,
            csv,
        } => cmd_export_attn(&cfg, &checkpoint, image, block, &pgm, &csv, &mut out).map(|_| true),
        Command::ExportRelations {
            checkpoint,
            image,
            block,
            targets,
            out_dir,
        } => cmd_export_relations(&cfg, &checkpoint, image, block, &targets, &out_dir, &mut out)
            .map(|_| true),
        Command::ParamCount => cmd_param_count(&cfg, &mut out).map(|_| true),
        Command::Bench { sizes, runs, csv } => {
            let sizes = parse_sizes(&sizes)?;
            cmd_bench(&cfg, &sizes, runs, &csv, &mut out).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
