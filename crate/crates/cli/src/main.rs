use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metastream_cli::bench::{self, BenchConfig, Mode, Sweep};
use metastream_cli::{CliError, RunOptions};

/// Run, inspect and benchmark stream pipelines.
#[derive(Parser, Debug)]
#[command(name = "metastream", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Deploy a pipeline and print what the sink delivered.
    Run {
        /// e.g. "range(1,100) ~> filter(even) ~> map(square) ~> collect"
        expr: String,
        /// Run-time behavior: none, identity, logging, pull, smartpull, encrypt:<hexkey>.
        #[arg(long, default_value = "none")]
        behavior: String,
        /// Structural behavior: none, fusion, fusion-all, parallel:<n>, timestamp.
        #[arg(long, default_value = "none")]
        structural: String,
        /// Write the message trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Single-threaded, reproducible scheduling.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the instruction sequence and the compiled DAG.
    Compile {
        expr: String,
        /// Structural behavior applied during compilation.
        #[arg(long, visible_alias = "structural", default_value = "none")]
        behavior: String,
    },
    /// Check a pipeline against the deployability constraints.
    Validate { expr: String },
    /// Time the meta-enabled runtime against the fast path.
    Bench {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Operator count, `n` or `lo..hi`.
        #[arg(long)]
        ops: Option<Sweep>,
        /// Values per stream, `n` or `lo..hi`.
        #[arg(long)]
        values: Option<Sweep>,
        /// Points along the swept axis.
        #[arg(long, default_value_t = 6)]
        points: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Behavior of the meta variant.
        #[arg(long, default_value = "identity")]
        behavior: String,
        /// Sweep DAG sizes up to 2000 instead of 500.
        #[arg(long)]
        full: bool,
        /// Write rows here instead of standard output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            expr,
            behavior,
            structural,
            trace,
            deterministic,
            seed,
        } => {
            let options = RunOptions {
                behavior,
                structural,
                trace,
                deterministic,
                seed,
            };
            if let Some(value) = metastream_cli::run(&expr, &options)? {
                println!("{value}");
            }
        }
        Command::Compile { expr, behavior } => print!("{}", metastream_cli::compile(&expr, &behavior)?),
        Command::Validate { expr } => print!("{}", metastream_cli::validate(&expr)?),
        Command::Bench {
            mode,
            ops,
            values,
            points,
            reps,
            behavior,
            full,
            csv,
        } => {
            let mut config = BenchConfig::new(mode);
            if full && mode == Mode::Dagsize {
                config.ops = Sweep { lo: 0, hi: 2000 };
            }
            config.ops = ops.unwrap_or(config.ops);
            config.values = values.unwrap_or(config.values);
            config.points = points;
            config.reps = reps;
            config.behavior = behavior;
            let rows = bench::run_bench(&config, |row| {
                eprintln!("{} ops={} values={} {}: {:.3} ms", row.mode, row.ops, row.values, row.variant, row.elapsed_ms);
            })?;
            match csv {
                Some(path) => {
                    bench::write_csv(&rows, File::create(path)?)?;
                    print!("{}", bench::summary(&rows));
                }
                None => {
                    bench::write_csv(&rows, io::stdout().lock())?;
                    eprint!("{}", bench::summary(&rows));
                }
            }
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
