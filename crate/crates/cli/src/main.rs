use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tabgen::ablate::{self, AblationGrid};
use tabgen::decode::{self, DecodeArgs};
use tabgen::eval::{self, parse_mode, EvalArgs};
use tabgen::{gen_data, train, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "tabgen",
    version,
    about = "Text-to-table extraction with permutation-trained decoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a spec file.
    GenData {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume) the run described by a config file.
    Train {
        config: PathBuf,
        /// Continue from the latest checkpoint in the checkpoint directory.
        #[arg(long)]
        resume: bool,
    },
    /// Decode tables for every record of a dataset.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decoding TOML overriding the settings stored with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-record commit traces here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Cells committed per outer iteration.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score predictions against gold tables.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// `assignment` or `keyed:<column>`.
        #[arg(long, default_value = "assignment")]
        mode: String,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print an aligned text table.
        #[arg(long)]
        pretty: bool,
        /// Score even if the predictions came from a different corpus.
        #[arg(long)]
        force: bool,
    },
    /// Run an ablation grid and summarise it over seeds.
    Ablate {
        grid: PathBuf,
        #[arg(long)]
        pretty: bool,
    },
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { spec, out } => {
            let n = gen_data::run(&spec, &out)?;
            eprintln!("wrote {n} records to {}", out.display());
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let o = train::run(&cfg, resume)?;
            eprintln!("step {} checkpoint {}", o.step, o.checkpoint.display());
        }
        Command::Decode {
            checkpoint,
            dataset,
            out,
            config,
            trace,
            k,
        } => {
            let args = DecodeArgs {
                checkpoint,
                dataset,
                out,
                config,
                trace,
                k,
            };
            let meta = decode::run(&args)?;
            eprintln!(
                "decoded {} records in {} outer iterations",
                meta.n_records, meta.outer_iterations
            );
        }
        Command::Eval {
            pred,
            gold,
            mode,
            out,
            pretty,
            force,
        } => {
            let to_stdout = out.is_none();
            let args = EvalArgs {
                pred,
                gold,
                mode: parse_mode(&mode)?,
                out,
                force,
            };
            let report = eval::run(&args)?;
            if pretty {
                print!("{}", eval::render(&report.score));
            } else if to_stdout {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            }
        }
        Command::Ablate { grid, pretty } => {
            let grid = AblationGrid::load(&grid)?;
            let rows = ablate::run(&grid)?;
            if pretty {
                print!("{}", ablate::render(&rows));
            } else {
                println!("{}", serde_json::to_string_pretty(&rows).expect("summary serializes"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
