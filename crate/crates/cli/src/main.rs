use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flowpath::bench::{self, BenchError, BenchOutput, RunOptions};
use flowpath::exec::{DispatchMode, SubmitMode};
use flowpath::hardware::ClusterConfig;

#[derive(Parser)]
#[command(
    name = "flowpath",
    version,
    about = "Simulate single-controller dataflow dispatch on an accelerator fabric"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Submit {
    Opbyop,
    Chained,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dispatch {
    Sequential,
    Parallel,
}

#[derive(clap::Args)]
struct Outputs {
    /// Cluster topology JSON; defaults to one island of 4 hosts x 8 devices.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Chrome trace-event JSON of the traced run.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Results JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Newline-delimited JSON event log of the traced run.
    #[arg(long)]
    event_log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named benchmark.
    Bench {
        /// One of: dispatch, crossover, parity, pipeline, multitenancy, share, deadlock.
        name: String,
        /// Workload parameters JSON; missing fields keep their defaults.
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        io: Outputs,
    },
    /// Run a traced program JSON.
    Run {
        program: PathBuf,
        #[arg(long, default_value_t = 1)]
        runs: u32,
        #[arg(long, value_enum, default_value_t = Submit::Chained)]
        submit: Submit,
        #[arg(long, value_enum, default_value_t = Dispatch::Parallel)]
        dispatch: Dispatch,
        #[command(flatten)]
        io: Outputs,
    },
}

enum Failure {
    Input(String),
    Run(String),
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        if e.is_user_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Run(e.to_string())
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn cluster(path: Option<&Path>) -> Result<ClusterConfig, Failure> {
    match path {
        None => Ok(ClusterConfig::uniform(1, 4, 8)),
        Some(p) => ClusterConfig::from_json_str(&read(p)?).map_err(|e| Failure::Input(format!("{}: {e}", p.display()))),
    }
}

fn emit(out: &BenchOutput, io: &Outputs) -> Result<(), Failure> {
    let results = out.results.to_json();
    match &io.out {
        Some(p) => write(p, &results)?,
        None => print!("{results}"),
    }
    if let Some(p) = &io.trace_out {
        write(p, &out.trace_json())?;
    }
    if let Some(p) = &io.event_log {
        write(p, &out.events_ndjson())?;
    }
    Ok(())
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Bench {
            name,
            workload,
            seed,
            io,
        } => {
            let cluster = cluster(io.config.as_deref())?;
            let w = match &workload {
                None => None,
                Some(p) => Some(
                    serde_json::from_str::<serde_json::Value>(&read(p)?)
                        .map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?,
                ),
            };
            let out = bench::run(&name, &cluster, w.as_ref(), seed)?;
            emit(&out, &io)
        }
        Command::Run {
            program,
            runs,
            submit,
            dispatch,
            io,
        } => {
            let cluster = cluster(io.config.as_deref())?;
            let opts = RunOptions {
                runs,
                submit: match submit {
                    Submit::Opbyop => SubmitMode::OpByOp,
                    Submit::Chained => SubmitMode::Chained,
                },
                dispatch: match dispatch {
                    Dispatch::Sequential => DispatchMode::Sequential,
                    Dispatch::Parallel => DispatchMode::Parallel,
                },
                ..RunOptions::default()
            };
            let out = bench::run_program(&read(&program)?, &cluster, &opts)?;
            emit(&out, &io)
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
