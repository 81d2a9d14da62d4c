use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairfed::cli::{self, ExperimentSpec};
use fairfed::Result;

/// Federated learning simulator for fairness-aware aggregation.
#[derive(Parser)]
#[command(name = "fairfed", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write each client's samples under <out>/data.
        #[arg(long)]
        dump_data: bool,
        /// Check the strategy against oracles instead of training.
        #[arg(long, hide = true)]
        verify: bool,
    },
    /// Run every point of the experiment's [sweep] grid for every seed.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Compare per-client accuracies of two finished runs.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run {
            spec,
            out,
            seed,
            dump_data,
            verify,
        } => {
            let spec = ExperimentSpec::load(&spec)?;
            if verify {
                let checks = cli::verify(&spec, seed)?;
                let mut ok = true;
                for c in &checks {
                    emit(format!(
                        "{} {} ({:.3e} <= {:.1e})",
                        if c.passed { "ok" } else { "FAILED" },
                        c.name,
                        c.value,
                        c.tolerance
                    ));
                    ok &= c.passed;
                }
                return Ok(if ok { cli::EXIT_OK } else { cli::EXIT_FAILURE });
            }
            let summary = cli::run(&spec, &out, seed, dump_data)?;
            emit(format!(
                "{}: mean {:.2} std {:.2} worst {:.2} worst10 {:.2} worst20 {:.2} best10 {:.2}",
                summary.run_id,
                summary.report.mean,
                summary.report.std,
                summary.report.worst,
                summary.report.worst10,
                summary.report.worst20,
                summary.report.best10
            ));
        }
        Command::Sweep { spec, out, seeds } => {
            let spec = ExperimentSpec::load(&spec)?;
            let summaries = cli::sweep(&spec, &out, &seeds)?;
            for (rank, s) in summaries.iter().enumerate() {
                emit(format!(
                    "{:>3} {:<24} worst10 {:.2} ± {:.2}  mean {:.2} ± {:.2}",
                    rank + 1,
                    s.label,
                    s.worst10_mean,
                    s.worst10_std,
                    s.mean_mean,
                    s.mean_std
                ));
            }
        }
        Command::Compare { baseline, candidate, out } => {
            let report = cli::compare(&baseline, &candidate)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(path) => std::fs::write(&path, json + "\n").map_err(|e| fairfed::Error::Io { path, source: e })?,
                None => emit(json),
            }
        }
    }
    Ok(cli::EXIT_OK)
}

/// Prints a line to stdout, ignoring a closed pipe.
fn emit(line: String) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FAIRFED_LOG", "warn")).init();
    let args = Args::parse();
    let code = match execute(args.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
