use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use aepg::config::ExperimentConfig;
use aepg::experiment::{run_experiment, run_sweep};
use aepg::verify::{run_all, Fault};
use aepg::Error;
use clap::{Parser, Subcommand, ValueEnum};

/// Fallback output directory when neither `--out` nor the config sets one.
const OUT_ENV: &str = "AEPG_OUT_DIR";

#[derive(Parser)]
#[command(name = "aepg", version, about = "EPG / aEPG experiments on class-incremental benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Run {
        config: PathBuf,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory; overrides the config and $AEPG_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the analytical identities with fixed seeds.
    Verify {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<InjectedFault>,
    },
    /// Run one experiment per value of a config parameter.
    Sweep {
        config: PathBuf,
        /// One of alpha_const, tau, eta, loss.kind, schedule.kind.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectedFault {
    EpgSign,
}

fn output_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("aepg-runs"))
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| exit_for(&e))
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, jobs, out } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let out = output_dir(out, &cfg);
            match run_experiment(&cfg, &out, jobs) {
                Ok(s) => {
                    let std = s.final_accuracy.std.map_or("n/a".into(), |v| format!("{v:.4}"));
                    println!(
                        "{} seed(s): A_T {:.4} ± {std}, avg acc {:.4}, final entropy {:.4}",
                        s.seeds.len(),
                        s.final_accuracy.mean,
                        s.average_accuracy.mean,
                        s.final_entropy.mean
                    );
                    println!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::Verify { inject_fault } => {
            let fault = match inject_fault {
                Some(InjectedFault::EpgSign) => Fault::EpgSign,
                None => Fault::None,
            };
            let start = Instant::now();
            let results = run_all(fault);
            for r in &results {
                println!("{r}");
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            println!("{} checks in {:.1}s", results.len(), start.elapsed().as_secs_f64());
            if failed.is_empty() {
                println!("all checks passed");
                ExitCode::SUCCESS
            } else {
                println!("failed: {}", failed.join(", "));
                ExitCode::from(1)
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            jobs,
            out,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let out = output_dir(out, &cfg);
            match run_sweep(&cfg, &param, &values, &out, jobs) {
                Ok(rows) => {
                    for r in rows {
                        println!(
                            "{param}={}: A_T {:.4}, final entropy {:.4}",
                            r.value, r.summary.final_accuracy.mean, r.summary.final_entropy.mean
                        );
                    }
                    println!("wrote {}", out.join("sweep.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
    }
}
