use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fbxlab::cli::{self, RunOptions};

#[derive(Parser)]
#[command(name = "fbxlab", version, about = "Experiments for one-phase free boundary problems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a config file.
    #[command(after_help = format!("Config keys and defaults:\n{}", cli::defaults_table()))]
    Run {
        config: PathBuf,
        /// Worker threads for sweep sub-runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Allow writing into a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Output directory (overrides run.out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config key, e.g. --set operator.name=bellman.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a stored field against the problem of a config.
    Verify { field: PathBuf, config: PathBuf },
    /// Run the invariant suites for every built-in operator.
    Selftest,
}

fn fail(e: &fbxlab::Error) -> ExitCode {
    eprintln!("error: {e}");
    if let fbxlab::Error::Nonconvergence { history, .. } = e {
        let tail: Vec<String> = history.iter().rev().take(5).map(|r| format!("{r:.3e}")).collect();
        eprintln!("last residuals: {}", tail.join(" "));
    }
    ExitCode::from(cli::exit_code_for(e) as u8)
}

fn report(outcome: &cli::RunOutcome) -> ExitCode {
    match outcome.failures.first() {
        None => ExitCode::SUCCESS,
        Some(first) => {
            eprintln!("assertion failed: {first}");
            ExitCode::from(outcome.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let env_seed = std::env::var("FBXLAB_SEED").ok();
    match args.cmd {
        Cmd::Run { config, jobs, force, out, mut set } => {
            if let Some(dir) = out {
                set.push(format!("run.out={}", dir.display()));
            }
            let cfg = match cli::resolve(&config, env_seed.as_deref(), &set) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match cli::run(&cfg, RunOptions { jobs, force }) {
                Ok(outcome) => {
                    println!("{}: results in {}", cfg.experiment, cfg.out.display());
                    report(&outcome)
                }
                Err(e) => fail(&e),
            }
        }
        Cmd::Verify { field, config } => {
            let outcome = cli::resolve(&config, env_seed.as_deref(), &[]).and_then(|cfg| cli::verify_field(&field, &cfg));
            match outcome {
                Ok(o) => {
                    println!("{}", serde_json::to_string_pretty(&o.results).expect("serializable report"));
                    report(&o)
                }
                Err(e) => fail(&e),
            }
        }
        Cmd::Selftest => {
            let seed = env_seed.and_then(|s| s.parse().ok()).unwrap_or(0);
            match cli::selftest(seed) {
                Ok((lines, failures)) => {
                    for l in &lines {
                        println!("{l}");
                    }
                    for f in &failures {
                        eprintln!("{f}");
                    }
                    if failures.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => fail(&e),
            }
        }
    }
}
