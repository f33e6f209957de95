//! `ergolab`: runs scenarios and audits, writing CSV and JSON reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ergolab::mc::with_workers;
use ergolab::report::ReportDir;
use ergolab::scenario::{Scenario, BUILTIN};
use ergolab::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "ergolab", version, about = "Ergodic BSDE laboratory for the truncated stochastic heat equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file, or the name of a built-in scenario.
    #[arg(long, global = true, default_value = "heat")]
    config: String,
    /// Override a scenario key, e.g. `--set solver.nodes=41`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent directory of the run directory.
    #[arg(long, global = true, default_value = "reports")]
    out: PathBuf,
    /// Replaces the scenario's base seed (at most 2^63 - 1).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Only errors and the final verdict are printed.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// One forward path with the decay of the linear part.
    Simulate,
    /// Discounted value function at one discount.
    SolveAlpha {
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
    },
    /// Vanishing-discount ladder: lambda trace and the ergodic pair.
    Ergodic,
    /// Coupling checks and total-variation decay.
    Coupling,
    /// Hitting probabilities and the empirical invariant law.
    Recurrence,
    /// Feedback policy against the alternate library.
    Control,
    /// EBSDE and mild-HJB residuals of the ergodic pair.
    HjbCheck,
    /// Every acceptance criterion; exits 1 on any failure.
    FullAudit {
        /// Comma-separated subset of criteria.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u32>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveAlpha { .. } => "solve-alpha",
            Command::Ergodic => "ergodic",
            Command::Coupling => "coupling",
            Command::Recurrence => "recurrence",
            Command::Control => "control",
            Command::HjbCheck => "hjb-check",
            Command::FullAudit { .. } => "full-audit",
        }
    }
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Toml(_) | Error::InvalidModel(_))
}

fn load_scenario(c: &Common) -> ergolab::Result<Scenario> {
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let path = Path::new(&c.config);
    if path.exists() {
        Scenario::load(path, &overrides)
    } else if BUILTIN.contains(&c.config.as_str()) {
        Scenario::builtin(&c.config, &overrides)
    } else {
        Err(Error::Config(format!(
            "`{}` is neither a file nor a built-in scenario ({})",
            c.config,
            BUILTIN.join(", ")
        )))
    }
}

/// `<out>/<id>_<UTC timestamp>`, suffixed when the name is taken.
fn run_dir(out: &Path, id: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = out.join(format!("{id}_{stamp}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    dir
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    let scenario = match load_scenario(&cli.common) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut dir = match ReportDir::create(&run_dir(&cli.common.out, &scenario.id), &scenario) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("cannot create output directory: {e}");
            return ExitCode::from(EXIT_FAIL);
        }
    };
    let workers = cli.common.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let quiet = cli.common.quiet;
    let command = cli.command.clone();
    let result = with_workers(workers, || commands::run(&command, &scenario, &mut dir, quiet));
    match result {
        Ok(pass) => {
            if !quiet {
                for f in dir.files() {
                    println!("wrote {}", f.display());
                }
            }
            match pass {
                Some(false) => {
                    println!("{}: FAIL", command.name());
                    ExitCode::from(EXIT_FAIL)
                }
                Some(true) => {
                    println!("{}: PASS", command.name());
                    ExitCode::SUCCESS
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            dir.discard();
            eprintln!("{} aborted: {e}", command.name());
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_FAIL })
        }
    }
}
