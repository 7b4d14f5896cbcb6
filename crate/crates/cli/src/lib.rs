//! Command-line driver: one subcommand per pipeline stage, outputs under
//! `--out`, and a `manifest.json` describing every run.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rec_mfg_core::principal::ContractFamily;
use serde::Serialize;

mod commands;
pub mod config;
pub mod manifest;

use commands::{Ctx, Status};
use config::ConfigError;
use manifest::RunManifest;

pub const THREADS_ENV: &str = "REC_MFG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rec-mfg", version, about = "Mean-field REC market laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to REC_MFG_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    Linear,
    Softplus,
    SoftplusPerPopulation,
    /// The penalties in the config, evaluated once.
    Fixed,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the mean-field equilibrium for the config's penalties.
    SolveMfg {
        #[command(flatten)]
        common: Common,
        /// Also write the full feedback tables.
        #[arg(long)]
        dump_feedback: bool,
    },
    /// Simulate N agents under the equilibrium feedback.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(short = 'N', default_value_t = 1000)]
        n: usize,
        /// Write every agent path to paths.csv.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Compare the solver with the linear closed form or the Riccati oracle.
    OracleCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Principal's objective and reservation status for the config's penalties.
    EvaluateContract {
        #[command(flatten)]
        common: Common,
    },
    /// Principal's first-order-condition residuals for the config's penalties.
    VerifyFocs {
        #[command(flatten)]
        common: Common,
    },
    /// Nelder-Mead search over a contract family.
    OptimizeContract {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "softplus")]
        family: Family,
        /// Maximum number of equilibrium solves.
        #[arg(long, default_value_t = 60)]
        budget: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SolveMfg { common, .. }
            | Command::Simulate { common, .. }
            | Command::OracleCheck { common }
            | Command::EvaluateContract { common }
            | Command::VerifyFocs { common }
            | Command::OptimizeContract { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::SolveMfg { .. } => "solve-mfg",
            Command::Simulate { .. } => "simulate",
            Command::OracleCheck { .. } => "oracle-check",
            Command::EvaluateContract { .. } => "evaluate-contract",
            Command::VerifyFocs { .. } => "verify-focs",
            Command::OptimizeContract { .. } => "optimize-contract",
        }
    }
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    subcommand: &'a str,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    history: Option<&'a [f64]>,
}

fn threads(flag: Option<usize>) -> Result<usize, String> {
    if let Some(n) = flag {
        return if n == 0 {
            Err("--threads must be >= 1".into())
        } else {
            Ok(n)
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{THREADS_ENV}={v:?} is not a positive integer")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let start = Instant::now();
    let name = cli.command.name();
    let common = cli.command.common();
    let n_threads = match threads(common.threads) {
        Ok(n) => n,
        Err(m) => {
            eprintln!("error: {m}");
            return 2;
        }
    };
    let (mut exp, config_bytes) = match config::load(&common.config) {
        Ok(v) => v,
        Err(e) => {
            match &e {
                ConfigError::Invalid(r) => {
                    for v in &r.violations {
                        eprintln!("error: {v}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            return e.exit_code();
        }
    };
    if let Some(seed) = common.seed {
        exp.market.rng_seed = seed;
    }
    let seed = exp.market.rng_seed;
    if let Err(e) = std::fs::create_dir_all(&common.out) {
        eprintln!("error: cannot create {}: {e}", common.out.display());
        return 1;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(n_threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    let defaults_applied = exp.defaults_applied.clone();
    let mut ctx = Ctx {
        exp,
        out: common.out.clone(),
        written: Vec::new(),
    };
    let result = pool.install(|| match &cli.command {
        Command::SolveMfg { dump_feedback, .. } => commands::solve_mfg(&mut ctx, *dump_feedback),
        Command::Simulate { n, dump_paths, .. } => commands::simulate(&mut ctx, *n, *dump_paths),
        Command::OracleCheck { .. } => commands::oracle_check(&mut ctx),
        Command::EvaluateContract { .. } => commands::evaluate(&mut ctx),
        Command::VerifyFocs { .. } => commands::verify_focs(&mut ctx),
        Command::OptimizeContract { family, budget, .. } => {
            let family = match family {
                Family::Linear => ContractFamily::Linear,
                Family::Softplus => ContractFamily::SoftplusShared,
                Family::SoftplusPerPopulation => ContractFamily::SoftplusPerPopulation,
                Family::Fixed => ContractFamily::Fixed {
                    contracts: ctx.exp.penalties.clone(),
                },
            };
            commands::optimize(&mut ctx, family, *budget)
        }
    });
    let code = match result {
        Ok(Status::Ok) => 0,
        Ok(Status::Unsuitable { path, message }) => {
            eprintln!("error: {path}: {message}");
            return 3;
        }
        Ok(Status::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            persist_diagnostics(&mut ctx, name, msg, None);
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            let history = match &e {
                rec_mfg_core::Error::MaxIterations { history, .. } => Some(history.as_slice()),
                _ => None,
            };
            persist_diagnostics(&mut ctx, name, e.to_string(), history);
            1
        }
    };
    let outputs = match manifest::inventory(&ctx.out, &ctx.written) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: cannot hash outputs: {e}");
            return 1;
        }
    };
    let manifest = RunManifest {
        tool: "rec-mfg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.into(),
        config_path: common.config.display().to_string(),
        config_sha256: manifest::sha256_hex(&config_bytes),
        seed,
        threads: n_threads,
        defaults_applied,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        exit_code: code,
        outputs,
    };
    if let Err(e) = rec_mfg_core::io::write_json(&ctx.out.join("manifest.json"), &manifest) {
        eprintln!("error: cannot write manifest: {e}");
        return 1;
    }
    code
}

fn persist_diagnostics(ctx: &mut Ctx, subcommand: &str, error: String, history: Option<&[f64]>) {
    let d = Diagnostics {
        subcommand,
        error,
        history,
    };
    let path = ctx.out.join("diagnostics.json");
    match rec_mfg_core::io::write_json(&path, &d) {
        Ok(()) => ctx.written.push("diagnostics.json".into()),
        Err(e) => eprintln!("error: cannot write diagnostics: {e}"),
    }
}
