//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};

use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::report::write_artifacts;
use crate::run::{execute, Subcommand};

/// Exit status for a malformed command line or config.
pub const EXIT_PARSE: u8 = 2;
/// Exit status when a check fails.
pub const EXIT_CHECK: u8 = 1;
/// Exit status for any other error.
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "splitgame",
    version,
    about = "Value of a simplex-martingale differential game, by PDE and by Monte Carlo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output root; artifacts go to `<out>/<config hash>/`.
    #[arg(long, env = "SPLITGAME_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, ClapSubcommand)]
enum Command {
    /// Solve the HJ equation on a grid and export the value.
    SolveHj(Common),
    /// Simulate controlled paths and export trajectories.
    Simulate(Common),
    /// Realize a two-point split and export the terminal histogram.
    SplitDemo(Common),
    /// Bracket the game value over finite strategy families.
    McGame(Common),
    /// Run the acceptance suite.
    Verify(Common),
}

impl Command {
    fn split(self) -> (Subcommand, Common) {
        match self {
            Command::SolveHj(c) => (Subcommand::SolveHj, c),
            Command::Simulate(c) => (Subcommand::Simulate, c),
            Command::SplitDemo(c) => (Subcommand::SplitDemo, c),
            Command::McGame(c) => (Subcommand::McGame, c),
            Command::Verify(c) => (Subcommand::Verify, c),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Json(_) => EXIT_PARSE,
        _ => EXIT_INTERNAL,
    }
}

/// Parses `args` (program name first), runs the subcommand and maps the
/// outcome to an exit status.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_PARSE } else { 0 });
        }
    };
    let (cmd, common) = cli.command.split();
    match dispatch(cmd, &common) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Subcommand, common: &Common) -> crate::Result<u8> {
    let (mut cfg, base) = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config { path: "--threads".into(), message: "must be positive".into() });
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Precondition(e.to_string()))?;
    let artifacts = pool.install(|| execute(cmd, &cfg, &base))?;
    let dir = write_artifacts(&common.out, &artifacts)?;
    for c in &artifacts.report.checks {
        println!("{} {}: {:.6e} (bound {:.6e})", if c.pass { "ok  " } else { "FAIL" }, c.name, c.measured, c.bound);
    }
    println!("artifacts: {}", dir.display());
    Ok(if artifacts.report.passed() { 0 } else { EXIT_CHECK })
}
