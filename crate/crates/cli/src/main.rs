mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use commands::Run;
use error::CliError;

/// Convex G-expectation experiments driven by a TOML config.
#[derive(Parser)]
#[command(name = "gexp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the generator PDE for a terminal payoff.
    Eval(Paths),
    /// Compare the scenario (dual) value with the PDE value; tabulate constant-η argmaxes.
    Repr(Paths),
    /// Solve the robust LQ problem, or report the compatibility obstruction.
    Lq(Paths),
    /// Maximum-principle residuals, sufficiency conditions and variational slopes.
    Mp(Paths),
}

#[derive(Args)]
struct Paths {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("GEXP_THREADS") else {
        return Ok(());
    };
    let threads: usize = match raw.trim().parse() {
        Ok(n) if n >= 1 => n,
        _ => {
            return Err(CliError::Config {
                field: "GEXP_THREADS".into(),
                reason: format!("must be a positive integer, got {raw:?}"),
                line: None,
            })
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Io(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (name, paths, f): (&'static str, Paths, fn(Run) -> Result<Run, CliError>) = match cli.command {
        Command::Eval(p) => ("eval", p, commands::eval),
        Command::Repr(p) => ("repr", p, commands::repr),
        Command::Lq(p) => ("lq", p, commands::lq),
        Command::Mp(p) => ("mp", p, commands::mp),
    };
    let text = std::fs::read_to_string(&paths.config).map_err(|e| CliError::Config {
        field: "config".into(),
        reason: format!("cannot read {}: {e}", paths.config.display()),
        line: None,
    })?;
    let run = Run::new(name, text, paths.out)?;
    f(run)?.finish()
}

fn main() -> ExitCode {
    let start = Instant::now();
    let cli = Cli::parse();
    let result = dispatch(cli);
    eprintln!("wall time: {:.3} s", start.elapsed().as_secs_f64());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
