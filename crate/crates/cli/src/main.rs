use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fga_cli::commands::{cmd_report, run_mode, Context};
use fga_cli::config::RunConfig;
use fga_cli::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "fga", version, about = "Frozen Gaussian approximation for periodic media")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    overrides: Vec<String>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (defaults to `run.output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Command; `run.mode` from the config when omitted.
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Band table, gap report and gauge diagnostics.
    Bands,
    /// Windowed Bloch coefficients and reconstruction check.
    Decompose,
    /// FGA propagation to the checkpoint times.
    Propagate,
    /// Split-step reference solution.
    Reference,
    /// Error against the oracle over the ε list, with observed orders.
    Convergence,
    /// Print the summary of a saved report.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Bands => "bands",
            Self::Decompose => "decompose",
            Self::Propagate => "propagate",
            Self::Reference => "reference",
            Self::Convergence => "convergence",
            Self::Report => "report",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let threads = rayon::current_num_threads();

    if matches!(cli.command, Some(Command::Report)) && cli.config.is_none() {
        let dir = cli.out.ok_or_else(|| CliError::Config("report needs --out or --config".into()))?;
        print!("{}", cmd_report(&dir)?.summary());
        return Ok(());
    }
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let config = RunConfig::load(&path, &cli.overrides)?;
    let mode = cli.command.as_ref().map_or(config.run.mode.clone(), |c| c.name().to_string());
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let ctx = Context::new(config, base, cli.out, threads);
    let report = run_mode(&mode, &ctx)?;
    print!("{}", report.summary());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Stage { source, .. } = &e {
                let mut cause = std::error::Error::source(source);
                while let Some(c) = cause {
                    eprintln!("  caused by: {c}");
                    cause = c.source();
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
