use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ethfilter_cli::commands::{self, Context, EvolveOptions, Source};
use ethfilter_cli::config::RunConfig;
use ethfilter_cli::CliError;

#[derive(Parser)]
#[command(name = "ethfilter", version, about = "Filtered spectral functions of spin chains")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set chain.n=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Root directory for per-run caches.
    #[arg(long, global = true)]
    cache_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Tebd,
    Ed,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate spectral bounds and fix the filter scale α.
    Bounds,
    /// Build the trace series and correlation grid.
    Evolve {
        /// Stop after this many new grid rows; rerun to resume.
        #[arg(long)]
        max_rows: Option<usize>,
    },
    /// Assemble spectral quantities from cached grids.
    Assemble {
        #[arg(long, value_enum, default_value = "tebd")]
        source: SourceArg,
    },
    /// Exact-diagonalization reference outputs.
    Oracle,
    /// Compare the pipeline against exact diagonalization.
    Compare,
    /// Run the stages listed in the config.
    Run,
    /// Print the resolved configuration.
    ShowConfig,
}

fn print<T: serde::Serialize>(v: &T) {
    // A closed stdout (e.g. piped into `head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("reports serialize"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load_with_overrides(cli.config.as_deref(), &cli.set)?;
    let ctx = Context::new(cfg, cli.cache_root)?;
    match cli.command {
        Command::Bounds => print(&commands::cmd_bounds(&ctx)?),
        Command::Evolve { max_rows } => print(&commands::cmd_evolve(&ctx, &EvolveOptions { max_new_rows: max_rows })?),
        Command::Assemble { source } => {
            let s = match source {
                SourceArg::Tebd => Source::Tebd,
                SourceArg::Ed => Source::Ed,
            };
            print(&commands::cmd_assemble(&ctx, s)?)
        }
        Command::Oracle => print(&commands::cmd_oracle(&ctx)?),
        Command::Compare => {
            let r = commands::cmd_compare(&ctx)?;
            print(&r);
            if !r.pass {
                return Err(CliError::Tolerance("pipeline and exact results disagree".into()));
            }
        }
        Command::Run => print(&commands::run_stages(&ctx)?),
        Command::ShowConfig => print(&ctx.cfg),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
