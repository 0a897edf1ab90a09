use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sctm::cli::*;
use sctm::Result;

#[derive(Parser)]
#[command(name = "sctm", version, about = "Stochastic cell-transmission experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary throughput: Gaussian, deterministic and simulated.
    Throughput(Common),
    /// Travel-time moments of alternative routes and the resulting choices.
    RouteChoice(Common),
    /// Travel times of a two-class segment under parameter sweeps.
    Control(Common),
    /// Mean and spread of every cell of the six-road network over time.
    Network(Common),
    /// χ² normality tests of per-minute flow data.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the CSV files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Check the configuration and print the plan without computing.
    #[arg(long)]
    dry_run: bool,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Throughput(c) => {
            let mut cfg: ThroughputConfig = load_config(&c.config)?;
            if let Some(s) = c.seed {
                cfg.simulation.seed = s;
            }
            cfg.validate()?;
            println!("{} (seed {})", cfg.plan(), cfg.simulation.seed);
            if !c.dry_run {
                write(&c.out, "throughput.csv", &throughput_csv(&run_throughput(&cfg)?))?;
            }
        }
        Command::RouteChoice(c) => {
            let cfg: RouteChoiceConfig = load_config(&c.config)?;
            cfg.validate()?;
            println!("{}", cfg.plan());
            if !c.dry_run {
                let (m, s) = run_route_choice(&cfg)?;
                write(&c.out, "route_moments.csv", &route_moments_csv(&m))?;
                write(&c.out, "route_selection.csv", &route_selection_csv(&s))?;
            }
        }
        Command::Control(c) => {
            let cfg: ControlConfig = load_config(&c.config)?;
            cfg.validate()?;
            println!("{}", cfg.plan());
            if !c.dry_run {
                write(&c.out, "control.csv", &control_csv(&run_control(&cfg)?))?;
            }
        }
        Command::Network(c) => {
            let cfg: NetworkConfig = load_config(&c.config)?;
            cfg.validate()?;
            println!("{}", cfg.plan());
            if !c.dry_run {
                write(&c.out, "network.csv", &network_csv(&run_network(&cfg)?))?;
            }
        }
        Command::Validate(c) => {
            let cfg: ValidationConfig = load_config(&c.config)?;
            let base = c.config.parent().map(Path::to_path_buf).unwrap_or_default();
            cfg.validate()?;
            println!("{}", cfg.plan(&base));
            if !c.dry_run {
                let (csv, report) = run_validation(&cfg, &base)?;
                println!("{report}");
                write(&c.out, "validation.csv", &csv)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
