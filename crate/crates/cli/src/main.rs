//! `flowmon`: run the broker, registry and coordinators, and drive
//! simulated experiments.

mod device;
mod serve;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "flowmon", version, about = "Thermal people-flow monitoring")]
struct Cli {
    /// Log filter, e.g. `info` or `flowmon=debug`. Overrides RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the broker (optionally with the HTTP API in the same process).
    Broker(serve::BrokerArgs),
    /// Run the registry HTTP API together with its co-located broker.
    Registry(serve::RegistryArgs),
    /// Coordinator operations.
    #[command(subcommand)]
    Device(device::DeviceCommand),
    /// Replay simulated days end to end and write a report.
    Simulate {
        /// Run manifest (TOML).
        manifest: PathBuf,
    },
    /// Print the occupancy of an activity.
    Query(tools::QueryArgs),
    /// Scenario utilities.
    #[command(subcommand)]
    Scenario(tools::ScenarioCommand),
}

/// Exit status for a failure that is not a plain error.
#[derive(Debug)]
pub struct Exit(pub u8, pub String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn init_logging(filter: Option<&str>) {
    use tracing_subscriber::EnvFilter;
    let filter = match filter {
        Some(f) => EnvFilter::new(f),
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
    };
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log.as_deref());
    let result = match cli.command {
        Command::Broker(a) => serve::run_broker(a),
        Command::Registry(a) => serve::run_registry(a),
        Command::Device(c) => device::run(c),
        Command::Simulate { manifest } => tools::simulate(&manifest),
        Command::Query(a) => tools::query(a),
        Command::Scenario(c) => tools::scenario(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(2, |x| x.0);
            eprintln!("flowmon: {e:#}");
            ExitCode::from(code)
        }
    }
}
