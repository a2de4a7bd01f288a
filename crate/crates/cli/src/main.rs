//! trigger-gateway
//!
//! Usage:
//!   trigger-gateway serve --port 8080
//!   trigger-gateway mock-smarthome --port 9090 --fixture fixtures/smarthome_empty.json
//!   trigger-gateway demo fan
//!   trigger-gateway world-run --scenario fan_3users.json --gateway-url http://127.0.0.1:8080/<token>
//!
//! Exit codes: 0 success, 1 scenario or check failure, 2 configuration or startup error.

mod demo;
mod serve;

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trigger_gateway::tunnel::TunnelMode;
use trigger_gateway::world::{ClockMode, Scenario, World};

#[derive(Parser, Debug)]
#[command(name = "trigger-gateway", version)]
#[command(about = "Event-trigger gateway between virtual-world scripts and IoT devices")]
struct Cli {
    /// Request and report output format
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    log_format: LogFormat,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Text,
    Jsonl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the gateway and print its public URL
    Serve(ServeArgs),
    /// Run a built-in scenario end-to-end and check its invariants
    Demo(DemoArgs),
    /// Run the mock smart-home cloud
    MockSmarthome(MockArgs),
    /// Replay a scenario file against a running gateway
    WorldRun(WorldRunArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SmartHomeArgs {
    /// Smart-home cloud base URL; enables the `smarthome` route
    #[arg(long, env = "SMARTHOME_BASE_URL")]
    pub smarthome_base_url: Option<String>,

    #[arg(long, env = "SMARTHOME_TOKEN", default_value = trigger_gateway::smarthome::DEFAULT_TOKEN)]
    pub smarthome_token: String,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// 0 picks a free port
    #[arg(long, env = "MG_PORT", default_value_t = 8080)]
    pub port: u16,

    #[arg(long, env = "MG_TUNNEL_MODE", default_value_t = TunnelMode::Loopback)]
    pub tunnel_mode: TunnelMode,

    /// Base URL of an already running external tunnel (external mode only)
    #[arg(long, env = "MG_PUBLIC_BASE_URL")]
    pub public_base_url: Option<String>,

    #[arg(long, env = "MG_ROUTE_PREFIX", default_value = "/trigger")]
    pub route_prefix: String,

    /// Device registry JSON; defaults to the built-in demo devices
    #[arg(long)]
    pub devices: Option<PathBuf>,

    /// Seeds the run token so the URL is reproducible
    #[arg(long, env = "MG_SEED")]
    pub seed: Option<u64>,

    #[command(flatten)]
    pub smarthome: SmartHomeArgs,
}

#[derive(Args, Debug)]
pub struct MockArgs {
    /// 0 picks a free port
    #[arg(long, env = "SMARTHOME_MOCK_PORT", default_value_t = 9090)]
    pub port: u16,

    /// Fixture JSON; defaults to the 27-device workshop roster
    #[arg(long)]
    pub fixture: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DemoName {
    Fan,
    Doorbell,
    PresenceLamp,
    Piano,
    Smarthome,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(value_enum)]
    pub name: DemoName,

    /// Overrides the scenario seed
    #[arg(long, env = "MG_SEED")]
    pub seed: Option<u64>,

    /// Without a base URL the smarthome demo starts its own mock cloud
    #[command(flatten)]
    pub smarthome: SmartHomeArgs,
}

#[derive(Args, Debug)]
struct WorldRunArgs {
    #[arg(long)]
    scenario: PathBuf,

    /// Gateway public URL, including the run token
    #[arg(long, env = "MG_GATEWAY_URL")]
    gateway_url: String,

    /// Overrides the scenario seed
    #[arg(long, env = "MG_SEED")]
    seed: Option<u64>,

    /// Sleep between events; 1.0 is wall-clock speed
    #[arg(long, value_name = "SPEED")]
    real_time: Option<f64>,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1.
    Check(String),
    /// Exit 2.
    Config(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Check(m) | Failure::Config(m) => f.write_str(m),
        }
    }
}

fn init_logging() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
}

/// Writes a line to stdout and flushes, so piped readers see it at once.
pub fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

pub fn print_report(report: &trigger_gateway::world::WorldReport, format: LogFormat) {
    let text = match format {
        LogFormat::Text => report.to_text(),
        LogFormat::Jsonl => report.to_jsonl(),
    };
    emit(text.trim_end());
}

fn world_run(args: WorldRunArgs, format: LogFormat) -> Result<(), Failure> {
    let mut scenario = Scenario::load(&args.scenario)
        .map_err(|e| Failure::Config(format!("{}: {e}", args.scenario.display())))?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let clock = match args.real_time {
        Some(speed) if speed > 0.0 => ClockMode::RealTime { speed },
        Some(_) => return Err(Failure::Config("--real-time speed must be positive".into())),
        None => ClockMode::Virtual,
    };
    let report = World::from_scenario(&scenario, args.gateway_url.as_str())
        .with_clock(clock)
        .run(&scenario.events);
    print_report(&report, format);
    if report.failed_calls > 0 {
        return Err(Failure::Check(format!(
            "{} of {} forwarded calls failed",
            report.failed_calls, report.forwarded_calls
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match cli.command {
        Command::Serve(args) => serve::serve(args, cli.log_format),
        Command::MockSmarthome(args) => serve::mock_smarthome(args),
        Command::Demo(args) => demo::run(args, cli.log_format),
        Command::WorldRun(args) => world_run(args, cli.log_format),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
