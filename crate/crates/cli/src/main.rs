//! `scanreg`: scene generation, registration, streaming and metric reports.
//!
//! Exit codes: 0 success, 1 input or runtime error, 2 calibration asked for
//! a new scan. Every run writes `<out-dir>/<command>.manifest.json`.

mod commands;
mod manifest;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "scanreg", version, about = "Depth-only MRI bore registration tools")]
struct Cli {
    /// Seed for scene noise, camera placement and registration sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file (`[section] key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs, logs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// One of off, error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render a synthetic scene: depth frame, labels, ground truth and model clouds.
    GenerateScene(GenerateArgs),
    /// Calibrate one depth frame against the scanner model.
    Register(RegisterArgs),
    /// Run the calibration server until the sensor source leaves.
    Serve(ServeArgs),
    /// Subscribe to a server and run a command script.
    Client(ClientArgs),
    /// Stream depth frames to a server at a fixed rate.
    Source(SourceArgs),
    /// Server, source and clients over loopback in one process.
    Simulate(SimulateArgs),
    /// Summarize session records and emit chart data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Place the camera randomly from the seed instead of the configured pose.
    #[arg(long)]
    pub random_pose: bool,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// MDF1 depth frame.
    #[arg(long)]
    pub frame: PathBuf,
    /// Scanner model as ASCII PLY; sampled from the scene geometry when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Patient model as ASCII PLY; sampled from the scene geometry when absent.
    #[arg(long)]
    pub patient_model: Option<PathBuf>,
    /// Ground-truth JSON from generate-scene; adds pose errors to the result.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7600")]
    pub listen: String,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub patient_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    #[arg(long)]
    pub connect: SocketAddr,
    /// Command script; without one the client listens until the server ends.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Local model kept aligned with the payloads.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub client_id: u32,
    /// Give up after this long even if the server never ends the session.
    #[arg(long, default_value_t = 3600.0)]
    pub max_duration_s: f64,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    #[arg(long)]
    pub connect: SocketAddr,
    /// MDF1 frames sent round-robin; rendered from the scene config when absent.
    #[arg(long)]
    pub frame: Vec<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 5.0)]
    pub duration_s: f64,
    /// Seconds after start at which to request calibration.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub calibrate_at: Vec<f64>,
    #[arg(long, default_value_t = 32_000)]
    pub fragment_bytes: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene configuration file; falls back to --config.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 5.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = 1)]
    pub clients: usize,
    /// Script run by every client.
    #[arg(long)]
    pub client_script: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub calibrate_at: Vec<f64>,
    #[arg(long, default_value_t = 32_000)]
    pub fragment_bytes: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Session records CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Baseline session records CSV for the chart.
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub chart_out: PathBuf,
}

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Retry(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Retry(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Retry(m) => m,
        }
    }
}

/// Shorthand for turning any displayable error into an input failure.
pub fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Input(format!("{context}: {e}"))
}

pub struct Globals {
    pub seed: Option<u64>,
    pub config: scanreg::config::Config,
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp_millis().init();
    let name = match &cli.command {
        Cmd::GenerateScene(_) => "generate-scene",
        Cmd::Register(_) => "register",
        Cmd::Serve(_) => "serve",
        Cmd::Client(_) => "client",
        Cmd::Source(_) => "source",
        Cmd::Simulate(_) => "simulate",
        Cmd::Report(_) => "report",
    };
    let mut manifest = RunManifest::new(name);
    if let Some(s) = cli.seed {
        manifest.seeds.insert("seed".into(), s);
    }
    let result = load_config(&cli, &mut manifest).and_then(|config| {
        let g = Globals { seed: cli.seed, config, out_dir: cli.out_dir.clone() };
        std::fs::create_dir_all(&g.out_dir).map_err(input(g.out_dir.display()))?;
        match &cli.command {
            Cmd::GenerateScene(a) => commands::generate_scene(&g, a, &mut manifest),
            Cmd::Register(a) => commands::register(&g, a, &mut manifest),
            Cmd::Serve(a) => commands::serve(&g, a, &mut manifest),
            Cmd::Client(a) => commands::client(&g, a, &mut manifest),
            Cmd::Source(a) => commands::source(&g, a, &mut manifest),
            Cmd::Simulate(a) => commands::simulate(&g, a, &mut manifest),
            Cmd::Report(a) => commands::report(&g, a, &mut manifest),
        }
    });
    let (code, error) = match &result {
        Ok(()) => (0, None),
        Err(f) => {
            eprintln!("scanreg {name}: {}", f.message());
            (f.exit_code(), Some(f.message().to_string()))
        }
    };
    if let Err(e) = manifest.finish(&cli.out_dir, i32::from(code), error) {
        eprintln!("scanreg {name}: could not write the run manifest in {}: {e}", cli.out_dir.display());
    }
    ExitCode::from(code)
}

fn load_config(cli: &Cli, manifest: &mut RunManifest) -> Result<scanreg::config::Config, Failure> {
    let Some(path) = &cli.config else {
        return Ok(scanreg::config::Config::default());
    };
    manifest.input(path);
    manifest.config_path = Some(path.clone());
    let cfg = scanreg::config::Config::load(path).map_err(input(path.display()))?;
    manifest.config = cfg.to_text();
    Ok(cfg)
}
