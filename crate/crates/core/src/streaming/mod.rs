//! The `MRG1` UDP protocol and the processes that speak it.
//!
//! A sensor source streams compressed depth frames; the server buffers them,
//! runs calibration on request and broadcasts the resulting transform plus
//! cue triggers to subscribed display clients. [`simulate`] wires all three
//! together over loopback.

mod buffer;
mod client;
mod depth;
mod log;
mod packet;
mod server;
mod source;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use buffer::{BufferError, Evicted, FragmentOutcome, FrameBuffer};
pub use client::{run_client, ClientConfig, ClientScript, ClientSummary, ScriptError};
pub use depth::{compress_frame, decompress_frame, fragment_frame};
pub use log::{read_log, LogEvent, SessionLog};
pub use packet::{
    decode, encode, Ack, AckCode, Command, ControlCommand, Cue, DecodeError, FrameFragment, Packet, PacketType, Payload,
    TransformPayload, CHECKSUM_LEN, HEADER_LEN, MAGIC,
};
pub use server::{Server, ServerConfig, SessionSummary, StopHandle};
pub use source::{run_source, SourceConfig, SourceSummary, MAX_FRAGMENT_BYTES};

use crate::geometry::{DepthFrame, PointCloud};
use crate::registration::RegistrationError;

/// Receive buffer size; larger than any UDP datagram.
pub const MAX_DATAGRAM: usize = 65_536;

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("network: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0} thread panicked")]
    Panicked(&'static str),
}

/// Wall-clock microseconds since the Unix epoch; packet timestamps use this
/// so separate processes on one host can compare them.
pub fn unix_micros() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub fps: f64,
    pub duration_s: f64,
    pub fragment_bytes: usize,
    /// Seconds after start at which the source requests calibration.
    pub calibrate_at_s: Vec<f64>,
    /// One simulated client per script.
    pub client_scripts: Vec<ClientScript>,
    pub server: ServerConfig,
    /// Where `session.jsonl` and `client_<i>.jsonl` go; logs stay in memory otherwise.
    pub log_dir: Option<PathBuf>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            fps: 30.0,
            duration_s: 5.0,
            fragment_bytes: 32_000,
            calibrate_at_s: vec![0.5],
            client_scripts: vec![ClientScript::default()],
            server: ServerConfig::default(),
            log_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub server: SessionSummary,
    pub source: SourceSummary,
    pub clients: Vec<ClientSummary>,
    pub wall_s: f64,
    /// Every event the server logged, in order.
    #[serde(skip)]
    pub server_events: Vec<LogEvent>,
}

/// Runs a server, `client_scripts.len()` clients and a frame source over
/// loopback until the source finishes and the server shuts down.
pub fn simulate(
    frames: &[DepthFrame],
    scanner_model: PointCloud,
    patient_model: PointCloud,
    cfg: &SimulationConfig,
) -> Result<SimulationReport, StreamError> {
    let t0 = Instant::now();
    let open = |name: &str| -> std::io::Result<Option<PathBuf>> {
        match &cfg.log_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Ok(Some(d.join(name)))
            }
            None => Ok(None),
        }
    };
    let session_log = match open("session.jsonl")? {
        Some(p) => SessionLog::to_file(&p)?,
        None => SessionLog::in_memory(),
    };
    let client_logs = (0..cfg.client_scripts.len())
        .map(|i| SessionLog::sharing_clock(&session_log, open(&format!("client_{i}.jsonl"))?.as_deref()))
        .collect::<std::io::Result<Vec<_>>>()?;

    let server = Server::bind("127.0.0.1:0", cfg.server.clone(), scanner_model, patient_model.clone())?;
    let addr = server.local_addr()?;
    let source_cfg = SourceConfig {
        fps: cfg.fps,
        duration_s: cfg.duration_s,
        fragment_bytes: cfg.fragment_bytes,
        calibrate_at_s: cfg.calibrate_at_s.clone(),
        frames: frames.to_vec(),
    };
    // Clients outlive the source by the idle timeout plus a generous calibration budget.
    let max_client_s = cfg.duration_s + cfg.server.idle_timeout_s + 60.0;

    std::thread::scope(|scope| {
        let server_thread = scope.spawn(|| server.run(&session_log));
        let client_threads: Vec<_> = cfg
            .client_scripts
            .iter()
            .zip(&client_logs)
            .enumerate()
            .map(|(i, (script, log))| {
                let ccfg = ClientConfig {
                    client_id: i as u32 + 1,
                    name: format!("client-{}", i + 1),
                    model: patient_model.clone(),
                    script: script.clone(),
                    max_duration_s: max_client_s,
                };
                scope.spawn(move || run_client(addr, &ccfg, log))
            })
            .collect();
        wait_for_clients(&session_log, cfg.client_scripts.len(), Duration::from_secs(2));
        let source = run_source(addr, &source_cfg);
        if source.is_err() {
            // The server would otherwise wait for the idle timeout of a source that never spoke.
            let _ = send_goodbye(addr);
        }
        let server = server_thread.join().map_err(|_| StreamError::Panicked("server"))??;
        let clients = client_threads
            .into_iter()
            .map(|h| h.join().map_err(|_| StreamError::Panicked("client"))?)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SimulationReport {
            server,
            source: source?,
            clients,
            wall_s: t0.elapsed().as_secs_f64(),
            server_events: session_log.events(),
        })
    })
}

fn wait_for_clients(log: &SessionLog, n: usize, limit: Duration) {
    let start = Instant::now();
    while log.count("client_joined") < n && start.elapsed() < limit {
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn send_goodbye(addr: SocketAddr) -> std::io::Result<()> {
    let s = std::net::UdpSocket::bind("127.0.0.1:0")?;
    let p = Packet::new(0, unix_micros(), Payload::Ack(Ack { code: AckCode::Goodbye, ref_seq: 0, text: "abort".into() }));
    s.send_to(&encode(&p), addr).map(|_| ())
}

/// Writes `report` as pretty JSON.
pub fn write_report(report: &SimulationReport, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report).expect("report serializes"))
}
