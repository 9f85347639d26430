use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::log::SessionLog;
use super::packet::{decode, encode, Ack, AckCode, Command, ControlCommand, Packet, Payload};
use super::{unix_micros, StreamError, MAX_DATAGRAM};
use crate::geometry::{PointCloud, RigidTransform};

/// Timed commands a simulated client sends.
///
/// ```text
/// # comment
/// at 1.5 pause        send `pause` 1.5 s after start
/// at 2.0 resume
/// at 2.5 skip
/// at 3.0 recalibrate
/// run_for 8           leave after 8 s (default: stay until the server ends)
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientScript {
    pub commands: Vec<(f64, Command)>,
    pub run_for_s: Option<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

impl FromStr for ClientScript {
    type Err = ScriptError;

    fn from_str(text: &str) -> Result<Self, ScriptError> {
        let mut script = ClientScript::default();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| ScriptError { line: i + 1, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            let secs = |w: &str| -> Result<f64, ScriptError> {
                match w.parse::<f64>() {
                    Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                    _ => Err(err(format!("expected a non-negative number of seconds, got {w:?}"))),
                }
            };
            match words.as_slice() {
                ["at", t, cmd] => {
                    let c = Command::parse(cmd).ok_or_else(|| err(format!("unknown command {cmd:?}")))?;
                    script.commands.push((secs(t)?, c));
                }
                ["run_for", t] => script.run_for_s = Some(secs(t)?),
                _ => return Err(err(format!("cannot parse {line:?}"))),
            }
        }
        script.commands.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(script)
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub client_id: u32,
    pub name: String,
    /// Model the client keeps aligned with the latest payload.
    pub model: PointCloud,
    pub script: ClientScript,
    /// Hard stop if the server never ends the session.
    pub max_duration_s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: u32,
    pub payloads: u64,
    pub cues: u64,
    pub retries: u64,
    pub malformed: u64,
    pub commands_sent: u64,
    /// Wall-clock delivery latency, sender stamp to receipt.
    pub mean_delivery_us: f64,
    /// Time to apply a payload to the local model.
    pub mean_apply_us: f64,
    pub max_apply_us: f64,
    pub ended_by_server: bool,
    #[serde(skip)]
    pub last_transform: Option<RigidTransform>,
    #[serde(skip)]
    pub aligned_model: Option<PointCloud>,
}

/// Subscribes to `server`, runs the script and keeps the local model aligned
/// with every transform payload until the server says goodbye, `run_for`
/// elapses or `max_duration_s` passes.
pub fn run_client(server: SocketAddr, cfg: &ClientConfig, log: &SessionLog) -> Result<ClientSummary, StreamError> {
    let bind: SocketAddr = if server.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("valid wildcard");
    let socket = UdpSocket::bind(bind)?;
    socket.set_read_timeout(Some(Duration::from_millis(10)))?;
    let mut seq = 0u64;
    let mut send = |payload: Payload| -> io::Result<()> {
        seq += 1;
        socket.send_to(&encode(&Packet::new(seq, unix_micros(), payload)), server).map(|_| ())
    };
    send(Payload::Ack(Ack { code: AckCode::Subscribe, ref_seq: u64::from(cfg.client_id), text: cfg.name.clone() }))?;
    log.record("subscribed", json!({"server": server.to_string(), "client_id": cfg.client_id}));

    let start = Instant::now();
    let stop_after = cfg.script.run_for_s.unwrap_or(f64::INFINITY).min(cfg.max_duration_s);
    let mut summary = ClientSummary { client_id: cfg.client_id, ..ClientSummary::default() };
    let mut next_cmd = 0;
    let (mut delivery_sum, mut apply_sum) = (0.0, 0.0);
    let mut buf = vec![0u8; MAX_DATAGRAM];
    loop {
        let t = start.elapsed().as_secs_f64();
        if t >= stop_after {
            break;
        }
        while let Some(&(at, command)) = cfg.script.commands.get(next_cmd) {
            if at > t {
                break;
            }
            next_cmd += 1;
            send(Payload::Control(ControlCommand { command, client_id: cfg.client_id }))?;
            summary.commands_sent += 1;
            log.record("command_sent", json!({"command": command.name(), "at_s": at}));
        }
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::ConnectionReset) => {
                continue
            }
            Err(e) => return Err(e.into()),
        };
        let received_us = unix_micros();
        if from != server {
            log.record("foreign_packet", json!({"from": from.to_string()}));
            continue;
        }
        let packet = match decode(&buf[..n]) {
            Ok(p) => p,
            Err(e) => {
                summary.malformed += 1;
                log.record("malformed", json!({"bytes": n, "error": e.to_string()}));
                continue;
            }
        };
        match packet.payload {
            Payload::Transform(p) => {
                let t0 = Instant::now();
                let aligned = p.transform.apply(&cfg.model);
                let apply_us = t0.elapsed().as_secs_f64() * 1e6;
                let delivery_us = received_us.saturating_sub(packet.timestamp_us) as f64;
                summary.payloads += 1;
                delivery_sum += delivery_us;
                apply_sum += apply_us;
                summary.max_apply_us = summary.max_apply_us.max(apply_us);
                summary.last_transform = Some(p.transform);
                summary.aligned_model = Some(aligned);
                log.record(
                    "payload",
                    json!({"seq": packet.sequence, "delivery_us": delivery_us, "apply_us": apply_us, "mean_matched_distance": p.mean_matched_distance, "cues": p.cues.len()}),
                );
                send(Payload::Ack(Ack {
                    code: AckCode::Received,
                    ref_seq: packet.sequence,
                    text: format!("apply_us={apply_us:.0}"),
                }))?;
            }
            Payload::Cue(c) => {
                summary.cues += 1;
                log.record("cue", json!({"cue_id": c.cue_id, "offset_ms": c.offset_ms, "seq": packet.sequence}));
            }
            Payload::Ack(a) if a.code == AckCode::CalibrationRetry => {
                summary.retries += 1;
                log.record("retry", json!({"cause": a.text, "trigger_seq": a.ref_seq}));
            }
            Payload::Ack(a) if a.code == AckCode::Goodbye => {
                summary.ended_by_server = true;
                log.record("server_goodbye", json!({"reason": a.text}));
                break;
            }
            other => {
                log.record("unexpected_packet", json!({"type": other.packet_type().name()}));
            }
        }
    }
    if !summary.ended_by_server {
        // Best effort: the server may already be gone.
        let _ = send(Payload::Ack(Ack { code: AckCode::Goodbye, ref_seq: 0, text: cfg.name.clone() }));
    }
    if summary.payloads > 0 {
        summary.mean_delivery_us = delivery_sum / summary.payloads as f64;
        summary.mean_apply_us = apply_sum / summary.payloads as f64;
    }
    log.record("client_end", serde_json::to_value(&summary).expect("summary serializes"));
    log.flush()?;
    Ok(summary)
}
