use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::depth::fragment_frame;
use super::packet::{encode, Ack, AckCode, Command, ControlCommand, Packet, Payload};
use super::{unix_micros, StreamError};
use crate::geometry::DepthFrame;

/// Largest fragment payload that still fits a UDP datagram with our framing.
pub const MAX_FRAGMENT_BYTES: usize = 65_507 - super::packet::HEADER_LEN - super::packet::CHECKSUM_LEN - 4;

#[derive(Debug, Clone)]
pub struct SourceConfig {
    pub fps: f64,
    pub duration_s: f64,
    pub fragment_bytes: usize,
    /// Seconds after start at which to ask for a calibration.
    pub calibrate_at_s: Vec<f64>,
    /// Frames sent round-robin, restamped with the send time.
    pub frames: Vec<DepthFrame>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub frames_sent: u64,
    pub packets_sent: u64,
    pub bytes_sent: u64,
    pub triggers_sent: u64,
    /// Frames that went out later than one frame period behind schedule.
    pub late_frames: u64,
}

/// Streams depth frames to `server` at a fixed rate, then says goodbye.
pub fn run_source(server: SocketAddr, cfg: &SourceConfig) -> Result<SourceSummary, StreamError> {
    if !(cfg.fps > 0.0 && cfg.fps.is_finite()) || !(cfg.duration_s >= 0.0) {
        return Err(StreamError::Config(format!("bad source rate {} fps for {} s", cfg.fps, cfg.duration_s)));
    }
    if cfg.fragment_bytes == 0 || cfg.fragment_bytes > MAX_FRAGMENT_BYTES {
        return Err(StreamError::Config(format!("fragment_bytes must be in 1..={MAX_FRAGMENT_BYTES}")));
    }
    let bind: SocketAddr = if server.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("valid wildcard");
    let socket = UdpSocket::bind(bind)?;
    let mut summary = SourceSummary::default();
    let mut seq = 0u64;
    let mut triggers: Vec<f64> = cfg.calibrate_at_s.clone();
    triggers.sort_by(|a, b| b.total_cmp(a));

    let period = Duration::from_secs_f64(1.0 / cfg.fps);
    let n_frames = if cfg.frames.is_empty() { 0 } else { (cfg.duration_s * cfg.fps).round() as u64 };
    let start = Instant::now();
    let mut last_ts = 0u64;
    for i in 0..n_frames {
        let due = start + period.mul_f64(i as f64);
        let now = Instant::now();
        if now < due {
            std::thread::sleep(due - now);
        } else if now - due > period {
            summary.late_frames += 1;
        }
        let mut frame = cfg.frames[(i as usize) % cfg.frames.len()].clone();
        last_ts = unix_micros().max(last_ts + 1);
        frame.timestamp_us = last_ts;
        frame.sequence = i;
        let packets = fragment_frame(&frame, cfg.fragment_bytes, seq);
        seq += packets.len() as u64;
        for (k, p) in packets.iter().enumerate() {
            let bytes = encode(p);
            socket.send_to(&bytes, server)?;
            summary.packets_sent += 1;
            summary.bytes_sent += bytes.len() as u64;
            // Spread large frames out a little so the receiver's socket buffer keeps up.
            if k + 1 < packets.len() && bytes.len() > 8192 {
                std::thread::sleep(Duration::from_micros(100));
            }
        }
        summary.frames_sent += 1;
        let t = start.elapsed().as_secs_f64();
        while triggers.last().is_some_and(|&at| at <= t) {
            triggers.pop();
            seq += 1;
            let c = ControlCommand { command: Command::RequestRecalibration, client_id: 0 };
            socket.send_to(&encode(&Packet::new(seq, unix_micros(), Payload::Control(c))), server)?;
            summary.triggers_sent += 1;
            summary.packets_sent += 1;
        }
    }
    let remaining = Duration::from_secs_f64(cfg.duration_s).saturating_sub(start.elapsed());
    std::thread::sleep(remaining);
    seq += 1;
    socket.send_to(
        &encode(&Packet::new(seq, unix_micros(), Payload::Ack(Ack { code: AckCode::Goodbye, ref_seq: 0, text: "source".into() }))),
        server,
    )?;
    summary.packets_sent += 1;
    Ok(summary)
}
