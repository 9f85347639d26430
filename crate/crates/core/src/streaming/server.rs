use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::buffer::{BufferError, FrameBuffer};
use super::log::SessionLog;
use super::packet::{decode, encode, Ack, AckCode, Command, ControlCommand, Cue, Packet, Payload, TransformPayload};
use super::{unix_micros, StreamError, MAX_DATAGRAM};
use crate::config::{Config, ConfigError};
use crate::geometry::PointCloud;
use crate::registration::{CalibrationConfig, CalibrationSession, CalibrationStatus};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub buffer_window_s: f64,
    /// The session ends when the sensor source has been silent this long.
    pub idle_timeout_s: f64,
    /// Cue schedule attached to every transform payload.
    pub cues: Vec<Cue>,
    pub calibration: CalibrationConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            buffer_window_s: 0.5,
            idle_timeout_s: 2.0,
            cues: default_cues(),
            calibration: CalibrationConfig::default(),
        }
    }
}

fn default_cues() -> Vec<Cue> {
    [0, 1500, 3000, 4500, 6000].iter().enumerate().map(|(i, &o)| Cue { cue_id: i as u16 + 1, offset_ms: o }).collect()
}

impl ServerConfig {
    /// Reads `[server]` (`buffer_window_s`, `idle_timeout_s`, `cue_offsets_ms`
    /// as a comma-separated list; cue ids are numbered from 1) plus the
    /// calibration sections.
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let mut c = ServerConfig { calibration: CalibrationConfig::from_config(cfg)?, ..ServerConfig::default() };
        if let Some(s) = cfg.section("server") {
            s.read_into("buffer_window_s", &mut c.buffer_window_s)?;
            s.read_into("idle_timeout_s", &mut c.idle_timeout_s)?;
            if let Some(raw) = s.raw("cue_offsets_ms") {
                let offsets: Result<Vec<u32>, _> =
                    raw.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::parse).collect();
                let mut offsets = offsets.map_err(|_| s.invalid("cue_offsets_ms", format!("expected integers, got {raw:?}")))?;
                offsets.sort_unstable();
                c.cues = offsets.iter().enumerate().map(|(i, &o)| Cue { cue_id: i as u16 + 1, offset_ms: o }).collect();
            }
            if !(c.buffer_window_s > 0.0 && c.idle_timeout_s > 0.0) {
                return Err(s.invalid("server", "buffer_window_s and idle_timeout_s must be positive"));
            }
        }
        Ok(c)
    }
}

/// Counters reported when a session ends.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub packets_received: u64,
    pub decode_errors: u64,
    pub frames_completed: u64,
    pub frames_rejected: u64,
    pub frames_evicted: u64,
    /// Largest newest-minus-oldest span the frame buffer ever held.
    pub max_buffer_span_us: u64,
    pub calibrations: u64,
    pub accepted: u64,
    pub retries: u64,
    pub payloads_broadcast: u64,
    pub cues_fired: u64,
    pub clients_seen: u64,
    pub end_reason: String,
}

#[derive(Debug, Clone)]
pub struct StopHandle(Arc<AtomicBool>);

impl StopHandle {
    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }
}

#[derive(Default)]
struct Jobs {
    pending: bool,
    shutdown: bool,
    /// Sequence number of the trigger that created the pending job.
    trigger_seq: u64,
}

struct Schedule {
    start: Instant,
    cues: Vec<Cue>,
    next: usize,
    paused_total: Duration,
    /// Milliseconds jumped forward by Skip commands.
    skipped_ms: u64,
    payload_seq: u64,
}

impl Schedule {
    fn elapsed_ms(&self, now: Instant) -> f64 {
        (now - self.start).saturating_sub(self.paused_total).as_secs_f64() * 1e3 + self.skipped_ms as f64
    }
}

#[derive(Default)]
struct Cues {
    schedule: Option<Schedule>,
    paused_at: Option<Instant>,
    shutdown: bool,
}

struct Shared<'a> {
    socket: &'a UdpSocket,
    log: &'a SessionLog,
    cfg: &'a ServerConfig,
    seq: AtomicU64,
    clients: Mutex<BTreeMap<SocketAddr, String>>,
    buffer: Mutex<FrameBuffer>,
    jobs: Mutex<Jobs>,
    jobs_cv: Condvar,
    cues: Mutex<Cues>,
    cues_cv: Condvar,
    stats: Mutex<SessionSummary>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Shared<'_> {
    fn send(&self, to: SocketAddr, payload: Payload) -> io::Result<u64> {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        self.socket.send_to(&encode(&Packet::new(seq, unix_micros(), payload)), to)?;
        Ok(seq)
    }

    /// Sends to every client; a failing client is logged and skipped.
    fn broadcast(&self, payload: &Payload) -> usize {
        let clients: Vec<SocketAddr> = lock(&self.clients).keys().copied().collect();
        let mut delivered = 0;
        for c in clients {
            match self.send(c, payload.clone()) {
                Ok(_) => delivered += 1,
                Err(e) => {
                    self.log.record("send_error", json!({"to": c.to_string(), "error": e.to_string()}));
                }
            }
        }
        delivered
    }

    fn trigger(&self, seq: u64) {
        let mut j = lock(&self.jobs);
        if j.pending {
            self.log.record("trigger_coalesced", json!({"seq": seq}));
        } else {
            j.pending = true;
            j.trigger_seq = seq;
        }
        self.jobs_cv.notify_all();
    }

    fn control(&self, c: ControlCommand, from: SocketAddr, seq: u64, ts: u64) {
        self.log.record(
            "control",
            json!({"command": c.command.name(), "client_id": c.client_id, "from": from.to_string(), "seq": seq, "sent_unix_us": ts}),
        );
        match c.command {
            Command::RequestRecalibration => self.trigger(seq),
            Command::Skip => {
                let mut cues = lock(&self.cues);
                let now = Instant::now();
                // While paused the schedule clock is frozen at the pause instant.
                let at = cues.paused_at.unwrap_or(now);
                match cues.schedule.as_mut() {
                    Some(s) if s.next < s.cues.len() => {
                        let el = s.elapsed_ms(at);
                        let gap = (s.cues[s.next].offset_ms as f64 - el).max(0.0).round() as u64;
                        s.skipped_ms += gap;
                        self.log.record(
                            "cue_skip",
                            json!({"client_id": c.client_id, "shift_ms": gap, "total_shift_ms": s.skipped_ms, "next_cue_id": s.cues[s.next].cue_id}),
                        );
                    }
                    _ => {
                        self.log.record("cue_skip", json!({"client_id": c.client_id, "shift_ms": 0, "note": "no pending cue"}));
                    }
                }
                self.cues_cv.notify_all();
            }
            Command::Pause => {
                let mut cues = lock(&self.cues);
                if cues.paused_at.is_none() {
                    cues.paused_at = Some(Instant::now());
                }
                self.log.record("cue_pause", json!({"client_id": c.client_id}));
                self.cues_cv.notify_all();
            }
            Command::Resume => {
                let mut cues = lock(&self.cues);
                if let Some(p) = cues.paused_at.take() {
                    let d = p.elapsed();
                    if let Some(s) = cues.schedule.as_mut() {
                        s.paused_total += d;
                    }
                    self.log.record("cue_resume", json!({"client_id": c.client_id, "paused_ms": d.as_secs_f64() * 1e3}));
                } else {
                    self.log.record("cue_resume", json!({"client_id": c.client_id, "note": "not paused"}));
                }
                self.cues_cv.notify_all();
            }
        }
    }

    fn worker(&self, scanner_model: PointCloud, patient_model: PointCloud) {
        let new_session = || CalibrationSession::new(scanner_model.clone(), patient_model.clone(), self.cfg.calibration);
        let mut session = match new_session() {
            Ok(s) => s,
            Err(e) => {
                self.log.record("worker_error", json!({"error": e.to_string()}));
                return;
            }
        };
        loop {
            let trigger_seq = {
                let mut j = lock(&self.jobs);
                while !j.pending && !j.shutdown {
                    j = self.jobs_cv.wait(j).unwrap_or_else(|e| e.into_inner());
                }
                if !j.pending {
                    return;
                }
                j.pending = false;
                j.trigger_seq
            };
            let frame = lock(&self.buffer).latest_complete().cloned();
            lock(&self.stats).calibrations += 1;
            let Some(frame) = frame else {
                self.retry(trigger_seq, "no complete frame in the buffer", None);
                continue;
            };
            self.log.record("calibration_start", json!({"trigger_seq": trigger_seq, "frame_timestamp_us": frame.timestamp_us}));
            let outcome = match session.attempt(std::slice::from_ref(&frame)) {
                Ok(o) => o,
                Err(e) => {
                    self.retry(trigger_seq, &e.to_string(), None);
                    continue;
                }
            };
            let record = outcome.to_json();
            match (outcome.status, &outcome.result) {
                (CalibrationStatus::Accepted, Some(r)) => {
                    lock(&self.stats).accepted += 1;
                    self.log.record("calibration", json!({"trigger_seq": trigger_seq, "outcome": record}));
                    let payload = Payload::Transform(TransformPayload {
                        transform: r.transform,
                        mean_matched_distance: r.mean_matched_distance,
                        cues: self.cfg.cues.clone(),
                    });
                    let seq = self.seq.load(Ordering::SeqCst);
                    let n = self.broadcast(&payload);
                    lock(&self.stats).payloads_broadcast += 1;
                    self.log.record("transform_broadcast", json!({"first_seq": seq, "clients": n, "trigger_seq": trigger_seq}));
                    self.start_cues(seq);
                    session = match new_session() {
                        Ok(s) => s,
                        Err(_) => return,
                    };
                }
                _ => {
                    let cause = outcome.cause.clone().unwrap_or_else(|| "retry requested".into());
                    self.retry(trigger_seq, &cause, Some(record));
                }
            }
        }
    }

    fn retry(&self, trigger_seq: u64, cause: &str, outcome: Option<serde_json::Value>) {
        lock(&self.stats).retries += 1;
        self.log.record("calibration", json!({"trigger_seq": trigger_seq, "status": "retry_requested", "cause": cause, "outcome": outcome}));
        let n = self.broadcast(&Payload::Ack(Ack {
            code: AckCode::CalibrationRetry,
            ref_seq: trigger_seq,
            text: truncate(cause, 512),
        }));
        self.log.record("retry_broadcast", json!({"clients": n, "trigger_seq": trigger_seq}));
    }

    fn start_cues(&self, payload_seq: u64) {
        let mut cues = lock(&self.cues);
        if let Some(old) = cues.schedule.take() {
            if old.next < old.cues.len() {
                self.log.record("cue_schedule_replaced", json!({"unfired": old.cues.len() - old.next}));
            }
        }
        let start = Instant::now();
        cues.schedule = Some(Schedule {
            start,
            cues: self.cfg.cues.clone(),
            next: 0,
            paused_total: Duration::ZERO,
            skipped_ms: 0,
            payload_seq,
        });
        // A pause issued before the payload holds the new schedule from its start.
        if cues.paused_at.is_some() {
            cues.paused_at = Some(start);
        }
        self.cues_cv.notify_all();
    }

    fn cue_loop(&self) {
        let mut cues = lock(&self.cues);
        loop {
            if cues.shutdown {
                if let Some(s) = cues.schedule.take() {
                    if s.next < s.cues.len() {
                        self.log.record("cue_schedule_cancelled", json!({"unfired": s.cues.len() - s.next}));
                    }
                }
                return;
            }
            let mut wait = Duration::from_millis(50);
            let paused = cues.paused_at.is_some();
            let mut done = false;
            if let (Some(s), false) = (cues.schedule.as_mut(), paused) {
                let now = Instant::now();
                let el = s.elapsed_ms(now);
                while s.next < s.cues.len() && s.cues[s.next].offset_ms as f64 <= el {
                    let cue = s.cues[s.next];
                    s.next += 1;
                    let n = self.broadcast(&Payload::Cue(cue));
                    lock(&self.stats).cues_fired += 1;
                    self.log.record(
                        "cue",
                        json!({
                            "cue_id": cue.cue_id,
                            "offset_ms": cue.offset_ms,
                            "fired_after_ms": (now - s.start).as_secs_f64() * 1e3,
                            "shift_ms": s.skipped_ms,
                            "payload_seq": s.payload_seq,
                            "clients": n,
                        }),
                    );
                }
                match s.cues.get(s.next) {
                    Some(c) => wait = wait.min(Duration::from_secs_f64(((c.offset_ms as f64 - el) / 1e3).max(0.0))),
                    None => done = true,
                }
            }
            if done {
                cues.schedule = None;
            }
            cues = self.cues_cv.wait_timeout(cues, wait).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s[..end].to_string()
}

/// One calibration server session over UDP.
pub struct Server {
    socket: UdpSocket,
    cfg: ServerConfig,
    scanner_model: PointCloud,
    patient_model: PointCloud,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(
        addr: impl ToSocketAddrs,
        cfg: ServerConfig,
        scanner_model: PointCloud,
        patient_model: PointCloud,
    ) -> Result<Self, StreamError> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(POLL))?;
        Ok(Server { socket, cfg, scanner_model, patient_model, stop: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn stop_handle(&self) -> StopHandle {
        StopHandle(self.stop.clone())
    }

    /// Runs until the sensor source says goodbye, falls silent for
    /// `idle_timeout_s`, or the stop handle fires. Pending calibration jobs
    /// finish before the session ends; clients then receive a goodbye.
    pub fn run(self, log: &SessionLog) -> Result<SessionSummary, StreamError> {
        let shared = Shared {
            socket: &self.socket,
            log,
            cfg: &self.cfg,
            seq: AtomicU64::new(0),
            clients: Mutex::new(BTreeMap::new()),
            buffer: Mutex::new(FrameBuffer::new(self.cfg.buffer_window_s)),
            jobs: Mutex::new(Jobs::default()),
            jobs_cv: Condvar::new(),
            cues: Mutex::new(Cues::default()),
            cues_cv: Condvar::new(),
            stats: Mutex::new(SessionSummary::default()),
        };
        log.record("session_start", json!({"listen": self.socket.local_addr()?.to_string(), "window_s": self.cfg.buffer_window_s}));
        let (scanner, patient) = (self.scanner_model, self.patient_model);
        let end_reason = std::thread::scope(|scope| {
            let worker = scope.spawn(|| shared.worker(scanner, patient));
            let cue_thread = scope.spawn(|| shared.cue_loop());
            let reason = ingest(&shared, &self.stop);
            {
                let mut j = lock(&shared.jobs);
                j.shutdown = true;
                shared.jobs_cv.notify_all();
            }
            let _ = worker.join();
            {
                let mut c = lock(&shared.cues);
                c.shutdown = true;
                shared.cues_cv.notify_all();
            }
            let _ = cue_thread.join();
            reason
        });
        let n = shared.broadcast(&Payload::Ack(Ack { code: AckCode::Goodbye, ref_seq: 0, text: end_reason.clone() }));
        let mut summary = lock(&shared.stats).clone();
        summary.end_reason = end_reason;
        summary.clients_seen = summary.clients_seen.max(n as u64);
        log.record("session_end", serde_json::to_value(&summary).expect("summary serializes"));
        log.flush()?;
        Ok(summary)
    }
}

fn ingest(shared: &Shared<'_>, stop: &AtomicBool) -> String {
    let log = shared.log;
    let mut buf = vec![0u8; MAX_DATAGRAM];
    let mut source: Option<SocketAddr> = None;
    let mut last_source = Instant::now();
    let idle = Duration::from_secs_f64(shared.cfg.idle_timeout_s);
    loop {
        if stop.load(Ordering::SeqCst) {
            return "stopped".into();
        }
        if source.is_some() && last_source.elapsed() > idle {
            log.record("source_timeout", json!({"idle_s": shared.cfg.idle_timeout_s}));
            return "source_timeout".into();
        }
        let (n, from) = match shared.socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            // A client that went away can surface as a connection reset on some platforms.
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => continue,
            Err(e) => {
                log.record("socket_error", json!({"error": e.to_string()}));
                return "socket_error".into();
            }
        };
        lock(&shared.stats).packets_received += 1;
        let packet = match decode(&buf[..n]) {
            Ok(p) => p,
            Err(e) => {
                lock(&shared.stats).decode_errors += 1;
                log.record("decode_error", json!({"from": from.to_string(), "bytes": n, "error": e.to_string()}));
                continue;
            }
        };
        log.record(
            "packet",
            json!({"type": packet.packet_type().name(), "seq": packet.sequence, "timestamp_us": packet.timestamp_us, "from": from.to_string(), "bytes": n}),
        );
        let from_source = matches!(packet.payload, Payload::DepthFrame(_) | Payload::Pose(_));
        if from_source && source.is_none() {
            source = Some(from);
            log.record("source_connected", json!({"from": from.to_string()}));
        }
        if source == Some(from) {
            last_source = Instant::now();
        }
        match packet.payload {
            Payload::DepthFrame(frag) => {
                let (index, count) = (frag.index, frag.count);
                let mut b = lock(&shared.buffer);
                let res = b.push_fragment(packet.timestamp_us, frag);
                let span = b.span_us();
                drop(b);
                let mut st = lock(&shared.stats);
                st.max_buffer_span_us = st.max_buffer_span_us.max(span);
                match res {
                    Ok(out) => {
                        st.frames_evicted += out.evicted.len() as u64;
                        if out.completed {
                            st.frames_completed += 1;
                            drop(st);
                            log.record("frame_complete", json!({"timestamp_us": packet.timestamp_us, "fragments": count}));
                        }
                    }
                    Err(e) => {
                        st.frames_rejected += 1;
                        if matches!(e, BufferError::Corrupt { .. }) {
                            st.decode_errors += 1;
                        }
                        drop(st);
                        log.record("frame_rejected", json!({"timestamp_us": packet.timestamp_us, "fragment": index, "error": e.to_string()}));
                    }
                }
            }
            Payload::Pose(t) => {
                log.record("pose", json!({"translation": t.translation().as_slice()}));
            }
            Payload::Control(c) => shared.control(c, from, packet.sequence, packet.timestamp_us),
            Payload::Ack(a) => match a.code {
                AckCode::Subscribe => {
                    let new = lock(&shared.clients).insert(from, a.text.clone()).is_none();
                    if new {
                        lock(&shared.stats).clients_seen += 1;
                    }
                    log.record("client_joined", json!({"from": from.to_string(), "name": a.text}));
                }
                // Goodbye from the source, or from a stranger before any source
                // appeared (a source that sent nothing at all).
                AckCode::Goodbye if source == Some(from) || (source.is_none() && !lock(&shared.clients).contains_key(&from)) => {
                    log.record("source_goodbye", json!({"from": from.to_string()}));
                    return "source_goodbye".into();
                }
                AckCode::Goodbye => {
                    lock(&shared.clients).remove(&from);
                    log.record("client_left", json!({"from": from.to_string()}));
                }
                AckCode::Received => {
                    log.record("client_ack", json!({"from": from.to_string(), "ref_seq": a.ref_seq, "detail": a.text}));
                }
                AckCode::CalibrationRetry => {
                    log.record("unexpected_packet", json!({"from": from.to_string(), "type": "ack/calibration_retry"}));
                }
            },
            Payload::Transform(_) | Payload::Cue(_) => {
                log.record("unexpected_packet", json!({"from": from.to_string(), "type": packet.payload.packet_type().name()}));
            }
        }
    }
}
