use std::net::UdpSocket;
use std::time::Duration;

use scanreg::geometry::{DepthFrame, PointCloud};
use scanreg::scene::{default_intrinsics, render_depth, sample_capsule_surface, sample_model_cloud, SceneConfig};
use scanreg::streaming::{
    decode, encode, read_log, simulate, unix_micros, Ack, AckCode, ClientScript, Packet, Payload, Server, ServerConfig,
    SessionLog, SimulationConfig,
};

fn setup() -> (Vec<DepthFrame>, PointCloud, PointCloud) {
    let scene = SceneConfig::random(11, 0.003, 0.05);
    let (frame, _) = render_depth(&scene, &default_intrinsics());
    (
        vec![frame],
        sample_model_cloud(&scene.scanner, 40000, 99),
        sample_capsule_surface(&scene.torso, 5000, 98),
    )
}

#[test]
fn every_client_gets_every_broadcast() {
    let (frames, scanner, patient) = setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimulationConfig {
        fps: 30.0,
        duration_s: 2.5,
        calibrate_at_s: vec![0.2],
        client_scripts: vec![ClientScript::default(); 2],
        log_dir: Some(dir.path().to_path_buf()),
        ..SimulationConfig::default()
    };
    let r = simulate(&frames, scanner, patient.clone(), &cfg).unwrap();
    assert_eq!(r.server.end_reason, "source_goodbye");
    assert_eq!(r.server.decode_errors, 0);
    assert_eq!(r.server.calibrations, 1);
    assert_eq!(r.server.accepted + r.server.retries, 1);
    assert!(r.server.max_buffer_span_us <= 500_000);
    for c in &r.clients {
        assert!(c.ended_by_server);
        assert_eq!(c.malformed, 0);
        assert_eq!(c.payloads, r.server.payloads_broadcast);
        assert_eq!(c.retries, r.server.retries);
    }
    // The calibrated transform maps camera to scanner; the client applies it to its model.
    if r.server.accepted == 1 {
        let c = &r.clients[0];
        let t = c.last_transform.unwrap();
        assert_eq!(c.aligned_model.as_ref().unwrap(), &t.apply(&patient));
    }
    let events = read_log(&dir.path().join("session.jsonl")).unwrap();
    assert_eq!(events.first().unwrap().event, "session_start");
    assert_eq!(events.last().unwrap().event, "session_end");
    assert!(events.windows(2).all(|w| w[0].t_us <= w[1].t_us));
    assert!(dir.path().join("client_1.jsonl").exists());
}

#[test]
fn zero_clients_and_zero_duration_shut_down_cleanly() {
    let (frames, scanner, patient) = setup();
    let cfg = SimulationConfig { duration_s: 0.0, client_scripts: vec![], ..SimulationConfig::default() };
    let r = simulate(&frames, scanner, patient, &cfg).unwrap();
    assert_eq!(r.source.frames_sent, 0);
    assert_eq!(r.server.frames_completed, 0);
    assert_eq!(r.server.calibrations, 0);
    assert_eq!(r.server.end_reason, "source_goodbye");
    assert!(r.server_events.iter().all(|e| e.event != "frame_complete" && e.event != "decode_error"));
}

#[test]
fn trigger_without_frames_reports_a_retry() {
    let (frames, scanner, patient) = setup();
    let cfg = SimulationConfig {
        fps: 10.0,
        duration_s: 0.3,
        calibrate_at_s: vec![0.0],
        client_scripts: vec![ClientScript::default()],
        ..SimulationConfig::default()
    };
    // One constant frame at the far range: nothing to register.
    let blank = DepthFrame::filled(frames[0].intrinsics, 0.0).unwrap();
    let r = simulate(&[blank], scanner, patient, &cfg).unwrap();
    assert_eq!(r.server.calibrations, 1);
    assert_eq!(r.server.retries, 1);
    assert_eq!(r.clients[0].retries, 1);
    assert_eq!(r.clients[0].payloads, 0);
}

#[test]
fn skip_shifts_later_cues() {
    let (frames, scanner, patient) = setup();
    let mut server = ServerConfig::default();
    server.cues = vec![
        scanreg::streaming::Cue { cue_id: 1, offset_ms: 0 },
        scanreg::streaming::Cue { cue_id: 2, offset_ms: 20_000 },
        scanreg::streaming::Cue { cue_id: 3, offset_ms: 20_300 },
    ];
    // The skipper waits for calibration, skips ahead to cue 2 and leaves once cue 3 has fired.
    let script: ClientScript = "at 6 skip\n".parse().unwrap();
    let cfg = SimulationConfig {
        fps: 15.0,
        duration_s: 7.0,
        calibrate_at_s: vec![0.2],
        client_scripts: vec![script],
        server,
        ..SimulationConfig::default()
    };
    let r = simulate(&frames, scanner, patient, &cfg).unwrap();
    assert_eq!(r.server.accepted, 1, "calibration must succeed for the cue test");
    let skip = r.server_events.iter().find(|e| e.event == "cue_skip").expect("skip logged");
    let shift = skip.detail["shift_ms"].as_u64().unwrap();
    assert!(shift > 12_000 && shift < 20_000, "shift {shift}");
    let cues: Vec<_> = r.server_events.iter().filter(|e| e.event == "cue").collect();
    assert_eq!(cues.len(), 3, "all cues fire before the session ends");
    assert_eq!(cues[1].detail["shift_ms"].as_u64(), Some(shift));
    assert!(skip.t_us <= cues[1].t_us);
    assert!(cues[2].t_us - cues[1].t_us >= 290_000);
    assert_eq!(r.clients[0].cues, 3);
}

#[test]
fn garbage_datagrams_are_counted_not_fatal() {
    let (_, scanner, patient) = setup();
    let cfg = ServerConfig { idle_timeout_s: 0.2, ..ServerConfig::default() };
    let server = Server::bind("127.0.0.1:0", cfg, scanner, patient).unwrap();
    let addr = server.local_addr().unwrap();
    let log = SessionLog::in_memory();
    std::thread::scope(|s| {
        let h = s.spawn(|| server.run(&log));
        let sock = UdpSocket::bind("127.0.0.1:0").unwrap();
        sock.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        let hello = Packet::new(0, unix_micros(), Payload::Ack(Ack { code: AckCode::Subscribe, ref_seq: 1, text: "x".into() }));
        sock.send_to(&encode(&hello), addr).unwrap();
        sock.send_to(b"not a packet", addr).unwrap();
        let mut bad = encode(&hello);
        bad[30] ^= 1;
        sock.send_to(&bad, addr).unwrap();
        let bye = Packet::new(1, unix_micros(), Payload::Ack(Ack { code: AckCode::Goodbye, ref_seq: 0, text: String::new() }));
        let other = UdpSocket::bind("127.0.0.1:0").unwrap();
        std::thread::sleep(Duration::from_millis(50));
        other.send_to(&encode(&bye), addr).unwrap();
        let summary = h.join().unwrap().unwrap();
        assert_eq!(summary.decode_errors, 2);
        assert_eq!(summary.clients_seen, 1);
        let mut buf = [0u8; 2048];
        let (n, _) = sock.recv_from(&mut buf).unwrap();
        let p = decode(&buf[..n]).unwrap();
        assert!(matches!(p.payload, Payload::Ack(Ack { code: AckCode::Goodbye, .. })));
    });
}
