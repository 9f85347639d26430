use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use scanreg::config::Config;
use scanreg::geometry::io::{read_frame, read_ply, write_frame, write_labels, write_ply};
use scanreg::geometry::{DepthFrame, PointCloud, RigidTransform};
use scanreg::metrics::{load_sessions, normalize_for_chart, summarize, write_chart, ChartMapping};
use scanreg::registration::{calibrate, CalibrationConfig};
use scanreg::scene::{
    intrinsics_from_config, render_depth, sample_capsule_surface, sample_model_cloud, Label, SceneConfig,
};
use scanreg::streaming::{
    run_client, run_source, simulate as run_simulation, ClientConfig, ClientScript, Server, ServerConfig, SessionLog,
    SimulationConfig, SourceConfig,
};

use crate::manifest::RunManifest;
use crate::{input, ClientArgs, Failure, GenerateArgs, Globals, RegisterArgs, ReportArgs, ServeArgs, SimulateArgs, SourceArgs};

type Result<T> = std::result::Result<T, Failure>;

/// Contents of `ground_truth.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub camera_to_scanner: RigidTransform,
    pub scene: SceneConfig,
    pub label_counts: BTreeMap<String, usize>,
    pub valid_pixels: usize,
}

fn write_json(path: &Path, value: &impl Serialize, manifest: &mut RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("outputs serialize") + "\n";
    std::fs::write(path, text).map_err(input(path.display()))?;
    manifest.output(path);
    Ok(())
}

fn print_json(value: &impl Serialize) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(value).expect("outputs serialize"));
}

fn scene_from(cfg: &Config, seed: Option<u64>, manifest: &mut RunManifest) -> Result<SceneConfig> {
    let mut scene = SceneConfig::from_config(cfg).map_err(input("scene config"))?;
    if let Some(s) = seed {
        scene.seed = s;
    }
    manifest.seeds.insert("scene".into(), scene.seed);
    Ok(scene)
}

/// Scanner and patient model clouds: from PLY files when given (flags win
/// over `[models] scanner_ply` / `patient_ply`), otherwise sampled from the
/// scene geometry with `[models] scanner_points`, `patient_points`, `seed`.
fn models(
    cfg: &Config,
    scene: &SceneConfig,
    scanner_flag: Option<&PathBuf>,
    patient_flag: Option<&PathBuf>,
    manifest: &mut RunManifest,
) -> Result<(PointCloud, PointCloud)> {
    let s = cfg.section("models");
    let get_path = |key: &str| s.and_then(|s| s.raw(key)).map(PathBuf::from);
    let num = |key: &str, default: usize| -> Result<usize> {
        s.map_or(Ok(default), |s| s.get_or(key, default)).map_err(input("models config"))
    };
    let seed: u64 = s.map_or(Ok(99), |s| s.get_or("seed", 99)).map_err(input("models config"))?;
    manifest.seeds.insert("models".into(), seed);
    let mut load = |path: Option<PathBuf>| -> Result<Option<PointCloud>> {
        match path {
            Some(p) => {
                manifest.input(&p);
                read_ply(&p).map(Some).map_err(input(p.display()))
            }
            None => Ok(None),
        }
    };
    let scanner = match load(scanner_flag.cloned().or_else(|| get_path("scanner_ply")))? {
        Some(c) => c,
        None => sample_model_cloud(&scene.scanner, num("scanner_points", 40_000)?, seed),
    };
    let patient = match load(patient_flag.cloned().or_else(|| get_path("patient_ply")))? {
        Some(c) => c,
        None => sample_capsule_surface(&scene.torso, num("patient_points", 5_000)?, seed.wrapping_sub(1)),
    };
    Ok((scanner, patient))
}

fn calibration_config(g: &Globals, manifest: &mut RunManifest) -> Result<CalibrationConfig> {
    let mut cal = CalibrationConfig::from_config(&g.config).map_err(input("calibration config"))?;
    if let Some(s) = g.seed {
        cal.registration.seed = s;
    }
    manifest.seeds.insert("registration".into(), cal.registration.seed);
    Ok(cal)
}

pub fn generate_scene(g: &Globals, a: &GenerateArgs, manifest: &mut RunManifest) -> Result<()> {
    let mut scene = scene_from(&g.config, g.seed, manifest)?;
    if a.random_pose {
        scene.camera_pose = SceneConfig::random(scene.seed, scene.noise_sigma, scene.dropout_rate).camera_pose;
    }
    let k = intrinsics_from_config(&g.config).map_err(input("camera config"))?;
    let (frame, gt) = manifest.time("render", || render_depth(&scene, &k));
    let (scanner, patient) = models(&g.config, &scene, None, None, manifest)?;

    let frame_path = g.out_dir.join("frame.mdf");
    write_frame(&frame_path, &frame).map_err(input(frame_path.display()))?;
    manifest.output(&frame_path);
    let labels_path = g.out_dir.join("labels.mdl");
    write_labels(&labels_path, &frame, &gt.label_bytes()).map_err(input(labels_path.display()))?;
    manifest.output(&labels_path);
    for (name, cloud) in [("scanner_model.ply", &scanner), ("patient_model.ply", &patient)] {
        let p = g.out_dir.join(name);
        write_ply(&p, cloud).map_err(input(p.display()))?;
        manifest.output(&p);
    }
    let mut label_counts = BTreeMap::new();
    for l in [Label::Background, Label::Table, Label::Torso, Label::Bore] {
        label_counts.insert(format!("{l:?}").to_lowercase(), gt.labels.iter().filter(|&&x| x == l).count());
    }
    let truth = GroundTruthFile {
        camera_to_scanner: gt.camera_to_scanner,
        scene,
        label_counts,
        valid_pixels: frame.valid_count(),
    };
    write_json(&g.out_dir.join("ground_truth.json"), &truth, manifest)?;
    print_json(&json!({"outputs": manifest.outputs, "valid_pixels": truth.valid_pixels}));
    Ok(())
}

pub fn register(g: &Globals, a: &RegisterArgs, manifest: &mut RunManifest) -> Result<()> {
    manifest.input(&a.frame);
    let frame = read_frame(&a.frame).map_err(input(a.frame.display()))?;
    let truth: Option<GroundTruthFile> = match &a.ground_truth {
        Some(p) => {
            manifest.input(p);
            let text = std::fs::read_to_string(p).map_err(input(p.display()))?;
            Some(serde_json::from_str(&text).map_err(input(p.display()))?)
        }
        None => None,
    };
    let cal = calibration_config(g, manifest)?;
    let scene = scene_from(&g.config, None, manifest)?;
    let (scanner, patient) = models(&g.config, &scene, a.model.as_ref(), a.patient_model.as_ref(), manifest)?;
    let outcome = manifest
        .time("calibration", || calibrate(std::slice::from_ref(&frame), &scanner, &patient, &cal))
        .map_err(input("registration"))?;

    let mut result = outcome.to_json();
    if let (Some(t), Some(r)) = (&truth, &outcome.result) {
        result["translation_error_m"] = json!(r.transform.translation_distance_to(&t.camera_to_scanner));
        result["rotation_error_deg"] = json!(r.transform.rotation_angle_to(&t.camera_to_scanner).to_degrees());
    }
    write_json(&g.out_dir.join("result.json"), &result, manifest)?;
    print_json(&result);
    if outcome.accepted() {
        Ok(())
    } else {
        Err(Failure::Retry(format!(
            "calibration asks for a new scan: {}",
            outcome.cause.as_deref().unwrap_or("validation failed")
        )))
    }
}

pub fn serve(g: &Globals, a: &ServeArgs, manifest: &mut RunManifest) -> Result<()> {
    let mut cfg = ServerConfig::from_config(&g.config).map_err(input("server config"))?;
    cfg.calibration = calibration_config(g, manifest)?;
    let scene = scene_from(&g.config, None, manifest)?;
    let (scanner, patient) = models(&g.config, &scene, a.model.as_ref(), a.patient_model.as_ref(), manifest)?;
    let server = Server::bind(a.listen.as_str(), cfg, scanner, patient)
        .map_err(|e| Failure::Input(format!("cannot listen on {}: {e}", a.listen)))?;
    let addr = server.local_addr().map_err(input("socket"))?;
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
    let log_path = g.out_dir.join("session.jsonl");
    let log = SessionLog::to_file(&log_path).map_err(input(log_path.display()))?;
    manifest.output(&log_path);
    let summary = manifest.time("session", || server.run(&log)).map_err(input("server"))?;
    write_json(&g.out_dir.join("session_summary.json"), &summary, manifest)?;
    print_json(&summary);
    Ok(())
}

fn load_script(path: Option<&PathBuf>, manifest: &mut RunManifest) -> Result<ClientScript> {
    match path {
        Some(p) => {
            manifest.input(p);
            let text = std::fs::read_to_string(p).map_err(input(p.display()))?;
            text.parse().map_err(input(p.display()))
        }
        None => Ok(ClientScript::default()),
    }
}

pub fn client(g: &Globals, a: &ClientArgs, manifest: &mut RunManifest) -> Result<()> {
    let script = load_script(a.script.as_ref(), manifest)?;
    let model = match &a.model {
        Some(p) => {
            manifest.input(p);
            read_ply(p).map_err(input(p.display()))?
        }
        None => models(&g.config, &scene_from(&g.config, None, manifest)?, None, None, manifest)?.1,
    };
    let cfg = ClientConfig {
        client_id: a.client_id,
        name: format!("client-{}", a.client_id),
        model,
        script,
        max_duration_s: a.max_duration_s,
    };
    let log_path = g.out_dir.join("client.jsonl");
    let log = SessionLog::to_file(&log_path).map_err(input(log_path.display()))?;
    manifest.output(&log_path);
    let summary = manifest.time("session", || run_client(a.connect, &cfg, &log)).map_err(input("client"))?;
    write_json(&g.out_dir.join("client_summary.json"), &summary, manifest)?;
    print_json(&summary);
    Ok(())
}

/// Three renders of the scene with consecutive noise seeds.
fn render_frames(cfg: &Config, scene: &SceneConfig, manifest: &mut RunManifest) -> Result<Vec<DepthFrame>> {
    let k = intrinsics_from_config(cfg).map_err(input("camera config"))?;
    Ok(manifest.time("render", || {
        (0..3u64)
            .map(|i| {
                let mut s = *scene;
                s.seed = scene.seed.wrapping_add(i);
                render_depth(&s, &k).0
            })
            .collect()
    }))
}

pub fn source(g: &Globals, a: &SourceArgs, manifest: &mut RunManifest) -> Result<()> {
    let frames = if a.frame.is_empty() {
        render_frames(&g.config, &scene_from(&g.config, g.seed, manifest)?, manifest)?
    } else {
        a.frame
            .iter()
            .map(|p| {
                manifest.input(p);
                read_frame(p).map_err(input(p.display()))
            })
            .collect::<Result<_>>()?
    };
    let cfg = SourceConfig {
        fps: a.fps,
        duration_s: a.duration_s,
        fragment_bytes: a.fragment_bytes,
        calibrate_at_s: a.calibrate_at.clone(),
        frames,
    };
    let summary = manifest.time("stream", || run_source(a.connect, &cfg)).map_err(input("source"))?;
    write_json(&g.out_dir.join("source_summary.json"), &summary, manifest)?;
    print_json(&summary);
    Ok(())
}

pub fn simulate(g: &Globals, a: &SimulateArgs, manifest: &mut RunManifest) -> Result<()> {
    let scene_cfg = match &a.scene {
        Some(p) => {
            manifest.input(p);
            Config::load(p).map_err(input(p.display()))?
        }
        None => g.config.clone(),
    };
    let scene = scene_from(&scene_cfg, g.seed, manifest)?;
    let frames = render_frames(&scene_cfg, &scene, manifest)?;
    let (scanner, patient) = models(&scene_cfg, &scene, None, None, manifest)?;
    let mut server = ServerConfig::from_config(&g.config).map_err(input("server config"))?;
    server.calibration = calibration_config(g, manifest)?;
    let script = load_script(a.client_script.as_ref(), manifest)?;
    let cfg = SimulationConfig {
        fps: a.fps,
        duration_s: a.duration_s,
        fragment_bytes: a.fragment_bytes,
        calibrate_at_s: a.calibrate_at.clone(),
        client_scripts: vec![script; a.clients],
        server,
        log_dir: Some(g.out_dir.clone()),
    };
    let report = manifest
        .time("session", || run_simulation(&frames, scanner, patient, &cfg))
        .map_err(|e| Failure::Input(format!("simulation: {e}")))?;
    manifest.output(&g.out_dir.join("session.jsonl"));
    for i in 0..a.clients {
        manifest.output(&g.out_dir.join(format!("client_{i}.jsonl")));
    }
    write_json(&g.out_dir.join("simulation.json"), &report, manifest)?;

    let payloads: u64 = report.clients.iter().map(|c| c.payloads).sum();
    let latency = if payloads > 0 {
        Some(report.clients.iter().map(|c| c.mean_delivery_us * c.payloads as f64).sum::<f64>() / payloads as f64)
    } else {
        None
    };
    print_json(&json!({
        "frames_sent": report.source.frames_sent,
        "frames_received": report.server.frames_completed,
        "decode_errors": report.server.decode_errors,
        "calibrations": report.server.calibrations,
        "accepted": report.server.accepted,
        "retries": report.server.retries,
        "clients": report.clients.len(),
        "mean_payload_latency_us": latency,
        "max_buffer_span_us": report.server.max_buffer_span_us,
        "wall_s": report.wall_s,
    }));
    Ok(())
}

pub fn report(g: &Globals, a: &ReportArgs, manifest: &mut RunManifest) -> Result<()> {
    manifest.input(&a.input);
    manifest.input(&a.baseline);
    let sessions = load_sessions(&a.input).map_err(input(a.input.display()))?;
    let baseline = load_sessions(&a.baseline).map_err(input(a.baseline.display()))?;
    let summary = summarize(&sessions).map_err(input(a.input.display()))?;
    let base = summarize(&baseline).map_err(input(a.baseline.display()))?;
    let mapping = if g.config.subsections("chart").next().is_some() {
        ChartMapping::from_config(&g.config).map_err(input("chart config"))?
    } else {
        ChartMapping::default_mapping()
    };
    let rows = normalize_for_chart(&summary, &base, &mapping);
    let file = std::fs::File::create(&a.chart_out).map_err(input(a.chart_out.display()))?;
    write_chart(&rows, file).map_err(input(a.chart_out.display()))?;
    manifest.output(&a.chart_out);
    let out = json!({"system": summary, "baseline": base});
    write_json(&g.out_dir.join("summary.json"), &out, manifest)?;
    print_json(&out);
    Ok(())
}
