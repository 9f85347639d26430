//! Python bindings: metric scoring, scene rendering, one-shot calibration
//! and the wire codec.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use scanreg::metrics::{self, Metric};
use scanreg::registration::{calibrate, CalibrationConfig};
use scanreg::scene::{default_intrinsics, render_depth, sample_capsule_surface, sample_model_cloud, SceneConfig};
use scanreg::streaming::{self, Cue, Packet, Payload};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// SUS score (0-100) of ten responses in 1..=5.
#[pyfunction]
fn sus_score(responses: Vec<u8>) -> PyResult<f64> {
    metrics::sus_score(&responses).map_err(value_error)
}

/// Percent change of the STAI score; negative means anxiety went down.
#[pyfunction]
fn anxiety_reduction(pre: f64, post: f64) -> PyResult<f64> {
    metrics::anxiety_reduction(pre, post).map_err(value_error)
}

/// Mean and sample SD per metric of a session CSV, as `{metric: (mean, sd)}`.
#[pyfunction]
fn summarize_sessions<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let records = metrics::load_sessions(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let summary = metrics::summarize(&records).map_err(value_error)?;
    let out = PyDict::new(py);
    for m in Metric::ALL {
        let s = summary.get(m);
        out.set_item(m.key(), (s.mean, s.sd))?;
    }
    out.set_item("sessions", summary.sessions)?;
    Ok(out)
}

/// Renders a random-viewpoint scene; returns `(width, height, depth)` with
/// depth as a flat row-major list of metres (0 marks no return).
#[pyfunction]
#[pyo3(signature = (seed, noise_sigma = 0.003, dropout_rate = 0.05))]
fn render_scene(seed: u64, noise_sigma: f64, dropout_rate: f64) -> PyResult<(usize, usize, Vec<f32>)> {
    let scene = SceneConfig::random(seed, noise_sigma, dropout_rate);
    scene.validate().map_err(value_error)?;
    let (frame, _) = render_depth(&scene, &default_intrinsics());
    Ok((frame.width(), frame.height(), frame.depth().to_vec()))
}

/// Renders a random scene, calibrates it and compares with ground truth.
#[pyfunction]
#[pyo3(signature = (seed, noise_sigma = 0.003, dropout_rate = 0.05))]
fn calibrate_scene<'py>(py: Python<'py>, seed: u64, noise_sigma: f64, dropout_rate: f64) -> PyResult<Bound<'py, PyDict>> {
    let scene = SceneConfig::random(seed, noise_sigma, dropout_rate);
    scene.validate().map_err(value_error)?;
    let (frame, gt) = render_depth(&scene, &default_intrinsics());
    let scanner = sample_model_cloud(&scene.scanner, 40_000, 99);
    let patient = sample_capsule_surface(&scene.torso, 5_000, 98);
    let outcome = calibrate(&[frame], &scanner, &patient, &CalibrationConfig::default()).map_err(value_error)?;
    let out = PyDict::new(py);
    out.set_item("accepted", outcome.accepted())?;
    out.set_item("cause", outcome.cause.clone())?;
    out.set_item("elapsed_s", outcome.elapsed_s)?;
    if let Some(r) = &outcome.result {
        out.set_item("translation_error_m", r.transform.translation_distance_to(&gt.camera_to_scanner))?;
        out.set_item("rotation_error_deg", r.transform.rotation_angle_to(&gt.camera_to_scanner).to_degrees())?;
        out.set_item("mean_matched_distance_m", r.mean_matched_distance)?;
        out.set_item("transform", r.transform.to_row_major().to_vec())?;
    }
    Ok(out)
}

/// Encodes a cue-trigger packet.
#[pyfunction]
fn encode_cue<'py>(py: Python<'py>, sequence: u64, timestamp_us: u64, cue_id: u16, offset_ms: u32) -> Bound<'py, PyBytes> {
    let p = Packet::new(sequence, timestamp_us, Payload::Cue(Cue { cue_id, offset_ms }));
    PyBytes::new(py, &streaming::encode(&p))
}

/// Decodes any packet header; returns `(type_name, sequence, timestamp_us)`.
#[pyfunction]
fn decode_packet(data: &[u8]) -> PyResult<(String, u64, u64)> {
    let p = streaming::decode(data).map_err(value_error)?;
    Ok((p.packet_type().name().to_string(), p.sequence, p.timestamp_us))
}

#[pymodule]
fn scanreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(sus_score, m)?)?;
    m.add_function(wrap_pyfunction!(anxiety_reduction, m)?)?;
    m.add_function(wrap_pyfunction!(summarize_sessions, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(encode_cue, m)?)?;
    m.add_function(wrap_pyfunction!(decode_packet, m)?)?;
    Ok(())
}
