//! Depth-only markerless registration of a patient and MRI scanner bore.
//!
//! The crate is organised along the calibration pipeline:
//!
//! - [`geometry`]: depth frames, filters, back-projection, rigid transforms.
//! - [`segmentation`]: table-plane removal and patient/bore separation.
//! - [`registration`]: global initialisation, ICP refinement, the accept/retry gate.
//! - [`scene`]: analytic ray-cast renderer used as a ground-truth oracle.
//! - [`streaming`]: the `MRG1` wire protocol, frame buffer, server and client simulators.
//! - [`metrics`]: usability, anxiety and session summary statistics.
//! - [`config`]: the flat `[section] key = value` configuration grammar.

pub mod geometry;
pub mod config;
pub mod scene;
pub mod segmentation;
pub mod registration;
pub mod streaming;
pub mod metrics;
