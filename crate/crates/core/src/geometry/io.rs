//! On-disk formats: `MDF1` depth frames, label grids and ASCII PLY clouds.
//!
//! `MDF1` layout (little-endian): magic `b"MDF1"`, u32 width, u32 height,
//! f32 fx, fy, cx, cy, u64 timestamp_us, u64 sequence, then width×height
//! samples. Depth files carry f32 meters; label files carry one u8 per pixel
//! after the identical header.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;

use super::{CameraIntrinsics, DepthFrame, GeometryError, PointCloud};

pub const FRAME_MAGIC: &[u8; 4] = b"MDF1";
pub const FRAME_HEADER_LEN: usize = 4 + 4 + 4 + 16 + 8 + 8;

fn write_header(out: &mut Vec<u8>, k: &CameraIntrinsics, timestamp_us: u64, sequence: u64) {
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&k.width.to_le_bytes());
    out.extend_from_slice(&k.height.to_le_bytes());
    for v in [k.fx, k.fy, k.cx, k.cy] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&timestamp_us.to_le_bytes());
    out.extend_from_slice(&sequence.to_le_bytes());
}

struct Header {
    intrinsics: CameraIntrinsics,
    timestamp_us: u64,
    sequence: u64,
}

fn read_header(bytes: &[u8]) -> Result<Header, GeometryError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(GeometryError::Format(format!("frame file truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err(GeometryError::Format("bad frame magic, expected MDF1".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let intrinsics = CameraIntrinsics::new(u32_at(4), u32_at(8), f32_at(12), f32_at(16), f32_at(20), f32_at(24))?;
    Ok(Header { intrinsics, timestamp_us: u64_at(28), sequence: u64_at(36) })
}

pub fn encode_frame(frame: &DepthFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + 4 * frame.depth().len());
    write_header(&mut out, &frame.intrinsics, frame.timestamp_us, frame.sequence);
    for d in frame.depth() {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<DepthFrame, GeometryError> {
    let h = read_header(bytes)?;
    let n = h.intrinsics.pixel_count();
    let body = &bytes[FRAME_HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(GeometryError::Format(format!("frame body has {} bytes, expected {}", body.len(), 4 * n)));
    }
    let depth = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    DepthFrame::new(h.intrinsics, h.timestamp_us, h.sequence, depth)
}

pub fn write_frame(path: &Path, frame: &DepthFrame) -> Result<(), GeometryError> {
    fs::write(path, encode_frame(frame)).map_err(|e| GeometryError::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<DepthFrame, GeometryError> {
    let bytes = fs::read(path).map_err(|e| GeometryError::io(path, e))?;
    decode_frame(&bytes)
}

pub fn write_labels(path: &Path, frame: &DepthFrame, labels: &[u8]) -> Result<(), GeometryError> {
    assert_eq!(labels.len(), frame.depth().len(), "label grid size mismatch");
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + labels.len());
    write_header(&mut out, &frame.intrinsics, frame.timestamp_us, frame.sequence);
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| GeometryError::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<(CameraIntrinsics, Vec<u8>), GeometryError> {
    let bytes = fs::read(path).map_err(|e| GeometryError::io(path, e))?;
    let h = read_header(&bytes)?;
    let body = &bytes[FRAME_HEADER_LEN..];
    if body.len() != h.intrinsics.pixel_count() {
        return Err(GeometryError::Format(format!(
            "label body has {} bytes, expected {}",
            body.len(),
            h.intrinsics.pixel_count()
        )));
    }
    Ok((h.intrinsics, body.to_vec()))
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), GeometryError> {
    let file = fs::File::create(path).map_err(|e| GeometryError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
        writeln!(w, "property float x\nproperty float y\nproperty float z\nend_header")?;
        for p in cloud {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
        w.flush()
    })();
    res.map_err(|e| GeometryError::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud, GeometryError> {
    let file = fs::File::open(path).map_err(|e| GeometryError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = |what: &str| -> Result<String, GeometryError> {
        match lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(GeometryError::io(path, e)),
            None => Err(GeometryError::Format(format!("PLY ended while reading {what}"))),
        }
    };
    if next("magic")?.trim() != "ply" {
        return Err(GeometryError::Format("missing PLY magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let line = next("header")?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] | ["comment", ..] | [] => {}
            ["format", other, ..] => return Err(GeometryError::Format(format!("unsupported PLY format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| GeometryError::Format(format!("bad vertex count {n}")))?)
            }
            ["property", "float" | "double", name] => props.push(name.to_string()),
            _ => return Err(GeometryError::Format(format!("unsupported PLY header line: {line}"))),
        }
    }
    if props != ["x", "y", "z"] {
        return Err(GeometryError::Format(format!("PLY vertex properties must be x y z, got {props:?}")));
    }
    let count = count.ok_or_else(|| GeometryError::Format("PLY header lacks element vertex".into()))?;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let line = next("vertices")?;
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() == 3 => points.push(Point3::new(v[0], v[1], v[2])),
            _ => return Err(GeometryError::Format(format!("bad PLY vertex {i}: {line}"))),
        }
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_file_round_trip() {
        let k = CameraIntrinsics::new(4, 3, 100.0, 101.5, 1.5, 1.0).unwrap();
        let depth = (0..12).map(|i| i as f32 * 0.25).collect();
        let f = DepthFrame::new(k, 123_456, 9, depth).unwrap();
        let bytes = encode_frame(&f);
        assert_eq!(&bytes[..4], b"MDF1");
        assert_eq!(bytes.len(), FRAME_HEADER_LEN + 48);
        assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn frame_decode_rejects_bad_input() {
        let k = CameraIntrinsics::centered(2, 2, 10.0).unwrap();
        let mut bytes = encode_frame(&DepthFrame::filled(k, 1.0).unwrap());
        assert!(decode_frame(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_frame(&bytes).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let c = PointCloud::new(vec![Point3::new(0.1, -2.5, 1e-7), Point3::new(3.0, 0.333333333333, -0.0)]).unwrap();
        write_ply(&path, &c).unwrap();
        assert_eq!(read_ply(&path).unwrap(), c);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"));
    }

    #[test]
    fn ply_rejects_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float w\nend_header\n1 2 3 4\n").unwrap();
        assert!(read_ply(&path).is_err());
    }
}
