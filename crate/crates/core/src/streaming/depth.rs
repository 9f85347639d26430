//! Lossless depth-frame compression and fragmentation.
//!
//! A compressed frame is a fixed header (u32 width, u32 height, f64 fx, fy,
//! cx, cy, u64 timestamp_us, u64 sequence) followed by the samples. Samples
//! are taken as their f32 bit patterns; each is stored as the zigzag-encoded
//! wrapping difference to the previous one, written as a LEB128 varint. A zero
//! difference is followed by a second varint holding the length of the run
//! of zero differences, so constant stretches and dropout holes collapse to a
//! couple of bytes.

use super::packet::{DecodeError, FrameFragment, Packet, Payload};
use crate::geometry::{CameraIntrinsics, DepthFrame};

const FRAME_HEADER_LEN: usize = 4 + 4 + 4 * 8 + 8 + 8;

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn get_varint(bytes: &[u8], pos: &mut usize) -> Result<u64, DecodeError> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*pos).ok_or_else(|| DecodeError::Malformed("depth stream ends inside a varint".into()))?;
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(DecodeError::Malformed("varint longer than 64 bits".into()))
}

fn zigzag(d: i32) -> u32 {
    ((d << 1) ^ (d >> 31)) as u32
}

fn unzigzag(z: u32) -> i32 {
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}

pub fn compress_frame(frame: &DepthFrame) -> Vec<u8> {
    let k = &frame.intrinsics;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + frame.depth().len());
    out.extend_from_slice(&k.width.to_le_bytes());
    out.extend_from_slice(&k.height.to_le_bytes());
    for v in [k.fx, k.fy, k.cx, k.cy] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&frame.timestamp_us.to_le_bytes());
    out.extend_from_slice(&frame.sequence.to_le_bytes());

    let mut prev = 0u32;
    let mut zeros = 0u64;
    for d in frame.depth() {
        let bits = d.to_bits();
        let z = zigzag(bits.wrapping_sub(prev) as i32);
        prev = bits;
        if z == 0 {
            zeros += 1;
            continue;
        }
        if zeros > 0 {
            put_varint(&mut out, 0);
            put_varint(&mut out, zeros);
            zeros = 0;
        }
        put_varint(&mut out, u64::from(z));
    }
    if zeros > 0 {
        put_varint(&mut out, 0);
        put_varint(&mut out, zeros);
    }
    out
}

pub fn decompress_frame(bytes: &[u8]) -> Result<DepthFrame, DecodeError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(DecodeError::Malformed(format!("compressed frame of {} bytes has no header", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let k = CameraIntrinsics::new(u32_at(0), u32_at(4), f64_at(8), f64_at(16), f64_at(24), f64_at(32))
        .map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let (timestamp_us, sequence) = (u64_at(40), u64_at(48));
    let n = k.pixel_count();
    let mut depth = Vec::with_capacity(n);
    let mut pos = FRAME_HEADER_LEN;
    let mut prev = 0u32;
    while pos < bytes.len() {
        let v = get_varint(bytes, &mut pos)?;
        if v == 0 {
            let run = get_varint(bytes, &mut pos)?;
            if run == 0 || depth.len() as u64 + run > n as u64 {
                return Err(DecodeError::Malformed(format!("run of {run} overflows a {n}-sample frame")));
            }
            depth.extend(std::iter::repeat_n(f32::from_bits(prev), run as usize));
        } else {
            let z = u32::try_from(v).map_err(|_| DecodeError::Malformed("sample delta exceeds 32 bits".into()))?;
            if depth.len() == n {
                return Err(DecodeError::Malformed(format!("more than {n} samples")));
            }
            prev = prev.wrapping_add(unzigzag(z) as u32);
            depth.push(f32::from_bits(prev));
        }
    }
    if depth.len() != n {
        return Err(DecodeError::Malformed(format!("{} samples for a {n}-sample frame", depth.len())));
    }
    let frame = DepthFrame::new(k, timestamp_us, sequence, depth).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    Ok(frame)
}

/// Compresses `frame` and splits it into depth-frame packets carrying at most
/// `max_fragment_bytes` of frame data each. Packets are numbered from
/// `first_sequence` and stamped with the frame's timestamp, which is also the
/// reassembly key.
pub fn fragment_frame(frame: &DepthFrame, max_fragment_bytes: usize, first_sequence: u64) -> Vec<Packet> {
    assert!(max_fragment_bytes > 0, "fragment size must be positive");
    let data = compress_frame(frame);
    let chunks: Vec<&[u8]> = data.chunks(max_fragment_bytes).collect();
    let count = u16::try_from(chunks.len()).expect("frame needs more than 65535 fragments");
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            Packet::new(
                first_sequence + i as u64,
                frame.timestamp_us,
                Payload::DepthFrame(FrameFragment { index: i as u16, count, data: c.to_vec() }),
            )
        })
        .collect()
}
