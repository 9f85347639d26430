//! `MRG1` packet framing.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "MRG1" | u8 type | u64 sequence | u64 timestamp_us | u32 payload_len | payload | u32 crc32
//! ```
//!
//! The CRC covers header and payload. Payloads by type:
//!
//! | type | payload |
//! |------|---------|
//! | 1 depth frame | u16 fragment_index, u16 fragment_count, compressed frame bytes |
//! | 2 pose | 9 f64 rotation (row-major), 3 f64 translation |
//! | 3 transform | pose layout, f64 mean matched distance, u16 cue count, cues |
//! | 4 cue trigger | u16 cue_id, u32 offset_ms |
//! | 5 control | u8 command, u32 client_id |
//! | 6 ack | u8 code, u64 ref_seq, u16 text length, UTF-8 text |

use nalgebra::{Matrix3, Vector3};

use crate::geometry::RigidTransform;

pub const MAGIC: &[u8; 4] = b"MRG1";
pub const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 4;
pub const CHECKSUM_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated packet: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("checksum mismatch: header says {expected:08x}, computed {actual:08x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("unknown packet type {0}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PacketType {
    DepthFrame = 1,
    Pose = 2,
    TransformPayload = 3,
    CueTrigger = 4,
    ControlCommand = 5,
    Ack = 6,
}

impl PacketType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => PacketType::DepthFrame,
            2 => PacketType::Pose,
            3 => PacketType::TransformPayload,
            4 => PacketType::CueTrigger,
            5 => PacketType::ControlCommand,
            6 => PacketType::Ack,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PacketType::DepthFrame => "depth_frame",
            PacketType::Pose => "pose",
            PacketType::TransformPayload => "transform_payload",
            PacketType::CueTrigger => "cue_trigger",
            PacketType::ControlCommand => "control_command",
            PacketType::Ack => "ack",
        }
    }
}

/// One slice of a compressed depth frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameFragment {
    pub index: u16,
    pub count: u16,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cue {
    pub cue_id: u16,
    /// Milliseconds after the transform payload is received.
    pub offset_ms: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformPayload {
    pub transform: RigidTransform,
    pub mean_matched_distance: f64,
    pub cues: Vec<Cue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Command {
    Skip = 0,
    Pause = 1,
    Resume = 2,
    RequestRecalibration = 3,
}

impl Command {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Command::Skip,
            1 => Command::Pause,
            2 => Command::Resume,
            3 => Command::RequestRecalibration,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Skip => "skip",
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::RequestRecalibration => "recalibrate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Command::Skip, Command::Pause, Command::Resume, Command::RequestRecalibration].into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlCommand {
    pub command: Command,
    pub client_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AckCode {
    /// Client registration with the server.
    Subscribe = 0,
    /// Sender is leaving; from the sensor source it ends the session.
    Goodbye = 1,
    Received = 2,
    /// Calibration attempt ended in a retry request; the text carries the cause.
    CalibrationRetry = 3,
}

impl AckCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => AckCode::Subscribe,
            1 => AckCode::Goodbye,
            2 => AckCode::Received,
            3 => AckCode::CalibrationRetry,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ack {
    pub code: AckCode,
    pub ref_seq: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    DepthFrame(FrameFragment),
    Pose(RigidTransform),
    Transform(TransformPayload),
    Cue(Cue),
    Control(ControlCommand),
    Ack(Ack),
}

impl Payload {
    pub fn packet_type(&self) -> PacketType {
        match self {
            Payload::DepthFrame(_) => PacketType::DepthFrame,
            Payload::Pose(_) => PacketType::Pose,
            Payload::Transform(_) => PacketType::TransformPayload,
            Payload::Cue(_) => PacketType::CueTrigger,
            Payload::Control(_) => PacketType::ControlCommand,
            Payload::Ack(_) => PacketType::Ack,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub sequence: u64,
    pub timestamp_us: u64,
    pub payload: Payload,
}

impl Packet {
    pub fn new(sequence: u64, timestamp_us: u64, payload: Payload) -> Self {
        Packet { sequence, timestamp_us, payload }
    }

    pub fn packet_type(&self) -> PacketType {
        self.payload.packet_type()
    }
}

fn put_transform(out: &mut Vec<u8>, t: &RigidTransform) {
    let r = t.rotation();
    for i in 0..3 {
        for j in 0..3 {
            out.extend_from_slice(&r[(i, j)].to_le_bytes());
        }
    }
    for v in t.translation().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_payload(p: &Payload) -> Vec<u8> {
    let mut out = Vec::new();
    match p {
        Payload::DepthFrame(f) => {
            out.extend_from_slice(&f.index.to_le_bytes());
            out.extend_from_slice(&f.count.to_le_bytes());
            out.extend_from_slice(&f.data);
        }
        Payload::Pose(t) => put_transform(&mut out, t),
        Payload::Transform(tp) => {
            put_transform(&mut out, &tp.transform);
            out.extend_from_slice(&tp.mean_matched_distance.to_le_bytes());
            out.extend_from_slice(&(tp.cues.len() as u16).to_le_bytes());
            for c in &tp.cues {
                out.extend_from_slice(&c.cue_id.to_le_bytes());
                out.extend_from_slice(&c.offset_ms.to_le_bytes());
            }
        }
        Payload::Cue(c) => {
            out.extend_from_slice(&c.cue_id.to_le_bytes());
            out.extend_from_slice(&c.offset_ms.to_le_bytes());
        }
        Payload::Control(c) => {
            out.push(c.command as u8);
            out.extend_from_slice(&c.client_id.to_le_bytes());
        }
        Payload::Ack(a) => {
            out.push(a.code as u8);
            out.extend_from_slice(&a.ref_seq.to_le_bytes());
            out.extend_from_slice(&(a.text.len() as u16).to_le_bytes());
            out.extend_from_slice(a.text.as_bytes());
        }
    }
    out
}

/// Serializes `packet`.
///
/// # Panics
/// If a variable-length field exceeds its length prefix: more than 65535
/// cues, an ack text over 65535 bytes or a payload over 4 GiB.
pub fn encode(packet: &Packet) -> Vec<u8> {
    let payload = encode_payload(&packet.payload);
    if let Payload::Transform(tp) = &packet.payload {
        assert!(tp.cues.len() <= u16::MAX as usize, "too many cues");
    }
    if let Payload::Ack(a) = &packet.payload {
        assert!(a.text.len() <= u16::MAX as usize, "ack text too long");
    }
    let len = u32::try_from(payload.len()).expect("payload exceeds u32 length");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.push(packet.packet_type() as u8);
    out.extend_from_slice(&packet.sequence.to_le_bytes());
    out.extend_from_slice(&packet.timestamp_us.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Bounds-checked little-endian reader over a payload.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(DecodeError::Malformed(format!(
                "payload ends at byte {} but field needs {}",
                self.bytes.len(),
                end
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn transform(&mut self) -> Result<RigidTransform, DecodeError> {
        let mut r = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r[(i, j)] = self.f64()?;
            }
        }
        let t = Vector3::new(self.f64()?, self.f64()?, self.f64()?);
        RigidTransform::new(r, t).map_err(|e| DecodeError::Malformed(e.to_string()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.pos != self.bytes.len() {
            return Err(DecodeError::Malformed(format!("{} trailing payload bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn decode_payload(kind: PacketType, bytes: &[u8]) -> Result<Payload, DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    let p = match kind {
        PacketType::DepthFrame => {
            let index = r.u16()?;
            let count = r.u16()?;
            if count == 0 || index >= count {
                return Err(DecodeError::Malformed(format!("fragment {index} of {count}")));
            }
            Payload::DepthFrame(FrameFragment { index, count, data: r.rest().to_vec() })
        }
        PacketType::Pose => Payload::Pose(r.transform()?),
        PacketType::TransformPayload => {
            let transform = r.transform()?;
            let mean_matched_distance = r.f64()?;
            if !(mean_matched_distance >= 0.0 && mean_matched_distance.is_finite()) {
                return Err(DecodeError::Malformed(format!("mean matched distance {mean_matched_distance}")));
            }
            let n = r.u16()? as usize;
            let mut cues = Vec::with_capacity(n);
            for _ in 0..n {
                cues.push(Cue { cue_id: r.u16()?, offset_ms: r.u32()? });
            }
            Payload::Transform(TransformPayload { transform, mean_matched_distance, cues })
        }
        PacketType::CueTrigger => Payload::Cue(Cue { cue_id: r.u16()?, offset_ms: r.u32()? }),
        PacketType::ControlCommand => {
            let c = r.u8()?;
            let command = Command::from_u8(c).ok_or_else(|| DecodeError::Malformed(format!("unknown command {c}")))?;
            Payload::Control(ControlCommand { command, client_id: r.u32()? })
        }
        PacketType::Ack => {
            let c = r.u8()?;
            let code = AckCode::from_u8(c).ok_or_else(|| DecodeError::Malformed(format!("unknown ack code {c}")))?;
            let ref_seq = r.u64()?;
            let n = r.u16()? as usize;
            let text = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| DecodeError::Malformed("ack text is not UTF-8".into()))?;
            Payload::Ack(Ack { code, ref_seq, text })
        }
    };
    r.finish()?;
    Ok(p)
}

/// Parses one complete datagram. Checks run in order: length, magic,
/// declared length, checksum, type, payload.
pub fn decode(bytes: &[u8]) -> Result<Packet, DecodeError> {
    let min = HEADER_LEN + CHECKSUM_LEN;
    if bytes.len() < min {
        return Err(DecodeError::Truncated { needed: min, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let kind = bytes[4];
    let sequence = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let timestamp_us = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let len = u32::from_le_bytes(bytes[21..25].try_into().unwrap()) as usize;
    let total = HEADER_LEN + len + CHECKSUM_LEN;
    if bytes.len() < total {
        return Err(DecodeError::Truncated { needed: total, got: bytes.len() });
    }
    if bytes.len() > total {
        return Err(DecodeError::Malformed(format!("{} bytes after the checksum", bytes.len() - total)));
    }
    let body_end = HEADER_LEN + len;
    let expected = u32::from_le_bytes(bytes[body_end..total].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[..body_end]);
    if expected != actual {
        return Err(DecodeError::ChecksumMismatch { expected, actual });
    }
    let kind = PacketType::from_u8(kind).ok_or(DecodeError::UnknownType(kind))?;
    let payload = decode_payload(kind, &bytes[HEADER_LEN..body_end])?;
    Ok(Packet { sequence, timestamp_us, payload })
}
