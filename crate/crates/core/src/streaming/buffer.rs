use std::collections::BTreeMap;

use super::depth::decompress_frame;
use super::packet::{DecodeError, FrameFragment};
use crate::geometry::DepthFrame;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BufferError {
    #[error("frame at {timestamp_us} µs is older than the window (newest {newest_us} µs)")]
    LateFrame { timestamp_us: u64, newest_us: u64 },
    #[error("a frame at {0} µs is already buffered")]
    Duplicate(u64),
    #[error("fragment {index}/{count} does not match the frame at {timestamp_us} µs")]
    FragmentMismatch { timestamp_us: u64, index: u16, count: u16 },
    #[error("frame at {timestamp_us} µs failed to decode: {source}")]
    Corrupt {
        timestamp_us: u64,
        #[source]
        source: DecodeError,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Complete(DepthFrame),
    Partial { parts: Vec<Option<Vec<u8>>>, received: usize },
}

/// A frame dropped from the buffer; `frame` is `None` for one that never completed.
#[derive(Debug, Clone, PartialEq)]
pub struct Evicted {
    pub timestamp_us: u64,
    pub frame: Option<DepthFrame>,
}

/// Outcome of adding a fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentOutcome {
    /// The fragment completed its frame.
    pub completed: bool,
    pub evicted: Vec<Evicted>,
}

/// Time window of received frames keyed by timestamp. Frames may arrive as
/// fragments and only count as complete once every fragment is in.
#[derive(Debug, Clone)]
pub struct FrameBuffer {
    window_us: u64,
    slots: BTreeMap<u64, Slot>,
    accepted: u64,
    evicted: u64,
}

impl FrameBuffer {
    pub fn new(window_s: f64) -> Self {
        assert!(window_s >= 0.0 && window_s.is_finite(), "window must be a non-negative number of seconds");
        FrameBuffer { window_us: (window_s * 1e6).round() as u64, slots: BTreeMap::new(), accepted: 0, evicted: 0 }
    }

    pub fn window_us(&self) -> u64 {
        self.window_us
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Frames ever accepted (a fragmented frame counts once, on its first fragment).
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    /// Newest minus oldest buffered timestamp.
    pub fn span_us(&self) -> u64 {
        match (self.slots.keys().next(), self.slots.keys().next_back()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        }
    }

    fn admit(&self, timestamp_us: u64) -> Result<(), BufferError> {
        if let Some(&newest) = self.slots.keys().next_back() {
            if timestamp_us + self.window_us < newest {
                return Err(BufferError::LateFrame { timestamp_us, newest_us: newest });
            }
        }
        Ok(())
    }

    fn evict(&mut self) -> Vec<Evicted> {
        let Some(&newest) = self.slots.keys().next_back() else {
            return Vec::new();
        };
        let cutoff = newest.saturating_sub(self.window_us);
        let keep = self.slots.split_off(&cutoff);
        let old = std::mem::replace(&mut self.slots, keep);
        self.evicted += old.len() as u64;
        old.into_iter()
            .map(|(timestamp_us, slot)| Evicted {
                timestamp_us,
                frame: match slot {
                    Slot::Complete(f) => Some(f),
                    Slot::Partial { .. } => None,
                },
            })
            .collect()
    }

    /// Inserts a complete frame and evicts everything older than
    /// `newest − window`.
    pub fn push(&mut self, timestamp_us: u64, frame: DepthFrame) -> Result<Vec<Evicted>, BufferError> {
        self.admit(timestamp_us)?;
        if self.slots.contains_key(&timestamp_us) {
            return Err(BufferError::Duplicate(timestamp_us));
        }
        self.slots.insert(timestamp_us, Slot::Complete(frame));
        self.accepted += 1;
        Ok(self.evict())
    }

    /// Adds one fragment of the frame at `timestamp_us`; the last missing
    /// fragment decodes the frame. A frame that fails to decode is dropped.
    pub fn push_fragment(&mut self, timestamp_us: u64, frag: FrameFragment) -> Result<FragmentOutcome, BufferError> {
        let mismatch = BufferError::FragmentMismatch { timestamp_us, index: frag.index, count: frag.count };
        if frag.count == 0 || frag.index >= frag.count {
            return Err(mismatch);
        }
        let count = frag.count as usize;
        let is_new = !self.slots.contains_key(&timestamp_us);
        if is_new {
            self.admit(timestamp_us)?;
        }
        let slot = self
            .slots
            .entry(timestamp_us)
            .or_insert_with(|| Slot::Partial { parts: vec![None; count], received: 0 });
        let Slot::Partial { parts, received } = slot else {
            return Err(BufferError::Duplicate(timestamp_us));
        };
        if parts.len() != count {
            return Err(mismatch);
        }
        let part = &mut parts[frag.index as usize];
        if part.is_some() {
            return Err(BufferError::Duplicate(timestamp_us));
        }
        *part = Some(frag.data);
        *received += 1;
        if is_new {
            self.accepted += 1;
        }

        let mut completed = false;
        if *received == count {
            let data: Vec<u8> = parts.iter_mut().flat_map(|p| p.take().unwrap()).collect();
            match decompress_frame(&data) {
                Ok(frame) => {
                    *slot = Slot::Complete(frame);
                    completed = true;
                }
                Err(source) => {
                    self.slots.remove(&timestamp_us);
                    self.evicted += 1;
                    return Err(BufferError::Corrupt { timestamp_us, source });
                }
            }
        }
        Ok(FragmentOutcome { completed, evicted: self.evict() })
    }

    /// Newest frame whose fragments have all arrived.
    pub fn latest_complete(&self) -> Option<&DepthFrame> {
        self.slots.values().rev().find_map(|s| match s {
            Slot::Complete(f) => Some(f),
            Slot::Partial { .. } => None,
        })
    }

    /// Timestamp of [`FrameBuffer::latest_complete`].
    pub fn latest_complete_timestamp(&self) -> Option<u64> {
        self.slots.iter().rev().find_map(|(t, s)| matches!(s, Slot::Complete(_)).then_some(*t))
    }
}

#[cfg(test)]
mod tests {
    use super::super::depth::fragment_frame;
    use super::super::packet::Payload;
    use super::*;
    use crate::geometry::CameraIntrinsics;

    fn frame(t: u64) -> DepthFrame {
        let k = CameraIntrinsics::centered(8, 6, 10.0).unwrap();
        DepthFrame::new(k, t, t, (0..48).map(|i| 1.0 + i as f32 * 0.01 + t as f32 * 1e-7).collect()).unwrap()
    }

    #[test]
    fn oldest_frame_leaves_the_window() {
        let mut b = FrameBuffer::new(0.5);
        assert!(b.push(0, frame(0)).unwrap().is_empty());
        assert!(b.push(200_000, frame(200_000)).unwrap().is_empty());
        let ev = b.push(600_000, frame(600_000)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].timestamp_us, 0);
        assert!(ev[0].frame.is_some());
        assert_eq!(b.len(), 2);
        assert!(b.span_us() <= b.window_us());
    }

    #[test]
    fn empty_buffer_has_no_frame() {
        assert!(FrameBuffer::new(0.5).latest_complete().is_none());
    }

    #[test]
    fn incomplete_newer_frame_is_skipped() {
        let mut b = FrameBuffer::new(0.5);
        b.push(900_000, frame(900_000)).unwrap();
        let packets = fragment_frame(&frame(1_000_000), 40, 0);
        assert!(packets.len() >= 2);
        let Payload::DepthFrame(first) = packets[0].payload.clone() else { panic!() };
        let out = b.push_fragment(1_000_000, first).unwrap();
        assert!(!out.completed);
        assert_eq!(b.latest_complete().unwrap().timestamp_us, 900_000);
        for p in &packets[1..] {
            let Payload::DepthFrame(f) = p.payload.clone() else { panic!() };
            b.push_fragment(1_000_000, f).unwrap();
        }
        assert_eq!(b.latest_complete().unwrap(), &frame(1_000_000));
    }

    #[test]
    fn late_frame_is_rejected() {
        let mut b = FrameBuffer::new(0.5);
        b.push(1_000_000, frame(1_000_000)).unwrap();
        assert!(matches!(b.push(400_000, frame(400_000)), Err(BufferError::LateFrame { .. })));
        // Out of order but inside the window is fine.
        b.push(700_000, frame(700_000)).unwrap();
        assert_eq!(b.latest_complete().unwrap().timestamp_us, 1_000_000);
        assert!(matches!(b.push(700_000, frame(700_000)), Err(BufferError::Duplicate(_))));
    }

    #[test]
    fn corrupt_reassembly_is_dropped() {
        let mut b = FrameBuffer::new(0.5);
        let f = FrameFragment { index: 0, count: 1, data: vec![1, 2, 3] };
        assert!(matches!(b.push_fragment(5, f), Err(BufferError::Corrupt { .. })));
        assert!(b.is_empty());
        assert_eq!(b.accepted(), b.evicted());
    }
}
