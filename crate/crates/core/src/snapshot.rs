//! Binary snapshots of a memory map.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FKMM" | version u32 | frame_size u64 | frame_count u64
//! region_count u64 | (start u64, len u64) * region_count
//! per frame: ref_count u32 | state u16 | kind u16 | payload u64
//! store bytes (frame_size * frame_count)
//! ```
//!
//! State codes: 0 unused, 0x100 + typed kind, 0x200 untyped.

use std::sync::Arc;

use thiserror::Error;

use crate::mem::{FrameMeta, FrameState, MapConfig, MemoryMap, MetaKindId, MetaTag, Region, TypedKind};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"FKMM";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("not a snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    BadVersion(u32),
    #[error("snapshot truncated at byte {0}")]
    Truncated(usize),
    #[error("bad state code {code:#x} for frame {frame}")]
    BadState { frame: usize, code: u16 },
    #[error("inconsistent metadata for frame {0}")]
    BadMeta(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid geometry: {0}")]
    Geometry(String),
}

fn state_code(s: FrameState) -> u16 {
    match s {
        FrameState::Unused => 0,
        FrameState::Typed(k) => 0x100 + k.code(),
        FrameState::Untyped(_) => 0x200,
    }
}

fn decode_state(code: u16, kind: MetaKindId) -> Option<FrameState> {
    match code {
        0 => Some(FrameState::Unused),
        0x200 => Some(FrameState::Untyped(kind)),
        c if c & 0xff00 == 0x100 => TypedKind::from_code(c & 0xff).map(FrameState::Typed),
        _ => None,
    }
}

impl MemoryMap {
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.frame_count() * 16 + self.total_bytes());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frame_size() as u64).to_le_bytes());
        out.extend_from_slice(&(self.frame_count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.usable().len() as u64).to_le_bytes());
        for r in self.usable() {
            out.extend_from_slice(&(r.start.0 as u64).to_le_bytes());
            out.extend_from_slice(&(r.len as u64).to_le_bytes());
        }
        for m in self.meta_all() {
            out.extend_from_slice(&m.ref_count.to_le_bytes());
            out.extend_from_slice(&state_code(m.state).to_le_bytes());
            out.extend_from_slice(&m.tag.kind.0.to_le_bytes());
            out.extend_from_slice(&m.tag.payload.to_le_bytes());
        }
        let start = out.len();
        out.resize(start + self.total_bytes(), 0);
        self.store().read(0, &mut out[start..]);
        out
    }

    /// Rebuilds a map from a snapshot. Live frames come back with their
    /// recorded counts but no handles, so they stay claimed for the life of
    /// the map.
    pub fn from_snapshot(bytes: &[u8]) -> Result<Arc<MemoryMap>, SnapshotError> {
        let snap = Snapshot::parse(bytes)?;
        let map = MemoryMap::new(MapConfig::new(snap.frame_size, snap.frame_count, snap.regions.clone()))
            .map_err(|e| SnapshotError::Geometry(e.to_string()))?;
        for (i, m) in snap.meta.iter().enumerate() {
            if *m != FrameMeta::UNUSED {
                map.meta_store(i, *m);
                map.note_claim();
            }
        }
        map.store().write(0, snap.store);
        Ok(map)
    }
}

/// A parsed snapshot borrowing its store bytes.
#[derive(Debug)]
pub struct Snapshot<'a> {
    pub frame_size: usize,
    pub frame_count: usize,
    pub regions: Vec<Region>,
    pub meta: Vec<FrameMeta>,
    pub store: &'a [u8],
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(SnapshotError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SnapshotError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, SnapshotError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| SnapshotError::Geometry(format!("{v} does not fit usize")))
    }
}

impl<'a> Snapshot<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self, SnapshotError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| SnapshotError::BadMagic)? != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::BadVersion(version));
        }
        let frame_size = r.usize()?;
        let frame_count = r.usize()?;
        let total = frame_size
            .checked_mul(frame_count)
            .filter(|&t| t <= bytes.len())
            .ok_or(SnapshotError::Truncated(bytes.len()))?;
        let nregions = r.usize()?;
        if nregions > bytes.len() / 16 {
            return Err(SnapshotError::Truncated(bytes.len()));
        }
        let mut regions = Vec::with_capacity(nregions);
        for _ in 0..nregions {
            let start = r.usize()?;
            let len = r.usize()?;
            regions.push(Region::new(start, len));
        }
        if frame_count > bytes.len() / 16 {
            return Err(SnapshotError::Truncated(bytes.len()));
        }
        let mut meta = Vec::with_capacity(frame_count);
        for frame in 0..frame_count {
            let ref_count = r.u32()?;
            let code = r.u16()?;
            let kind = MetaKindId(r.u16()?);
            let payload = r.u64()?;
            let state = decode_state(code, kind).ok_or(SnapshotError::BadState { frame, code })?;
            let m = FrameMeta { ref_count, state, tag: MetaTag { kind, payload } };
            if !m.is_consistent() {
                return Err(SnapshotError::BadMeta(frame));
            }
            meta.push(m);
        }
        let store = r.take(total)?;
        if r.pos != bytes.len() {
            return Err(SnapshotError::Trailing(bytes.len() - r.pos));
        }
        Ok(Snapshot { frame_size, frame_count, regions, meta, store })
    }
}

/// One frame that differs between two snapshots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameDelta {
    pub frame: usize,
    pub before: FrameMeta,
    pub after: FrameMeta,
    pub bytes_changed: usize,
    /// First differing byte offset within the frame.
    pub first_change: Option<usize>,
}

/// Frame-level differences. Snapshots of different geometry are an error.
pub fn snapshot_diff(a: &Snapshot<'_>, b: &Snapshot<'_>) -> Result<Vec<FrameDelta>, SnapshotError> {
    if a.frame_size != b.frame_size || a.frame_count != b.frame_count {
        return Err(SnapshotError::Geometry(format!(
            "{}x{} vs {}x{}",
            a.frame_count, a.frame_size, b.frame_count, b.frame_size
        )));
    }
    let fs = a.frame_size;
    let mut out = Vec::new();
    for frame in 0..a.frame_count {
        let xa = &a.store[frame * fs..(frame + 1) * fs];
        let xb = &b.store[frame * fs..(frame + 1) * fs];
        let mut changed = 0;
        let mut first = None;
        for (i, (p, q)) in xa.iter().zip(xb).enumerate() {
            if p != q {
                changed += 1;
                first.get_or_insert(i);
            }
        }
        if changed > 0 || a.meta[frame] != b.meta[frame] {
            out.push(FrameDelta {
                frame,
                before: a.meta[frame],
                after: b.meta[frame],
                bytes_changed: changed,
                first_change: first,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Segment;
    use crate::mem::{mem_init, PhysAddr};

    #[test]
    fn dump_load_dump_is_identical() {
        let map = mem_init(256, 16, vec![Region::new(0, 4096)]).unwrap();
        let seg = Segment::from_unused(&map, PhysAddr(512), 2, MetaKindId::UNTYPED, &[]).unwrap();
        seg.write_bytes(3, b"hello").unwrap();
        let a = map.snapshot();
        let loaded = MemoryMap::from_snapshot(&a).unwrap();
        assert_eq!(loaded.snapshot(), a);
        assert_eq!(loaded.meta_read(2).unwrap().ref_count, 1);
    }

    #[test]
    fn diff_lists_changed_frames() {
        let map = mem_init(256, 8, vec![Region::new(0, 2048)]).unwrap();
        let before = map.snapshot();
        let seg = Segment::from_unused(&map, PhysAddr(256), 1, MetaKindId::UNTYPED, &[]).unwrap();
        seg.write_bytes(10, &[1, 2]).unwrap();
        let after = map.snapshot();
        let d = snapshot_diff(&Snapshot::parse(&before).unwrap(), &Snapshot::parse(&after).unwrap()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].frame, d[0].bytes_changed, d[0].first_change), (1, 2, Some(10)));
        assert_eq!(d[0].before, FrameMeta::UNUSED);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(Snapshot::parse(b"nope").unwrap_err(), SnapshotError::BadMagic);
        let map = mem_init(256, 4, vec![]).unwrap();
        let mut s = map.snapshot();
        s.pop();
        assert!(matches!(Snapshot::parse(&s), Err(SnapshotError::Truncated(_))));
        let mut s = map.snapshot();
        s.push(0);
        assert_eq!(Snapshot::parse(&s).unwrap_err(), SnapshotError::Trailing(1));
    }
}
