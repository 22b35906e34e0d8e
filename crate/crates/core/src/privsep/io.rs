//! Memory-mapped and port I/O behind a sensitivity registry.
//!
//! Ranges are labeled once at init; anything left unlabeled counts as
//! sensitive. Handles exist only for fully insensitive ranges and never
//! overlap one another. Each `read_once`/`write_once` is a single
//! boundary-checked device access; nothing is cached between calls.

use std::fmt;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::frame::Pod;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sensitivity {
    Sensitive,
    Insensitive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IoKind {
    Mem,
    Port,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IoError {
    #[error("the sensitivity registry is sealed")]
    Sealed,
    #[error("the sensitivity registry is not sealed yet")]
    NotSealed,
    #[error("label {0:?} overlaps an existing label")]
    LabelOverlap(Range<usize>),
    #[error("range {0:?} is not entirely labeled insensitive")]
    SensitiveRange(Range<usize>),
    #[error("range {0:?} overlaps a live handle")]
    Overlap(Range<usize>),
    #[error("access at {offset} (+{len}) outside a window of {size}")]
    OutOfBounds { offset: usize, len: usize, size: usize },
    #[error("empty range")]
    Empty,
}

/// A device register window.
pub trait IoDevice: Send + Sync {
    fn read(&self, offset: usize, out: &mut [u8]);
    fn write(&self, offset: usize, data: &[u8]);
}

/// Plain register file: bytes that read back what was written. Counts
/// accesses so tests can see that nothing is cached.
#[derive(Default)]
pub struct RegisterFile {
    bytes: Mutex<Vec<u8>>,
    reads: std::sync::atomic::AtomicUsize,
}

impl RegisterFile {
    pub fn new(size: usize) -> Self {
        Self { bytes: Mutex::new(vec![0; size]), reads: Default::default() }
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn poke(&self, offset: usize, data: &[u8]) {
        self.bytes.lock()[offset..offset + data.len()].copy_from_slice(data);
    }
}

impl IoDevice for RegisterFile {
    fn read(&self, offset: usize, out: &mut [u8]) {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let b = self.bytes.lock();
        let n = out.len().min(b.len().saturating_sub(offset));
        out[..n].copy_from_slice(&b[offset..offset + n]);
    }

    fn write(&self, offset: usize, data: &[u8]) {
        let mut b = self.bytes.lock();
        let n = data.len().min(b.len().saturating_sub(offset));
        b[offset..offset + n].copy_from_slice(&data[..n]);
    }
}

struct Bus {
    devices: Vec<(Range<usize>, Arc<dyn IoDevice>)>,
}

impl Bus {
    /// Device window containing `addr`, and the device-relative offset.
    fn find(&self, addr: usize) -> Option<(&Arc<dyn IoDevice>, usize)> {
        self.devices.iter().find(|(r, _)| r.contains(&addr)).map(|(r, d)| (d, addr - r.start))
    }
}

/// Sensitivity labels, device windows and live handles for both address
/// spaces.
pub struct IoSpace {
    sealed: AtomicBool,
    labels: RwLock<Vec<(IoKind, Range<usize>, Sensitivity)>>,
    buses: RwLock<[Bus; 2]>,
    live: Mutex<Vec<(IoKind, Range<usize>)>>,
}

impl fmt::Debug for IoSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IoSpace")
            .field("sealed", &self.sealed.load(Ordering::Relaxed))
            .field("labels", &self.labels.read().len())
            .finish()
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

fn bus_index(kind: IoKind) -> usize {
    match kind {
        IoKind::Mem => 0,
        IoKind::Port => 1,
    }
}

impl Default for IoSpace {
    fn default() -> Self {
        Self::new()
    }
}

impl IoSpace {
    pub fn new() -> Self {
        Self {
            sealed: AtomicBool::new(false),
            labels: RwLock::new(Vec::new()),
            buses: RwLock::new([Bus { devices: Vec::new() }, Bus { devices: Vec::new() }]),
            live: Mutex::new(Vec::new()),
        }
    }

    pub fn label(&self, kind: IoKind, range: Range<usize>, s: Sensitivity) -> Result<(), IoError> {
        if self.sealed.load(Ordering::Acquire) {
            return Err(IoError::Sealed);
        }
        if range.is_empty() {
            return Err(IoError::Empty);
        }
        let mut labels = self.labels.write();
        if labels.iter().any(|(k, r, _)| *k == kind && overlaps(r, &range)) {
            return Err(IoError::LabelOverlap(range));
        }
        labels.push((kind, range, s));
        Ok(())
    }

    /// Attaches a device model at `range`.
    pub fn attach(&self, kind: IoKind, range: Range<usize>, dev: Arc<dyn IoDevice>) -> Result<(), IoError> {
        if self.sealed.load(Ordering::Acquire) {
            return Err(IoError::Sealed);
        }
        self.buses.write()[bus_index(kind)].devices.push((range, dev));
        Ok(())
    }

    pub fn seal(&self) {
        self.sealed.store(true, Ordering::Release);
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed.load(Ordering::Acquire)
    }

    /// Sensitivity of one address; unlabeled addresses are sensitive.
    pub fn sensitivity(&self, kind: IoKind, addr: usize) -> Sensitivity {
        self.labels
            .read()
            .iter()
            .find(|(k, r, _)| *k == kind && r.contains(&addr))
            .map_or(Sensitivity::Sensitive, |(_, _, s)| *s)
    }

    /// True if every address of `range` is labeled insensitive.
    pub fn is_insensitive(&self, kind: IoKind, range: &Range<usize>) -> bool {
        let labels = self.labels.read();
        let mut pos = range.start;
        while pos < range.end {
            let Some((_, r, _)) =
                labels.iter().find(|(k, r, s)| *k == kind && *s == Sensitivity::Insensitive && r.contains(&pos))
            else {
                return false;
            };
            pos = r.end;
        }
        true
    }

    fn acquire(self: &Arc<Self>, kind: IoKind, range: Range<usize>) -> Result<IoHandle, IoError> {
        if !self.is_sealed() {
            return Err(IoError::NotSealed);
        }
        if range.is_empty() {
            return Err(IoError::Empty);
        }
        if !self.is_insensitive(kind, &range) {
            return Err(IoError::SensitiveRange(range));
        }
        let mut live = self.live.lock();
        if live.iter().any(|(k, r)| *k == kind && overlaps(r, &range)) {
            return Err(IoError::Overlap(range));
        }
        live.push((kind, range.clone()));
        Ok(IoHandle { space: Arc::clone(self), kind, range })
    }

    pub fn iomem_acquire(self: &Arc<Self>, range: Range<usize>) -> Result<IoHandle, IoError> {
        self.acquire(IoKind::Mem, range)
    }

    pub fn ioport_acquire(self: &Arc<Self>, range: Range<usize>) -> Result<IoHandle, IoError> {
        self.acquire(IoKind::Port, range)
    }

    /// Live handle ranges.
    pub fn live_handles(&self) -> Vec<(IoKind, Range<usize>)> {
        self.live.lock().clone()
    }

    fn device_read(&self, kind: IoKind, addr: usize, out: &mut [u8]) {
        let buses = self.buses.read();
        match buses[bus_index(kind)].find(addr) {
            Some((d, off)) => d.read(off, out),
            None => out.fill(0xff),
        }
    }

    fn device_write(&self, kind: IoKind, addr: usize, data: &[u8]) {
        let buses = self.buses.read();
        if let Some((d, off)) = buses[bus_index(kind)].find(addr) {
            d.write(off, data);
        }
    }
}

/// Exclusive access to an insensitive I/O range.
pub struct IoHandle {
    space: Arc<IoSpace>,
    kind: IoKind,
    range: Range<usize>,
}

impl fmt::Debug for IoHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IoHandle").field("kind", &self.kind).field("range", &self.range).finish()
    }
}

impl IoHandle {
    pub fn kind(&self) -> IoKind {
        self.kind
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn size(&self) -> usize {
        self.range.len()
    }

    fn check(&self, offset: usize, len: usize) -> Result<usize, IoError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.size() => Ok(self.range.start + offset),
            _ => Err(IoError::OutOfBounds { offset, len, size: self.size() }),
        }
    }

    pub fn read_once<T: Pod>(&self, offset: usize) -> Result<T, IoError> {
        let addr = self.check(offset, T::SIZE)?;
        let mut buf = [0u8; 16];
        self.space.device_read(self.kind, addr, &mut buf[..T::SIZE]);
        Ok(T::decode(&buf[..T::SIZE]))
    }

    pub fn write_once<T: Pod>(&self, offset: usize, value: T) -> Result<(), IoError> {
        let addr = self.check(offset, T::SIZE)?;
        let mut buf = [0u8; 16];
        value.encode(&mut buf[..T::SIZE]);
        self.space.device_write(self.kind, addr, &buf[..T::SIZE]);
        Ok(())
    }

    /// No boundary check. Bench baseline only.
    pub fn read_once_unchecked<T: Pod>(&self, offset: usize) -> T {
        let mut buf = [0u8; 16];
        self.space.device_read(self.kind, self.range.start + offset, &mut buf[..T::SIZE]);
        T::decode(&buf[..T::SIZE])
    }

    pub fn write_once_unchecked<T: Pod>(&self, offset: usize, value: T) {
        let mut buf = [0u8; 16];
        value.encode(&mut buf[..T::SIZE]);
        self.space.device_write(self.kind, self.range.start + offset, &buf[..T::SIZE]);
    }
}

impl Drop for IoHandle {
    fn drop(&mut self) {
        let mut live = self.space.live.lock();
        if let Some(i) = live.iter().position(|(k, r)| *k == self.kind && *r == self.range) {
            live.swap_remove(i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> (Arc<IoSpace>, Arc<RegisterFile>) {
        let s = Arc::new(IoSpace::new());
        let regs = Arc::new(RegisterFile::new(0x100));
        s.attach(IoKind::Mem, 0x1000..0x1100, regs.clone()).unwrap();
        s.label(IoKind::Mem, 0x1000..0x1080, Sensitivity::Insensitive).unwrap();
        s.label(IoKind::Mem, 0x1080..0x1100, Sensitivity::Sensitive).unwrap();
        s.label(IoKind::Port, 0x60..0x68, Sensitivity::Insensitive).unwrap();
        (s, regs)
    }

    #[test]
    fn acquire_rules() {
        let (s, _) = space();
        assert_eq!(s.iomem_acquire(0x1000..0x1010).unwrap_err(), IoError::NotSealed);
        s.seal();
        assert_eq!(s.label(IoKind::Mem, 0..1, Sensitivity::Insensitive), Err(IoError::Sealed));
        let h = s.iomem_acquire(0x1000..0x1010).unwrap();
        assert_eq!(s.iomem_acquire(0x1008..0x1018).unwrap_err(), IoError::Overlap(0x1008..0x1018));
        assert!(matches!(s.iomem_acquire(0x1070..0x1090), Err(IoError::SensitiveRange(_))));
        assert!(matches!(s.iomem_acquire(0x2000..0x2010), Err(IoError::SensitiveRange(_))));
        assert!(s.ioport_acquire(0x60..0x64).is_ok());
        assert!(matches!(s.ioport_acquire(0x70..0x71), Err(IoError::SensitiveRange(_))));
        drop(h);
        assert!(s.iomem_acquire(0x1008..0x1018).is_ok());
    }

    #[test]
    fn once_accesses_hit_the_device() {
        let (s, regs) = space();
        s.seal();
        let h = s.iomem_acquire(0x1000..0x1010).unwrap();
        h.write_once::<u32>(4, 0xdead_beef).unwrap();
        assert_eq!(h.read_once::<u32>(4).unwrap(), 0xdead_beef);
        regs.poke(4, &[1, 0, 0, 0]);
        assert_eq!(h.read_once::<u32>(4).unwrap(), 1);
        assert_eq!(regs.reads(), 2);
        assert!(matches!(h.read_once::<u64>(12), Err(IoError::OutOfBounds { .. })));
        assert_eq!(h.read_once_unchecked::<u32>(4), 1);
    }
}
