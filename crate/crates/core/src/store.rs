//! Byte store backing simulated physical memory.
//!
//! Bytes are packed little-endian into `AtomicU64` words, so disjoint ranges
//! can be read and written from several threads at once without a lock and
//! without UB. Overlapping writes race at byte granularity: each byte ends up
//! holding one of the written values, nothing more is promised.

use std::sync::atomic::{AtomicU64, Ordering};

const WORD: usize = 8;

pub(crate) struct Store {
    words: Box<[AtomicU64]>,
    len: usize,
}

impl Store {
    pub(crate) fn new(len: usize) -> Self {
        let nwords = len.div_ceil(WORD);
        let words = (0..nwords).map(|_| AtomicU64::new(0)).collect();
        Self { words, len }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    /// Copies `out.len()` bytes starting at `addr` into `out`.
    ///
    /// Panics if the range leaves the store; callers check bounds first.
    pub(crate) fn read(&self, addr: usize, out: &mut [u8]) {
        let end = addr + out.len();
        assert!(end <= self.len, "store read out of range");
        let mut pos = addr;
        let mut done = 0;
        while pos < end {
            let off = pos % WORD;
            let n = (WORD - off).min(end - pos);
            let bytes = self.words[pos / WORD].load(Ordering::Relaxed).to_le_bytes();
            out[done..done + n].copy_from_slice(&bytes[off..off + n]);
            pos += n;
            done += n;
        }
    }

    pub(crate) fn write(&self, addr: usize, data: &[u8]) {
        let end = addr + data.len();
        assert!(end <= self.len, "store write out of range");
        let mut pos = addr;
        let mut done = 0;
        while pos < end {
            let off = pos % WORD;
            let n = (WORD - off).min(end - pos);
            let word = &self.words[pos / WORD];
            if n == WORD {
                let mut buf = [0u8; WORD];
                buf.copy_from_slice(&data[done..done + WORD]);
                word.store(u64::from_le_bytes(buf), Ordering::Relaxed);
            } else {
                let mut buf = [0u8; WORD];
                let mut mask = [0u8; WORD];
                buf[off..off + n].copy_from_slice(&data[done..done + n]);
                mask[off..off + n].fill(0xff);
                let bits = u64::from_le_bytes(buf);
                let mask = u64::from_le_bytes(mask);
                // Only this write's bytes change; neighbours in the word survive
                // concurrent partial writes.
                let _ = word.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |old| {
                    Some((old & !mask) | bits)
                });
            }
            pos += n;
            done += n;
        }
    }

    pub(crate) fn fill(&self, addr: usize, len: usize, value: u8) {
        // Chunked so large fills don't allocate a frame-sized buffer per call.
        let chunk = [value; 256];
        let mut pos = addr;
        let end = addr + len;
        while pos < end {
            let n = chunk.len().min(end - pos);
            self.write(pos, &chunk[..n]);
            pos += n;
        }
    }
}
