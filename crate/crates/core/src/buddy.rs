//! Reference buddy-system frame allocator.
//!
//! Runs entirely on the safe side of the injection surface: it deals in
//! addresses only and never touches frame metadata. Blocks are power-of-two
//! runs of frames, naturally aligned on absolute frame numbers. Among free
//! blocks of the chosen order the lowest address wins.

use std::collections::{BTreeSet, HashMap};

use parking_lot::Mutex;

use crate::frame_alloc::{AllocLayout, FrameAlloc};
use crate::mem::PhysAddr;

pub const MAX_ORDER: usize = 24;

#[derive(Debug)]
struct BuddyState {
    free: Vec<BTreeSet<usize>>,
    /// Start frame -> order of blocks handed out.
    allocated: HashMap<usize, usize>,
    free_frames: usize,
    total_frames: usize,
}

#[derive(Debug)]
pub struct BuddyAllocator {
    frame_size: usize,
    state: Mutex<BuddyState>,
}

impl BuddyAllocator {
    pub fn new(frame_size: usize) -> Self {
        Self {
            frame_size,
            state: Mutex::new(BuddyState {
                free: vec![BTreeSet::new(); MAX_ORDER + 1],
                allocated: HashMap::new(),
                free_frames: 0,
                total_frames: 0,
            }),
        }
    }

    pub fn free_bytes(&self) -> usize {
        self.state.lock().free_frames * self.frame_size
    }

    /// Bytes in blocks currently handed out, including order round-up.
    pub fn allocated_bytes(&self) -> usize {
        let st = self.state.lock();
        st.allocated.values().map(|&o| (1usize << o) * self.frame_size).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.state.lock().total_frames * self.frame_size
    }

    /// Free block start addresses of the given order, ascending.
    pub fn free_blocks(&self, order: usize) -> Vec<PhysAddr> {
        let st = self.state.lock();
        st.free
            .get(order)
            .map(|set| set.iter().map(|&f| PhysAddr(f * self.frame_size)).collect())
            .unwrap_or_default()
    }

    /// Highest order that currently has a free block.
    pub fn max_free_order(&self) -> Option<usize> {
        let st = self.state.lock();
        (0..=MAX_ORDER).rev().find(|&o| !st.free[o].is_empty())
    }

    fn order_for(&self, layout: AllocLayout) -> usize {
        let frames = (layout.size() / self.frame_size).max(layout.align() / self.frame_size).max(1);
        frames.next_power_of_two().trailing_zeros() as usize
    }
}

impl BuddyState {
    fn insert_and_merge(&mut self, mut start: usize, mut order: usize) {
        while order < MAX_ORDER {
            let buddy = start ^ (1 << order);
            if !self.free[order].remove(&buddy) {
                break;
            }
            start = start.min(buddy);
            order += 1;
        }
        self.free[order].insert(start);
    }

    fn take(&mut self, want: usize) -> Option<usize> {
        let order = (want..=MAX_ORDER).find(|&o| !self.free[o].is_empty())?;
        let start = self.free[order].pop_first()?;
        for o in (want..order).rev() {
            self.free[o].insert(start + (1 << o));
        }
        Some(start)
    }
}

impl FrameAlloc for BuddyAllocator {
    fn alloc(&self, layout: AllocLayout) -> Option<PhysAddr> {
        let order = self.order_for(layout);
        if order > MAX_ORDER {
            return None;
        }
        let mut st = self.state.lock();
        let start = st.take(order)?;
        st.allocated.insert(start, order);
        st.free_frames -= 1 << order;
        Some(PhysAddr(start * self.frame_size))
    }

    fn dealloc(&self, addr: PhysAddr, size: usize) {
        let start = addr.0 / self.frame_size;
        let mut st = self.state.lock();
        let Some(order) = st.allocated.remove(&start) else {
            log::error!("buddy: dealloc of unknown block {addr} ({size} bytes)");
            return;
        };
        debug_assert!(size <= (1 << order) * self.frame_size);
        st.free_frames += 1 << order;
        st.insert_and_merge(start, order);
    }

    fn add_free_memory(&self, addr: PhysAddr, size: usize) {
        let mut start = addr.0.div_ceil(self.frame_size);
        let end = (addr.0 + size) / self.frame_size;
        let mut st = self.state.lock();
        while start < end {
            let mut order = if start == 0 { MAX_ORDER } else { (start.trailing_zeros() as usize).min(MAX_ORDER) };
            while start + (1 << order) > end {
                order -= 1;
            }
            st.insert_and_merge(start, order);
            st.free_frames += 1 << order;
            st.total_frames += 1 << order;
            start += 1 << order;
        }
    }
}
