//! Byte accounting for buffers produced by graph operations.

use std::cell::RefCell;
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemCategory {
    /// Pre-softmax attention score maps, one `rows × W_s × W_s` buffer per head.
    AttentionScores,
    /// Every other operation output.
    Intermediate,
}

impl MemCategory {
    fn slot(self) -> usize {
        match self {
            MemCategory::AttentionScores => 0,
            MemCategory::Intermediate => 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct MemoryTracker {
    live: [usize; 2],
    peak: [usize; 2],
    allocations: [usize; 2],
    position_vectors: usize,
}

impl MemoryTracker {
    pub fn alloc(&mut self, cat: MemCategory, bytes: usize) {
        let s = cat.slot();
        self.live[s] += bytes;
        self.allocations[s] += 1;
        self.peak[s] = self.peak[s].max(self.live[s]);
    }

    pub fn release(&mut self, cat: MemCategory, bytes: usize) {
        let s = cat.slot();
        self.live[s] = self.live[s].saturating_sub(bytes);
    }

    pub fn live(&self, cat: MemCategory) -> usize {
        self.live[cat.slot()]
    }

    pub fn peak(&self, cat: MemCategory) -> usize {
        self.peak[cat.slot()]
    }

    pub fn allocations(&self, cat: MemCategory) -> usize {
        self.allocations[cat.slot()]
    }

    /// Records that `count` projected relative-position vectors were materialized.
    pub fn add_position_vectors(&mut self, count: usize) {
        self.position_vectors += count;
    }

    pub fn position_vectors(&self) -> usize {
        self.position_vectors
    }

    pub fn reset_peaks(&mut self) {
        self.peak = self.live;
    }
}

pub type SharedTracker = Rc<RefCell<MemoryTracker>>;
