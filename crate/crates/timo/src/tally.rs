//! Thread-local FLOP tally for instrumenting forward passes.
//!
//! Counting is off by default and costs one thread-local check per
//! operation call when disabled. Enable it around a forward pass to
//! collect per-component counts that can be compared against the
//! closed-form accounting in [`crate::analysis`].

use std::cell::RefCell;

/// Cost component a FLOP increment is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    /// Spatial-plane affinity scores (the full pairwise score for MHSA,
    /// the plane part for STGA, the median-similarity matmul for D-STGA).
    ScoreSpatial,
    /// Temporal-line affinity scores.
    ScoreTemporal,
    Softmax,
    ValueAgg,
    /// Q/K/V/O linear layers plus the D-STGA discrepancy path
    /// (median subtraction, channel-reducing projection, batch norm,
    /// ReLU, and the broadcast addition building S).
    Projections,
    Ffn,
    Conv,
    /// Layer norms and residual additions.
    Norm,
}

pub const ALL_BUCKETS: [Bucket; 8] = [
    Bucket::ScoreSpatial,
    Bucket::ScoreTemporal,
    Bucket::Softmax,
    Bucket::ValueAgg,
    Bucket::Projections,
    Bucket::Ffn,
    Bucket::Conv,
    Bucket::Norm,
];

/// Per-component FLOP counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub score_spatial: u128,
    pub score_temporal: u128,
    pub softmax: u128,
    pub value_agg: u128,
    pub projections: u128,
    pub ffn: u128,
    pub conv: u128,
    pub norm: u128,
}

impl Counts {
    pub fn total(&self) -> u128 {
        self.score_spatial
            + self.score_temporal
            + self.softmax
            + self.value_agg
            + self.projections
            + self.ffn
            + self.conv
            + self.norm
    }

    pub fn get(&self, b: Bucket) -> u128 {
        match b {
            Bucket::ScoreSpatial => self.score_spatial,
            Bucket::ScoreTemporal => self.score_temporal,
            Bucket::Softmax => self.softmax,
            Bucket::ValueAgg => self.value_agg,
            Bucket::Projections => self.projections,
            Bucket::Ffn => self.ffn,
            Bucket::Conv => self.conv,
            Bucket::Norm => self.norm,
        }
    }

    fn get_mut(&mut self, b: Bucket) -> &mut u128 {
        match b {
            Bucket::ScoreSpatial => &mut self.score_spatial,
            Bucket::ScoreTemporal => &mut self.score_temporal,
            Bucket::Softmax => &mut self.softmax,
            Bucket::ValueAgg => &mut self.value_agg,
            Bucket::Projections => &mut self.projections,
            Bucket::Ffn => &mut self.ffn,
            Bucket::Conv => &mut self.conv,
            Bucket::Norm => &mut self.norm,
        }
    }
}

struct State {
    enabled: bool,
    bucket: Bucket,
    counts: Counts,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State {
        enabled: false,
        bucket: Bucket::Projections,
        counts: Counts::default(),
    });
}

/// Reset counters and start tallying on this thread.
pub fn start() {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.enabled = true;
        s.bucket = Bucket::Projections;
        s.counts = Counts::default();
    });
}

/// Stop tallying and return what was collected.
pub fn stop() -> Counts {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.enabled = false;
        s.counts
    })
}

/// Attribute subsequent [`add`] calls to `bucket` until the guard drops.
pub fn scope(bucket: Bucket) -> ScopeGuard {
    let prev = STATE.with(|s| {
        let mut s = s.borrow_mut();
        let prev = s.bucket;
        s.bucket = bucket;
        prev
    });
    ScopeGuard { prev }
}

/// Record `flops` against the current bucket (no-op when disabled).
pub fn add(flops: u128) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.enabled {
            let b = s.bucket;
            *s.counts.get_mut(b) += flops;
        }
    });
}

pub struct ScopeGuard {
    prev: Bucket,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        STATE.with(|s| s.borrow_mut().bucket = self.prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_by_default() {
        add(10);
        start();
        add(3);
        {
            let _g = scope(Bucket::Ffn);
            add(4);
        }
        add(5);
        let c = stop();
        assert_eq!(c.projections, 8);
        assert_eq!(c.ffn, 4);
        assert_eq!(c.total(), 12);
        add(100); // after stop: dropped
        start();
        assert_eq!(stop().total(), 0);
    }
}
