//! Mini-batch sources for training loops.
//!
//! A source is a pure function of the step index, so two trajectories fed
//! from the same source see bitwise-identical batches in the same order;
//! paired-trajectory comparisons depend on this.

use crate::graph::{Target, Value};

pub trait BatchSource {
    /// The batch for step `step`. Must be deterministic in `step`.
    fn batch(&self, step: usize) -> (Value, Target);
}

/// Replays one fixed batch forever.
#[derive(Debug, Clone)]
pub struct FixedBatch {
    pub x: Value,
    pub target: Target,
}

impl FixedBatch {
    pub fn new(x: Value, target: Target) -> Self {
        Self { x, target }
    }
}

impl BatchSource for FixedBatch {
    fn batch(&self, _step: usize) -> (Value, Target) {
        (self.x.clone(), self.target.clone())
    }
}
