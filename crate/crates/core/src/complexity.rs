//! Closed-form operation counts for one fusion + pruning stage.

use serde::{Deserialize, Serialize};

use crate::math::ceil_log2;
use crate::pruner::OpCounts;

/// Multiply-adds for the arithmetic steps, comparisons for the selections
/// (heap model).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    pub fusion: u64,
    pub topk_comparisons: u64,
    pub redundancy: u64,
    pub bottomk_comparisons: u64,
    pub kmeans_assign: u64,
    pub kmeans_update: u64,
    pub medoid: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    /// Tokens entering the stage.
    pub tokens: u64,
    pub layers: u64,
    pub vision_dim: u64,
    pub decoder_dim: u64,
    pub pivots: u64,
    pub completion: u64,
    pub iterations: u64,
}

/// Costs for `tokens` candidates with `pivots` + `completion` kept. When no
/// completion tokens are requested the coverage steps do not run and cost
/// nothing.
pub fn complexity_estimate(s: &Shape) -> ComplexityEstimate {
    let pool = s.tokens.saturating_sub(s.pivots);
    let d = s.decoder_dim;
    let coverage = s.completion > 0;
    let when = |v: u64| if coverage { v } else { 0 };
    ComplexityEstimate {
        fusion: s.layers * s.tokens * s.vision_dim,
        topk_comparisons: s.tokens * ceil_log2(s.pivots),
        redundancy: when(pool * s.pivots * d),
        bottomk_comparisons: when(pool * ceil_log2(s.completion)),
        kmeans_assign: when(s.iterations * pool * s.completion * d),
        kmeans_update: when(s.iterations * pool * d),
        medoid: when(pool * d),
    }
}

impl ComplexityEstimate {
    /// Stage multiply-adds, comparable to the counters recorded by the
    /// pruner (fusion excluded; it is counted once per sample).
    pub fn stage_madds(&self) -> u64 {
        self.redundancy + self.kmeans_assign + self.kmeans_update + self.medoid
    }

    /// Compares the multiply-add terms against recorded stage counters.
    /// The recorded objective evaluation after the last update has no
    /// counterpart here and is checked separately.
    pub fn matches_stage(&self, ops: &OpCounts) -> bool {
        self.redundancy == ops.redundancy_madds
            && self.kmeans_assign == ops.kmeans_assign_madds
            && self.kmeans_update == ops.kmeans_update_madds
            && self.medoid == ops.medoid_madds
    }
}
