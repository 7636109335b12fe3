//! Class-adaptive visual token reduction.
//!
//! The crate is `no_std` (with `alloc`) and contains the full algorithmic
//! pipeline: prompt routing, convex multi-layer feature fusion, attention
//! saliency, the relevance + coverage pruner, the discrete calibration
//! search, and executable checks for the formal properties the pruner is
//! expected to satisfy. File formats and the command-line front end live in
//! the `vtprune` crate.
#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod calibration;
pub mod complexity;
mod error;
pub mod fusion;
pub mod matrix;
mod math;
pub mod pruner;
pub mod router;
pub mod saliency;
pub mod verify;

pub use crate::error::{Error, Result};
pub use crate::fusion::{
    align_layer, align_stack, fuse, project, softmax_mixture, ClassProfile, MixtureWeights,
    ProfileMode, ProfileTable, Projection, UpsampleMode,
};
pub use crate::matrix::{
    cosine_sim, l2_normalize_rows, validate_stack, Grid, IndexSet, LayerStack, TokenMatrix,
    UnitFeatureMatrix, ValidationReport, Violation,
};
pub use crate::pruner::{
    prune_stage, run_schedule, run_schedule_with, split_budget, BudgetSplit, ClusterState, OpCounts, PruneOptions,
    PruneStageResult, PruneTrace, SeedRule, SeedingMode, Stage, StageSchedule,
};
pub use crate::router::{load_rules, route, CategoryId, Rule, RuleTable};
pub use crate::saliency::{attention_from_qk, saliency, AttentionRecord, SaliencyScores};
