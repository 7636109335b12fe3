//! Two-stage token pruning: attention pivots for relevance, then
//! redundancy-aware seeding, spherical K-means and medoid completion for
//! coverage, chained over a progressive stage schedule.

use alloc::format;
use alloc::vec::Vec;
use core::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

mod kmeans;
mod select;
mod stage;

pub use kmeans::{coverage_objective, select_medoids, spherical_kmeans, ClusterState};
pub use select::{pivot_redundancy, seed_completion, select_pivots, SeedSelection};
pub use stage::{
    prepare_features, prune_features, prune_stage, run_schedule, run_schedule_with, PruneStageResult, PruneTrace,
    RecordSource, SeedingMode,
};

/// Default number of K-means refinement iterations.
pub const DEFAULT_ITERATIONS: usize = 5;

/// Slack added before flooring `a * R` so that ratios such as 0.29 with
/// R = 100 are not pushed one below the exact product by rounding.
const SPLIT_EPS: f64 = 1e-9;

/// Relevance/coverage split of a stage budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub pivots: usize,
    pub completion: usize,
    pub total: usize,
}

/// `pivots = floor(a * R)`, `completion = R - pivots`.
pub fn split_budget(ratio: f64, budget: usize) -> Result<BudgetSplit> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    if budget == 0 {
        return Err(Error::ZeroBudget);
    }
    let pivots = (math::floor(ratio * budget as f64 + SPLIT_EPS) as usize).min(budget);
    Ok(BudgetSplit { pivots, completion: budget - pivots, total: budget })
}

/// Ordering used to pick completion seeds from redundancy scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedRule {
    /// The least redundant tokens.
    #[default]
    BottomK,
    /// The most redundant tokens. Only useful for sensitivity testing.
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneOptions {
    pub iterations: usize,
    pub seed_rule: SeedRule,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions { iterations: DEFAULT_ITERATIONS, seed_rule: SeedRule::BottomK }
    }
}

/// Multiply-add counts recorded while running the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub fusion_madds: u64,
    pub projection_madds: u64,
    pub redundancy_madds: u64,
    pub kmeans_assign_madds: u64,
    pub kmeans_update_madds: u64,
    pub medoid_madds: u64,
    /// Final objective evaluation after the last center update.
    pub objective_madds: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.fusion_madds
            + self.projection_madds
            + self.redundancy_madds
            + self.kmeans_assign_madds
            + self.kmeans_update_madds
            + self.medoid_madds
            + self.objective_madds
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: OpCounts) {
        self.fusion_madds += o.fusion_madds;
        self.projection_madds += o.projection_madds;
        self.redundancy_madds += o.redundancy_madds;
        self.kmeans_assign_madds += o.kmeans_assign_madds;
        self.kmeans_update_madds += o.kmeans_update_madds;
        self.medoid_madds += o.medoid_madds;
        self.objective_madds += o.objective_madds;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// Decoder layer whose attention drives this stage.
    pub layer: u32,
    pub budget: usize,
}

/// Progressive pruning stages with strictly decreasing budgets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Stage>", into = "Vec<Stage>")]
pub struct StageSchedule {
    stages: Vec<Stage>,
}

impl StageSchedule {
    /// Decoder layers used when a schedule lists budgets only.
    pub const DEFAULT_LAYERS: [u32; 3] = [2, 6, 15];

    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidSchedule("no stages".into()));
        }
        if stages.iter().any(|s| s.budget == 0) {
            return Err(Error::InvalidSchedule("stage budget must be at least 1".into()));
        }
        if let Some(w) = stages.windows(2).find(|w| w[1].budget >= w[0].budget) {
            return Err(Error::InvalidSchedule(format!(
                "budgets must strictly decrease ({} then {})",
                w[0].budget, w[1].budget
            )));
        }
        if stages.windows(2).any(|w| w[1].layer <= w[0].layer) {
            return Err(Error::InvalidSchedule("stage layers must strictly increase".into()));
        }
        Ok(StageSchedule { stages })
    }

    /// Budgets paired with [`Self::DEFAULT_LAYERS`].
    pub fn from_budgets(budgets: &[usize]) -> Result<Self> {
        if budgets.len() > Self::DEFAULT_LAYERS.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} budgets given but only {} default stage layers; give explicit layers",
                budgets.len(),
                Self::DEFAULT_LAYERS.len()
            )));
        }
        StageSchedule::new(
            budgets
                .iter()
                .zip(Self::DEFAULT_LAYERS)
                .map(|(&budget, layer)| Stage { layer, budget })
                .collect(),
        )
    }

    /// Named schedules keyed by effective token budget.
    pub fn preset(effective_budget: usize) -> Option<Self> {
        let budgets: &[usize] = match effective_budget {
            192 => &[300, 200, 110],
            128 => &[303, 110, 36],
            64 => &[66, 30, 17],
            _ => return None,
        };
        StageSchedule::from_budgets(budgets).ok()
    }

    pub const PRESETS: [usize; 3] = [192, 128, 64];

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn final_budget(&self) -> usize {
        self.stages[self.stages.len() - 1].budget
    }
}

impl TryFrom<Vec<Stage>> for StageSchedule {
    type Error = Error;

    fn try_from(v: Vec<Stage>) -> Result<Self> {
        StageSchedule::new(v)
    }
}

impl From<StageSchedule> for Vec<Stage> {
    fn from(s: StageSchedule) -> Self {
        s.stages
    }
}
