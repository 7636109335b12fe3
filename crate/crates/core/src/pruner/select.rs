use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{IndexSet, UnitFeatureMatrix};
use crate::saliency::SaliencyScores;

use super::{OpCounts, SeedRule};

/// The `k` highest-saliency tokens. Ties go to the lower token index.
pub fn select_pivots(phi: &SaliencyScores, k: usize) -> Result<IndexSet> {
    if k > phi.len() {
        return Err(Error::BudgetExceedsPool { requested: k, available: phi.len() });
    }
    let mut order: Vec<usize> = (0..phi.len()).collect();
    // positions ascend with token index, so a stable sort keeps ties low-index first
    order.sort_by(|&i, &j| phi.values[j].partial_cmp(&phi.values[i]).unwrap_or(Ordering::Equal));
    Ok(IndexSet::from_unsorted(order[..k].iter().map(|&p| phi.tokens.as_slice()[p])))
}

/// Worst-case cosine similarity of each candidate row to any pivot row.
pub fn pivot_redundancy(candidates: &UnitFeatureMatrix, pivots: &UnitFeatureMatrix) -> Result<Vec<f64>> {
    pivot_redundancy_counted(candidates, pivots, &mut OpCounts::default())
}

pub(crate) fn pivot_redundancy_counted(
    candidates: &UnitFeatureMatrix,
    pivots: &UnitFeatureMatrix,
    ops: &mut OpCounts,
) -> Result<Vec<f64>> {
    if pivots.rows() == 0 {
        return Err(Error::EmptyPivotSet);
    }
    if candidates.cols() != pivots.cols() {
        return Err(Error::DimMismatch { expected: pivots.cols(), actual: candidates.cols() });
    }
    let rho = (0..candidates.rows())
        .map(|t| {
            let u = candidates.row(t);
            (0..pivots.rows())
                .map(|j| math::dot(u, pivots.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    ops.redundancy_madds += (candidates.rows() * pivots.rows() * pivots.cols()) as u64;
    Ok(rho)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSelection {
    /// Positions into the redundancy vector.
    pub seeds: IndexSet,
    /// The `k`-th smallest redundancy value.
    pub threshold: f64,
}

/// Picks `k` seeds from redundancy scores. With [`SeedRule::BottomK`] these
/// are the `k` least redundant positions, ties toward the lower position.
pub fn seed_completion(rho: &[f64], k: usize, rule: SeedRule) -> Result<SeedSelection> {
    if k > rho.len() {
        return Err(Error::BudgetExceedsPool { requested: k, available: rho.len() });
    }
    if k == 0 {
        return Err(Error::EmptySeedSet);
    }
    let mut ascending: Vec<usize> = (0..rho.len()).collect();
    ascending.sort_by(|&i, &j| rho[i].partial_cmp(&rho[j]).unwrap_or(Ordering::Equal));
    let threshold = rho[ascending[k - 1]];
    let seeds = match rule {
        SeedRule::BottomK => IndexSet::from_unsorted(ascending[..k].iter().copied()),
        SeedRule::TopK => {
            let mut descending: Vec<usize> = (0..rho.len()).collect();
            descending.sort_by(|&i, &j| rho[j].partial_cmp(&rho[i]).unwrap_or(Ordering::Equal));
            IndexSet::from_unsorted(descending[..k].iter().copied())
        }
    };
    Ok(SeedSelection { seeds, threshold })
}
