use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, ClassProfile, MixtureWeights, Projection, UpsampleMode};
use crate::matrix::{l2_normalize_rows, IndexSet, LayerStack, TokenMatrix, UnitFeatureMatrix};
use crate::router::CategoryId;
use crate::saliency::{saliency, AttentionRecord, SaliencyScores};

use super::kmeans::{select_medoids_counted, spherical_kmeans_counted, ClusterState};
use super::select::{pivot_redundancy_counted, seed_completion, select_pivots};
use super::{split_budget, BudgetSplit, OpCounts, PruneOptions, StageSchedule};

/// How completion seeds were chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedingMode {
    /// From redundancy against the pivots.
    Redundancy,
    /// No pivots to measure redundancy against; the lowest-index candidates seed.
    NoPivots,
    /// Completion budget is zero.
    None,
}

/// Which attention record a stage used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSource {
    pub stage_layer: u32,
    /// Set when the record was tagged for a different layer.
    pub reused: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneStageResult {
    pub stage_layer: u32,
    pub survivors: IndexSet,
    pub split: BudgetSplit,
    pub pivots: IndexSet,
    /// Seed tokens for clustering (token ids).
    pub seeds: IndexSet,
    pub completion: IndexSet,
    pub retained: IndexSet,
    /// Redundancy threshold: the `split.completion`-th smallest redundancy.
    pub delta: Option<f64>,
    pub cluster: Option<ClusterState>,
    pub seeding: SeedingMode,
    pub record: Option<RecordSource>,
    pub ops: OpCounts,
}

impl PruneStageResult {
    pub fn attn_reused(&self) -> bool {
        self.record.is_some_and(|r| r.reused)
    }
}

/// Prunes the tokens scored in `phi` down to `budget`.
///
/// `feats` holds one row per token id; only the scored tokens are read.
pub fn prune_stage(
    feats: &TokenMatrix,
    phi: &SaliencyScores,
    ratio: f64,
    budget: usize,
    opts: &PruneOptions,
) -> Result<PruneStageResult> {
    phi.tokens.check_bound(feats.rows())?;
    let rows = feats.select_rows(phi.tokens.as_slice())?;
    let unit = l2_normalize_rows(&rows)?;
    // rows of `unit` follow phi.tokens; remap to positions and back
    let local = SaliencyScores::new(IndexSet::full(phi.len()), phi.values.clone())?;
    let r = prune_unit(&unit, &local, ratio, budget, opts)?;
    let ids = phi.tokens.as_slice();
    let map = |s: &IndexSet| s.iter().map(|p| ids[p]).collect::<IndexSet>();
    Ok(PruneStageResult {
        survivors: phi.tokens.clone(),
        pivots: map(&r.pivots),
        seeds: map(&r.seeds),
        completion: map(&r.completion),
        retained: map(&r.retained),
        ..r
    })
}

/// Core stage on pre-normalized rows indexed by token id.
fn prune_unit(
    unit: &UnitFeatureMatrix,
    phi: &SaliencyScores,
    ratio: f64,
    budget: usize,
    opts: &PruneOptions,
) -> Result<PruneStageResult> {
    let survivors = &phi.tokens;
    survivors.check_bound(unit.rows())?;
    if budget > survivors.len() {
        return Err(Error::BudgetExceedsPool { requested: budget, available: survivors.len() });
    }
    let split = split_budget(ratio, budget)?;
    let pivots = select_pivots(phi, split.pivots)?;
    let mut ops = OpCounts::default();
    let mut result = PruneStageResult {
        stage_layer: 0,
        survivors: survivors.clone(),
        split,
        pivots: pivots.clone(),
        seeds: IndexSet::new(),
        completion: IndexSet::new(),
        retained: pivots.clone(),
        delta: None,
        cluster: None,
        seeding: SeedingMode::None,
        record: None,
        ops,
    };
    if split.completion == 0 {
        return Ok(result);
    }

    let pool = survivors.difference(&pivots);
    let u = unit.select_rows(pool.as_slice())?;
    let (seeding, rho, seed_rows, delta) = if split.pivots > 0 {
        let p = unit.select_rows(pivots.as_slice())?;
        let rho = pivot_redundancy_counted(&u, &p, &mut ops)?;
        let sel = seed_completion(&rho, split.completion, opts.seed_rule)?;
        (SeedingMode::Redundancy, Some(rho), sel.seeds, Some(sel.threshold))
    } else {
        (SeedingMode::NoPivots, None, IndexSet::full(split.completion), None)
    };
    let cluster = spherical_kmeans_counted(&u, &seed_rows, opts.iterations, &mut ops);
    let medoids = select_medoids_counted(&cluster, &u, rho.as_deref(), &mut ops);

    let ids = pool.as_slice();
    result.seeds = seed_rows.iter().map(|p| ids[p]).collect();
    result.completion = medoids.iter().map(|p| ids[p]).collect();
    result.retained = pivots.union(&result.completion);
    result.delta = delta;
    result.cluster = Some(cluster);
    result.seeding = seeding;
    result.ops = ops;
    debug_assert_eq!(result.retained.len(), budget);
    Ok(result)
}

/// Aligns (if needed), fuses and projects a layer stack.
///
/// Gridded layers whose grids differ are resampled onto the grid of the last
/// layer before fusion. Returns the decoder-space features, the operation
/// counts, and whether alignment happened.
pub fn prepare_features(
    stack: &LayerStack,
    alpha: &MixtureWeights,
    projection: &Projection,
    upsample: UpsampleMode,
) -> Result<(TokenMatrix, OpCounts, bool)> {
    let mut ops = OpCounts::default();
    let grids: Vec<_> = stack.layers.iter().map(|l| l.grid()).collect();
    let needs_align = grids.iter().all(Option::is_some) && grids.windows(2).any(|w| w[0] != w[1]);
    let aligned;
    let stack = if needs_align {
        let target = grids[grids.len() - 1].ok_or(Error::MissingGrid)?;
        aligned = fusion::align_stack(stack, target, upsample)?;
        &aligned
    } else {
        stack
    };
    let fused = fusion::fuse_counted(stack, alpha, &mut ops)?;
    let projected = fusion::project_counted(&fused, projection, &mut ops)?;
    Ok((projected, ops, needs_align))
}

fn index_records(records: &[AttentionRecord]) -> Result<BTreeMap<u32, &AttentionRecord>> {
    let mut map = BTreeMap::new();
    for r in records {
        if map.insert(r.stage_layer(), r).is_some() {
            return Err(Error::InvalidAttention(format!(
                "two records tagged for layer {}",
                r.stage_layer()
            )));
        }
    }
    Ok(map)
}

/// Exact tag, else the previous stage's record, else the nearest lower tag,
/// else the smallest tag.
fn resolve<'a>(
    map: &BTreeMap<u32, &'a AttentionRecord>,
    layer: u32,
    previous: Option<u32>,
) -> Option<(&'a AttentionRecord, bool)> {
    if let Some(r) = map.get(&layer) {
        return Some((r, false));
    }
    let tag = previous
        .or_else(|| map.range(..layer).next_back().map(|(k, _)| *k))
        .or_else(|| map.keys().next().copied())?;
    map.get(&tag).map(|r| (*r, true))
}

/// Runs every stage of `schedule` on decoder-space features, chaining
/// survivors from one stage to the next.
pub fn prune_features(
    feats: &TokenMatrix,
    records: &[AttentionRecord],
    ratio: f64,
    schedule: &StageSchedule,
    opts: &PruneOptions,
) -> Result<Vec<PruneStageResult>> {
    let unit = l2_normalize_rows(feats)?;
    let map = index_records(records)?;
    let mut survivors = IndexSet::full(feats.rows());
    let mut previous = None;
    let mut out = Vec::with_capacity(schedule.stages().len());
    for stage in schedule.stages() {
        let run = || -> Result<PruneStageResult> {
            let (rec, reused) =
                resolve(&map, stage.layer, previous).ok_or(Error::MissingAttention(stage.layer))?;
            let phi = saliency(rec, &survivors)?;
            let mut r = prune_unit(&unit, &phi, ratio, stage.budget, opts)?;
            r.stage_layer = stage.layer;
            r.record = Some(RecordSource { stage_layer: rec.stage_layer(), reused });
            Ok(r)
        };
        let r = run().map_err(|e| e.at_stage(stage.layer))?;
        previous = r.record.map(|s| s.stage_layer);
        survivors = r.retained.clone();
        out.push(r);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub category: CategoryId,
    pub split_ratio: f64,
    pub layer_ids: Vec<u32>,
    pub mixture: MixtureWeights,
    /// Whether layers were resampled onto a common grid before fusion.
    pub aligned: bool,
    /// Fusion and projection counts.
    pub fusion_ops: OpCounts,
    pub stages: Vec<PruneStageResult>,
    pub final_retained: IndexSet,
}

impl PruneTrace {
    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.retained.len()).collect()
    }

    pub fn total_ops(&self) -> OpCounts {
        let mut ops = self.fusion_ops;
        for s in &self.stages {
            ops += s.ops;
        }
        ops
    }
}

/// Fuses with the profile's mixture, projects once, then prunes every stage.
pub fn run_schedule(
    stack: &LayerStack,
    records: &[AttentionRecord],
    profile: &ClassProfile,
    projection: &Projection,
    schedule: &StageSchedule,
    opts: &PruneOptions,
) -> Result<PruneTrace> {
    run_schedule_with(stack, records, profile, projection, schedule, opts, UpsampleMode::default())
}

/// [`run_schedule`] with an explicit resampling mode for misaligned grids.
pub fn run_schedule_with(
    stack: &LayerStack,
    records: &[AttentionRecord],
    profile: &ClassProfile,
    projection: &Projection,
    schedule: &StageSchedule,
    opts: &PruneOptions,
    upsample: UpsampleMode,
) -> Result<PruneTrace> {
    let alpha = profile.mixture(&stack.layer_ids)?;
    let (feats, fusion_ops, aligned) = prepare_features(stack, &alpha, projection, upsample)?;
    let stages = prune_features(&feats, records, profile.split_ratio, schedule, opts)?;
    let final_retained = stages[stages.len() - 1].retained.clone();
    Ok(PruneTrace {
        category: profile.category,
        split_ratio: profile.split_ratio,
        layer_ids: stack.layer_ids.clone(),
        mixture: alpha,
        aligned,
        fusion_ops,
        stages,
        final_retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Grid;
    use crate::pruner::{SeedRule, Stage};
    use alloc::vec;
    use proptest::prelude::*;

    fn identity(m: usize) -> TokenMatrix {
        let mut data = vec![0.0f32; m * m];
        for i in 0..m {
            data[i * m + i] = 1.0;
        }
        TokenMatrix::new(m, m, data).unwrap()
    }

    fn phi_all(values: &[f64]) -> SaliencyScores {
        SaliencyScores::new(IndexSet::full(values.len()), values.to_vec()).unwrap()
    }

    fn concentrated(m: usize, on: &[usize]) -> Vec<f64> {
        (0..m).map(|t| if on.contains(&t) { 0.4 } else { 0.2 / (m - on.len()) as f64 }).collect()
    }

    #[test]
    fn orthonormal_instance() {
        let r = prune_stage(&identity(8), &phi_all(&concentrated(8, &[0, 1])), 0.5, 4, &PruneOptions::default())
            .unwrap();
        assert_eq!(r.pivots.as_slice(), &[0, 1]);
        assert_eq!(r.seeds.as_slice(), &[2, 3]);
        assert_eq!(r.delta, Some(0.0));
        assert_eq!(r.completion.as_slice(), &[2, 3]);
        assert_eq!(r.retained.as_slice(), &[0, 1, 2, 3]);
        assert_eq!(r.seeding, SeedingMode::Redundancy);
    }

    #[test]
    fn all_relevance_is_top_k() {
        let vals = [0.05, 0.3, 0.1, 0.25, 0.2, 0.1];
        let r = prune_stage(&identity(6), &phi_all(&vals), 1.0, 3, &PruneOptions::default()).unwrap();
        assert!(r.completion.is_empty());
        assert_eq!(r.retained.as_slice(), &[1, 3, 4]);
        assert_eq!(r.seeding, SeedingMode::None);
        assert_eq!(r.ops, OpCounts::default());
    }

    #[test]
    fn no_pivot_path_seeds_lowest_indices() {
        let r = prune_stage(&identity(6), &phi_all(&[0.1; 6]), 0.0, 3, &PruneOptions::default()).unwrap();
        assert!(r.pivots.is_empty());
        assert_eq!(r.seeds.as_slice(), &[0, 1, 2]);
        assert_eq!(r.seeding, SeedingMode::NoPivots);
        assert_eq!(r.retained.len(), 3);
        assert_eq!(r.delta, None);
    }

    #[test]
    fn budget_errors() {
        let f = identity(4);
        let p = phi_all(&[0.25; 4]);
        assert!(matches!(
            prune_stage(&f, &p, 0.5, 5, &PruneOptions::default()),
            Err(Error::BudgetExceedsPool { requested: 5, available: 4 })
        ));
        assert_eq!(prune_stage(&f, &p, 0.5, 0, &PruneOptions::default()), Err(Error::ZeroBudget));
        let mut z = identity(4).into_data();
        z[0] = 0.0;
        let z = TokenMatrix::new(4, 4, z).unwrap();
        assert!(matches!(prune_stage(&z, &p, 0.5, 2, &PruneOptions::default()), Err(Error::ZeroNormRow { .. })));
    }

    fn record(m: usize, values: &[f64], layer: u32) -> AttentionRecord {
        let total: f64 = values.iter().sum();
        let row: Vec<f32> = values.iter().map(|v| (v / total) as f32).collect();
        let a = TokenMatrix::new(1, m, row).unwrap();
        AttentionRecord::with_identity_cols(a, IndexSet::full(1), layer).unwrap()
    }

    fn single_layer(m: usize) -> LayerStack {
        LayerStack::new(vec![identity(m)], vec![22]).unwrap()
    }

    fn profile(a: f64) -> ClassProfile {
        ClassProfile::weights(CategoryId::DEFAULT, &[(22, 1.0)], a).unwrap()
    }

    #[test]
    fn chained_stages() {
        let m = 8;
        let recs = vec![record(m, &concentrated(m, &[0, 1]), 2), record(m, &concentrated(m, &[2, 5]), 6)];
        let sched = StageSchedule::from_budgets(&[4, 2]).unwrap();
        let t = run_schedule(&single_layer(m), &recs, &profile(0.5), &Projection::Identity, &sched, &PruneOptions::default())
            .unwrap();
        assert_eq!(t.stage_sizes(), vec![4, 2]);
        assert!(t.stages[1].survivors == t.stages[0].retained);
        assert!(t.stages[1].retained.is_subset(&t.stages[0].retained));
        assert_eq!(t.final_retained, t.stages[1].retained);
        assert!(!t.stages[1].attn_reused());
    }

    #[test]
    fn identity_schedule_keeps_everything() {
        let m = 6;
        let recs = vec![record(m, &[1.0; 6], 2)];
        let sched = StageSchedule::from_budgets(&[m]).unwrap();
        let t = run_schedule(&single_layer(m), &recs, &profile(0.7), &Projection::Identity, &sched, &PruneOptions::default())
            .unwrap();
        assert_eq!(t.final_retained, IndexSet::full(m));
    }

    #[test]
    fn record_reuse_is_flagged() {
        let m = 8;
        let recs = vec![record(m, &concentrated(m, &[0, 1]), 2)];
        let sched = StageSchedule::from_budgets(&[6, 4, 2]).unwrap();
        let t = run_schedule(&single_layer(m), &recs, &profile(0.5), &Projection::Identity, &sched, &PruneOptions::default())
            .unwrap();
        let flags: Vec<bool> = t.stages.iter().map(|s| s.attn_reused()).collect();
        assert_eq!(flags, vec![false, true, true]);

        // first stage falls back to the nearest lower tag, then chains
        let recs = vec![record(m, &[1.0; 8], 1), record(m, &[1.0; 8], 9)];
        let t = run_schedule(&single_layer(m), &recs, &profile(0.5), &Projection::Identity, &sched, &PruneOptions::default())
            .unwrap();
        let used: Vec<u32> = t.stages.iter().map(|s| s.record.unwrap().stage_layer).collect();
        assert_eq!(used, vec![1, 1, 1]);

        let recs = vec![record(m, &[1.0; 8], 40)];
        let t = run_schedule(&single_layer(m), &recs, &profile(0.5), &Projection::Identity, &sched, &PruneOptions::default())
            .unwrap();
        assert_eq!(t.stages[0].record, Some(RecordSource { stage_layer: 40, reused: true }));

        assert_eq!(
            run_schedule(&single_layer(m), &[], &profile(0.5), &Projection::Identity, &sched, &PruneOptions::default()),
            Err(Error::MissingAttention(2).at_stage(2))
        );
    }

    #[test]
    fn stage_errors_carry_layer() {
        let m = 4;
        let recs = vec![record(m, &[1.0; 4], 2)];
        let sched = StageSchedule::new(vec![Stage { layer: 2, budget: 9 }]).unwrap();
        let err = run_schedule(&single_layer(m), &recs, &profile(0.5), &Projection::Identity, &sched, &PruneOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Stage { stage_layer: 2, .. }));
    }

    #[test]
    fn misaligned_grids_are_resampled() {
        let fine = TokenMatrix::new(16, 2, (0..32).map(|i| 1.0 + i as f32).collect())
            .unwrap()
            .with_grid(Grid::new(4, 4))
            .unwrap();
        let coarse = TokenMatrix::new(4, 2, vec![1.0; 8]).unwrap().with_grid(Grid::new(2, 2)).unwrap();
        let stack = LayerStack::new(vec![fine, coarse], vec![5, 22]).unwrap();
        let alpha = MixtureWeights::new(vec![0.5, 0.5]).unwrap();
        let (f, ops, aligned) = prepare_features(&stack, &alpha, &Projection::Identity, UpsampleMode::Bilinear).unwrap();
        assert!(aligned);
        assert_eq!(f.rows(), 4);
        assert_eq!(ops.fusion_madds, 2 * 4 * 2);
    }

    fn random_unit_instance(m: usize, d: usize, seed: &[f32]) -> TokenMatrix {
        let data = (0..m * d)
            .map(|i| seed[(i * 7 + i / d * 3) % seed.len()] + if i % d == i / d % d { 0.5 } else { 0.0 })
            .collect();
        TokenMatrix::new(m, d, data).unwrap()
    }

    proptest! {
        #[test]
        fn exact_budget_and_disjoint(
            (m, d) in (4usize..40, 2usize..8),
            seed in proptest::collection::vec(-1.0f32..1.0, 61),
            phi in proptest::collection::vec(0.0f64..1.0, 40),
            a in 0usize..=5,
            r in 1usize..40,
            rule in prop_oneof![Just(SeedRule::BottomK), Just(SeedRule::TopK)],
        ) {
            let feats = random_unit_instance(m, d, &seed);
            prop_assume!(feats.iter_rows().all(|row| row.iter().any(|v| *v != 0.0)));
            let r = r.min(m);
            let opts = PruneOptions { iterations: 5, seed_rule: rule };
            let res = prune_stage(&feats, &phi_all(&phi[..m]), a as f64 / 5.0, r, &opts).unwrap();
            prop_assert_eq!(res.retained.len(), r);
            prop_assert_eq!(res.pivots.intersection_len(&res.completion), 0);
            prop_assert_eq!(res.pivots.len() + res.completion.len(), r);
            prop_assert!(res.retained.is_subset(&res.survivors));
        }

        #[test]
        fn deterministic(
            seed in proptest::collection::vec(-1.0f32..1.0, 61),
            phi in proptest::collection::vec(0.0f64..1.0, 24),
        ) {
            let feats = random_unit_instance(24, 5, &seed);
            prop_assume!(feats.iter_rows().all(|row| row.iter().any(|v| *v != 0.0)));
            let a = prune_stage(&feats, &phi_all(&phi), 0.6, 10, &PruneOptions::default()).unwrap();
            let b = prune_stage(&feats, &phi_all(&phi), 0.6, 10, &PruneOptions::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
