use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::matrix::{IndexSet, UnitFeatureMatrix};

use super::OpCounts;

/// Mean directions whose norm falls below this are treated as zero and the
/// previous center is kept.
const MIN_MEAN_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    /// Cluster id (0-based) for each row of the clustered matrix.
    pub assignments: Vec<usize>,
    /// Unit-norm centers.
    pub centers: Vec<Vec<f64>>,
    /// Coverage objective after initialization and after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations_run: usize,
}

impl ClusterState {
    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments.iter().enumerate().filter(move |(_, &c)| c == cluster).map(|(i, _)| i)
    }
}

/// Similarity of every row to its best center; ties go to the lower id.
fn assign(u: &UnitFeatureMatrix, centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut assignments = Vec::with_capacity(u.rows());
    let mut objective = 0.0;
    for t in 0..u.rows() {
        let row = u.row(t);
        let mut best = (0, f64::NEG_INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let s = math::dot_mixed(row, c);
            if s > best.1 {
                best = (k, s);
            }
        }
        assignments.push(best.0);
        objective += best.1;
    }
    (assignments, objective)
}

/// Spherical K-means over the rows of `u`, seeded with rows `seeds`.
///
/// Each iteration assigns rows to their most similar center and moves every
/// non-empty cluster's center to the normalized mean direction of its
/// members. Clusters that end up empty, or whose members sum to zero, keep
/// their previous center.
pub fn spherical_kmeans(u: &UnitFeatureMatrix, seeds: &IndexSet, iterations: usize) -> ClusterState {
    spherical_kmeans_counted(u, seeds, iterations, &mut OpCounts::default())
}

pub(crate) fn spherical_kmeans_counted(
    u: &UnitFeatureMatrix,
    seeds: &IndexSet,
    iterations: usize,
    ops: &mut OpCounts,
) -> ClusterState {
    let (n, d) = (u.rows(), u.cols());
    let pass = (n * seeds.len() * d) as u64;
    // seed rows are unit only to f32 precision; renormalize in f64
    let mut centers: Vec<Vec<f64>> = seeds
        .iter()
        .map(|s| {
            let norm = math::norm_f32(u.row(s));
            u.row(s).iter().map(|&v| f64::from(v) / norm).collect()
        })
        .collect();
    let (mut assignments, j0) = assign(u, &centers);
    let mut trace = Vec::with_capacity(iterations + 1);
    trace.push(j0);
    let mut sums = alloc::vec![alloc::vec![0.0f64; d]; centers.len()];
    for _ in 0..iterations {
        ops.kmeans_assign_madds += pass;
        sums.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v = 0.0));
        for (t, &k) in assignments.iter().enumerate() {
            for (acc, &v) in sums[k].iter_mut().zip(u.row(t)) {
                *acc += f64::from(v);
            }
        }
        ops.kmeans_update_madds += (n * d) as u64;
        for (c, s) in centers.iter_mut().zip(&sums) {
            let norm = math::sqrt(s.iter().map(|v| v * v).sum());
            if norm >= MIN_MEAN_NORM {
                for (ci, si) in c.iter_mut().zip(s) {
                    *ci = si / norm;
                }
            }
        }
        let (a, j) = assign(u, &centers);
        assignments = a;
        trace.push(j);
    }
    ops.objective_madds += pass;
    ClusterState { assignments, centers, objective_trace: trace, iterations_run: iterations }
}

/// Sum over rows of the best similarity to any center.
pub fn coverage_objective(centers: &[Vec<f64>], u: &UnitFeatureMatrix) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    assign(u, centers).1
}

/// One representative row per cluster: the member most similar to its center
/// (ties toward the lower row). Empty clusters are filled, in cluster order,
/// with the unchosen row of smallest `(rho, row)`, or of smallest row when no
/// redundancy scores are given. Returns row positions.
pub fn select_medoids(cluster: &ClusterState, u: &UnitFeatureMatrix, rho: Option<&[f64]>) -> IndexSet {
    select_medoids_counted(cluster, u, rho, &mut OpCounts::default())
}

pub(crate) fn select_medoids_counted(
    cluster: &ClusterState,
    u: &UnitFeatureMatrix,
    rho: Option<&[f64]>,
    ops: &mut OpCounts,
) -> IndexSet {
    let k = cluster.num_clusters();
    let mut best: Vec<Option<(usize, f64)>> = alloc::vec![None; k];
    for (t, &c) in cluster.assignments.iter().enumerate() {
        let s = math::dot_mixed(u.row(t), &cluster.centers[c]);
        match best[c] {
            Some((_, b)) if s <= b => {}
            _ => best[c] = Some((t, s)),
        }
    }
    ops.medoid_madds += (u.rows() * u.cols()) as u64;

    let mut chosen: Vec<bool> = alloc::vec![false; u.rows()];
    for &(t, _) in best.iter().flatten() {
        chosen[t] = true;
    }
    let mut backfill: Vec<usize> = (0..u.rows()).collect();
    if let Some(rho) = rho {
        backfill.sort_by(|&a, &b| rho[a].partial_cmp(&rho[b]).unwrap_or(core::cmp::Ordering::Equal));
    }
    let mut next = backfill.into_iter();
    let mut out = Vec::with_capacity(k);
    for b in &best {
        match b {
            Some((t, _)) => out.push(*t),
            None => {
                if let Some(t) = next.by_ref().find(|&t| !chosen[t]) {
                    chosen[t] = true;
                    out.push(t);
                }
            }
        }
    }
    IndexSet::from_unsorted(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{l2_normalize_rows, TokenMatrix};
    use alloc::vec;
    use proptest::prelude::*;

    fn unit(rows: &[&[f32]]) -> UnitFeatureMatrix {
        l2_normalize_rows(&TokenMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn set(v: &[usize]) -> IndexSet {
        IndexSet::from_unsorted(v.iter().copied())
    }

    #[test]
    fn identical_tokens_single_cluster() {
        let u = unit(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        for t in [0, 1, 4] {
            let c = spherical_kmeans(&u, &set(&[1]), t);
            assert_eq!(c.assignments, vec![0, 0, 0]);
            assert_eq!(c.objective_trace.len(), t + 1);
            for j in &c.objective_trace {
                assert!((j - 3.0).abs() < 1e-6);
            }
            assert_eq!(select_medoids(&c, &u, None).as_slice(), &[0]);
        }
    }

    #[test]
    fn two_groups_one_round() {
        let u = unit(&[&[1.0, 0.1], &[1.0, -0.1], &[0.1, 1.0], &[0.0, 1.0]]);
        let c = spherical_kmeans(&u, &set(&[0, 3]), 1);
        assert_eq!(c.assignments, vec![0, 0, 1, 1]);
        // hand round: group means normalized
        let mean = |a: &[f32], b: &[f32]| {
            let m = [f64::from(a[0] + b[0]), f64::from(a[1] + b[1])];
            let n = (m[0] * m[0] + m[1] * m[1]).sqrt();
            [m[0] / n, m[1] / n]
        };
        let c0 = mean(u.row(0), u.row(1));
        let c1 = mean(u.row(2), u.row(3));
        for (got, want) in c.centers[0].iter().zip(c0).chain(c.centers[1].iter().zip(c1)) {
            assert!((got - want).abs() < 1e-7);
        }
        assert!((c.centers[0][1]).abs() < 1e-7);
    }

    #[test]
    fn zero_iterations_keep_seeds() {
        let u = unit(&[&[1.0, 0.0], &[0.8, 0.6], &[0.0, 1.0]]);
        let c = spherical_kmeans(&u, &set(&[0, 2]), 0);
        assert_eq!(c.objective_trace.len(), 1);
        assert_eq!(c.centers, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(c.iterations_run, 0);
        assert_eq!(c.assignments, vec![0, 0, 1]);
    }

    #[test]
    fn objective_examples() {
        let u = unit(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(coverage_objective(&[vec![1.0, 0.0], vec![0.0, 1.0]], &u), 2.0);
        assert_eq!(coverage_objective(&[vec![1.0, 0.0]], &u), 1.0);
        let ortho = unit(&[&[0.0, 0.0, 1.0]]);
        assert_eq!(coverage_objective(&[vec![1.0, 0.0, 0.0]], &ortho), 0.0);
    }

    #[test]
    fn medoid_is_closest_member() {
        let u = unit(&[&[1.0, 0.0], &[1.0, 0.3]]);
        let c = spherical_kmeans(&u, &set(&[0]), 1);
        let dots: Vec<f64> = (0..2).map(|t| math::dot_mixed(u.row(t), &c.centers[0])).collect();
        let want = if dots[1] > dots[0] { 1 } else { 0 };
        assert_eq!(select_medoids(&c, &u, None).as_slice(), &[want]);
    }

    #[test]
    fn empty_cluster_backfilled_by_redundancy() {
        let u = unit(&[&[1.0, 0.0], &[0.9, 0.1], &[0.8, 0.2]]);
        let state = ClusterState {
            assignments: vec![0, 0, 0],
            centers: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            objective_trace: vec![],
            iterations_run: 0,
        };
        let q = select_medoids(&state, &u, Some(&[0.1, 0.9, 0.2]));
        assert_eq!(q.as_slice(), &[0, 2]);
        let q = select_medoids(&state, &u, None);
        assert_eq!(q.as_slice(), &[0, 1]);
    }

    fn sphere_rows(n: usize, d: usize, raw: &[f32]) -> UnitFeatureMatrix {
        let data: Vec<f32> =
            (0..n * d).map(|i| raw[(i * 13 + i / d) % raw.len()] + if i % d == 0 { 1e-3 } else { 0.0 }).collect();
        l2_normalize_rows(&TokenMatrix::new(n, d, data).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn objective_never_decreases(
            (n, d) in (1usize..30, 1usize..8),
            raw in proptest::collection::vec(-1.0f32..1.0, 97),
            k in 1usize..8,
        ) {
            prop_assume!(raw.iter().any(|v| v.abs() > 1e-2));
            let u = sphere_rows(n, d, &raw);
            let k = k.min(n);
            let seeds = IndexSet::full(k);
            let c = spherical_kmeans(&u, &seeds, 5);
            for w in c.objective_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-6);
            }
            for j in &c.objective_trace {
                prop_assert!(*j <= n as f64 + 1e-6);
            }
            for center in &c.centers {
                let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-6);
            }
            let q = select_medoids(&c, &u, None);
            prop_assert_eq!(q.len(), k);
        }
    }
}
