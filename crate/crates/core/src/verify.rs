//! Randomized checks of the bounds the fusion and pruning steps satisfy.
//!
//! Every check draws from its own ChaCha stream derived from the probe seed
//! and the check name, so any single check can be rerun in isolation and a
//! report can always be reproduced from its recorded seed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complexity::{complexity_estimate, Shape};
use crate::error::{Error, Result};
use crate::fusion::{fuse, softmax_mixture, ClassProfile, MixtureWeights, ProfileTable, Projection, UpsampleMode};
use crate::math;
use crate::matrix::{cosine_sim, l2_normalize_rows, IndexSet, LayerStack, TokenMatrix};
use crate::pruner::{
    prepare_features, prune_features, prune_stage, spherical_kmeans, ClusterState, PruneOptions,
    PruneStageResult, SeedRule, StageSchedule,
};
use crate::saliency::{AttentionRecord, SaliencyScores};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub cos_euclid: f64,
    pub lipschitz: f64,
    pub stability: f64,
    pub hull: f64,
    pub seed_sum: f64,
    pub kmeans: f64,
    pub separation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            cos_euclid: 1e-6,
            lipschitz: 1e-9,
            stability: 1e-6,
            hull: 1e-5,
            seed_sum: 1e-9,
            kmeans: 1e-6,
            separation: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub seed: u64,
    pub cos_euclid_trials: usize,
    pub lipschitz_trials: usize,
    pub temp_limit_trials: usize,
    pub stability_trials: usize,
    pub hull_trials: usize,
    pub seed_trials: usize,
    pub kmeans_trials: usize,
    pub separation_trials: usize,
    pub complexity_trials: usize,
    /// Longest score vector drawn for the softmax checks.
    pub max_layers: usize,
    /// Scores are drawn from `[-score_range, score_range]`.
    pub score_range: f64,
    pub temperatures: Vec<f64>,
    /// Bound on layer-wise token norms in the stability check.
    pub norm_bound: f64,
    pub kmeans_iterations: usize,
    pub seed_rule: SeedRule,
    pub max_exemplars: usize,
    pub tolerances: Tolerances,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            seed: 0x5eed_cafe,
            cos_euclid_trials: 10_000,
            lipschitz_trials: 100_000,
            temp_limit_trials: 1_000,
            stability_trials: 10_000,
            hull_trials: 1_000,
            seed_trials: 500,
            kmeans_trials: 1_000,
            separation_trials: 1_000,
            complexity_trials: 50,
            max_layers: 32,
            score_range: 10.0,
            temperatures: alloc::vec![0.1, 1.0, 4.0],
            norm_bound: 4.0,
            kmeans_iterations: 5,
            seed_rule: SeedRule::BottomK,
            max_exemplars: 5,
            tolerances: Tolerances::default(),
        }
    }
}

impl ProbeConfig {
    /// Same checks with every trial count divided by `factor` (at least 1).
    pub fn scaled_down(&self, factor: usize) -> Self {
        let f = |n: usize| (n / factor.max(1)).max(1);
        ProbeConfig {
            cos_euclid_trials: f(self.cos_euclid_trials),
            lipschitz_trials: f(self.lipschitz_trials),
            temp_limit_trials: f(self.temp_limit_trials),
            stability_trials: f(self.stability_trials),
            hull_trials: f(self.hull_trials),
            seed_trials: f(self.seed_trials),
            kmeans_trials: f(self.kmeans_trials),
            separation_trials: f(self.separation_trials),
            complexity_trials: f(self.complexity_trials),
            ..self.clone()
        }
    }

    fn rng(&self, check: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(check))
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    /// Smallest observed `bound - value`; negative beyond tolerance means a violation.
    pub worst_slack: f64,
    pub violations: usize,
    pub exemplars: Vec<String>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

struct Tally {
    name: &'static str,
    seed: u64,
    trials: usize,
    worst: f64,
    violations: usize,
    exemplars: Vec<String>,
    max_exemplars: usize,
}

impl Tally {
    fn new(name: &'static str, cfg: &ProbeConfig) -> Self {
        Tally {
            name,
            seed: cfg.seed,
            trials: 0,
            worst: f64::INFINITY,
            violations: 0,
            exemplars: Vec::new(),
            max_exemplars: cfg.max_exemplars,
        }
    }

    /// Records one comparison `value <= bound + tol`.
    fn bound(&mut self, value: f64, bound: f64, tol: f64, what: impl FnOnce() -> String) {
        let slack = bound - value;
        if slack < self.worst {
            self.worst = slack;
        }
        if value.is_nan() || value > bound + tol {
            self.fail(what);
        }
    }

    fn fail(&mut self, what: impl FnOnce() -> String) {
        self.violations += 1;
        if self.exemplars.len() < self.max_exemplars {
            self.exemplars.push(what());
        }
    }

    fn trial(&mut self) {
        self.trials += 1;
    }

    fn finish(self, note: Option<String>) -> CheckReport {
        CheckReport {
            name: self.name.into(),
            seed: self.seed,
            trials: self.trials,
            worst_slack: if self.worst.is_finite() { self.worst } else { 0.0 },
            violations: self.violations,
            exemplars: self.exemplars,
            passed: self.violations == 0,
            note,
        }
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, range: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-range..=range)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TokenMatrix {
    loop {
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let m = TokenMatrix::new(rows, cols, data).expect("finite");
        if m.iter_rows().all(|r| math::norm_f32(r) > 1e-3) {
            return m;
        }
    }
}

/// Rows drawn uniformly in direction with norm at most `bound`.
fn bounded_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> TokenMatrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v = uniform_vec(rng, cols, 1.0);
        let n = math::sqrt(v.iter().map(|x| x * x).sum()).max(1e-12);
        // shrink slightly so f32 rounding cannot push a row past the bound
        let r = rng.gen_range(0.0..=bound) * (1.0 - 1e-6);
        data.extend(v.iter().map(|x| (x / n * r) as f32));
    }
    TokenMatrix::new(rows, cols, data).expect("finite")
}

fn sq(x: f64) -> f64 {
    x * x
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += f64::from(*x) * f64::from(*y);
    }
    s
}

/// `‖u − v‖² = 2(1 − u·v)` for engine-normalized unit rows.
pub fn check_cos_euclid(cfg: &ProbeConfig) -> CheckReport {
    let mut t = Tally::new("cos-euclid", cfg);
    let mut rng = cfg.rng(t.name);
    let tol = cfg.tolerances.cos_euclid;
    for i in 0..cfg.cos_euclid_trials {
        let d = rng.gen_range(1..=16);
        let a = random_matrix(&mut rng, 1, d);
        let b = match i % 10 {
            0 => a.clone(),
            1 => TokenMatrix::new(1, d, a.data().iter().map(|v| -v).collect()).expect("finite"),
            _ => random_matrix(&mut rng, 1, d),
        };
        let u = l2_normalize_rows(&a).expect("non-zero");
        let v = l2_normalize_rows(&b).expect("non-zero");
        let (u, v) = (u.row(0), v.row(0));
        let dist2: f64 = u.iter().zip(v).map(|(x, y)| sq(f64::from(*x) - f64::from(*y))).sum();
        let cos = cosine_sim(u, v).expect("same dim");
        let gap = (dist2 - 2.0 * (1.0 - cos)).abs();
        t.trial();
        t.bound(gap, 0.0, tol, || format!("d={d} dist2={dist2} cos={cos}"));
    }
    t.finish(None)
}

/// `‖α(τw) − α(τw′)‖₁ ≤ (τ/2)‖w − w′‖₁`.
pub fn check_softmax_lipschitz(cfg: &ProbeConfig) -> CheckReport {
    let mut t = Tally::new("softmax-lipschitz", cfg);
    let mut rng = cfg.rng(t.name);
    let tol = cfg.tolerances.lipschitz;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..cfg.lipschitz_trials {
        let l = rng.gen_range(1..=cfg.max_layers.max(1));
        let tau = cfg.temperatures[rng.gen_range(0..cfg.temperatures.len())];
        let w = uniform_vec(&mut rng, l, cfg.score_range);
        let w2 = uniform_vec(&mut rng, l, cfg.score_range);
        let a = softmax_mixture(&w, tau).expect("finite scores");
        let b = softmax_mixture(&w2, tau).expect("finite scores");
        let lhs = l1(a.as_slice(), b.as_slice());
        let rhs = tau / 2.0 * l1(&w, &w2);
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }
        t.trial();
        t.bound(lhs, rhs, tol, || format!("L={l} tau={tau} lhs={lhs} rhs={rhs}"));
    }
    t.finish(Some(format!("largest lhs/rhs ratio {worst_ratio:.6}")))
}

/// Small-temperature mixtures approach uniform; large-temperature mixtures
/// approach one-hot on the unique maximum.
pub fn check_temp_limits(w: &[f64], tau_small: f64, tau_large: f64) -> Result<CheckReport> {
    let cfg = ProbeConfig::default();
    let mut t = Tally::new("temperature-limits", &cfg);
    temp_limit_case(&mut t, w, tau_small, tau_large)?;
    Ok(t.finish(None))
}

fn temp_limit_case(t: &mut Tally, w: &[f64], tau_small: f64, tau_large: f64) -> Result<()> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let argmax = w.iter().position(|&v| v == max).ok_or(Error::InvalidMixture)?;
    let small = softmax_mixture(w, tau_small)?;
    let u = 1.0 / w.len() as f64;
    let dev = small.as_slice().iter().map(|a| (a - u).abs()).fold(0.0, f64::max);
    t.trial();
    t.bound(dev, 0.0, 1e-4, || format!("tau={tau_small} max deviation from uniform {dev}"));
    if w.iter().filter(|&&v| v == max).count() > 1 {
        return Err(Error::DegenerateArgmax);
    }
    let large = softmax_mixture(w, tau_large)?;
    let peak = large.as_slice()[argmax];
    t.trial();
    t.bound(1.0 - peak, 0.0, 1e-6, || format!("tau={tau_large} peak {peak}"));
    Ok(())
}

fn probe_temp_limits(cfg: &ProbeConfig) -> CheckReport {
    let mut t = Tally::new("temperature-limits", cfg);
    let mut rng = cfg.rng(t.name);
    let fixed: [(&[f64], f64, f64); 2] = [(&[1.7, -3.2, 0.4], 1e-6, 1e3), (&[0.1, 0.9, 0.3], 1e-6, 1e4)];
    for (w, s, l) in fixed {
        temp_limit_case(&mut t, w, s, l).expect("unique maximum");
    }
    let mut skipped = 0;
    for _ in 0..cfg.temp_limit_trials {
        let l = rng.gen_range(2..=cfg.max_layers.max(2));
        let w = uniform_vec(&mut rng, l, 1.0);
        let mut sorted = w.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        // one-hot within 1e-6 needs tau * gap >= ln((L - 1) / 1e-6)
        if sorted[0] - sorted[1] < 0.05 {
            skipped += 1;
            continue;
        }
        if temp_limit_case(&mut t, &w, 1e-6, 1e3).is_err() {
            skipped += 1;
        }
    }
    t.finish(Some(format!("{skipped} draws skipped for near-tied maxima")))
}

/// A pair of category profiles used to model a routing mistake.
#[derive(Clone, Debug, PartialEq)]
pub struct MisroutePair {
    pub intended: ClassProfile,
    pub routed: ClassProfile,
}

/// Every ordered pair of distinct categories in `table`.
pub fn misroute_pairs(table: &ProfileTable) -> Vec<MisroutePair> {
    let ps = table.profiles();
    let mut out = Vec::new();
    for a in ps {
        for b in ps {
            if a.category != b.category {
                out.push(MisroutePair { intended: a.clone(), routed: b.clone() });
            }
        }
    }
    out
}

fn max_token_drift(stack: &LayerStack, a: &MixtureWeights, b: &MixtureWeights) -> f64 {
    let za = fuse(stack, a).expect("aligned stack");
    let zb = fuse(stack, b).expect("aligned stack");
    za.iter_rows()
        .zip(zb.iter_rows())
        .map(|(x, y)| math::sqrt(x.iter().zip(y).map(|(p, q)| sq(f64::from(*p) - f64::from(*q))).sum()))
        .fold(0.0, f64::max)
}

/// Fused-token drift is at most `(Bτ/2)‖Δw‖₁` for layer norms bounded by B.
/// Routing mistakes between `misroutes` profiles are checked both with the
/// profile coefficients used as scores and with their mixtures directly
/// (drift at most `B‖Δα‖₁`).
pub fn check_stability_bound(cfg: &ProbeConfig, misroutes: &[MisroutePair]) -> CheckReport {
    let mut t = Tally::new("fusion-stability", cfg);
    let mut rng = cfg.rng(t.name);
    let b = cfg.norm_bound;
    let tol = cfg.tolerances.stability;
    for _ in 0..cfg.stability_trials {
        let l = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let tau = cfg.temperatures[rng.gen_range(0..cfg.temperatures.len())];
        let layers = (0..l).map(|_| bounded_matrix(&mut rng, m, d, b)).collect();
        let stack = LayerStack::new(layers, (0..l as u32).collect()).expect("consistent");
        let w = uniform_vec(&mut rng, l, 3.0);
        let w2 = uniform_vec(&mut rng, l, 3.0);
        let drift = max_token_drift(&stack, &softmax_mixture(&w, tau).expect("ok"), &softmax_mixture(&w2, tau).expect("ok"));
        let bound = b * tau / 2.0 * l1(&w, &w2);
        t.trial();
        t.bound(drift, bound, tol, || format!("L={l} M={m} d={d} tau={tau} drift={drift} bound={bound}"));
    }

    if !misroutes.is_empty() {
        let mut ids: Vec<u32> = misroutes
            .iter()
            .flat_map(|p| p.intended.mode.support().chain(p.routed.mode.support()))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let probes = (cfg.stability_trials / misroutes.len()).max(1);
        for pair in misroutes {
            for _ in 0..probes {
                let m = rng.gen_range(1..=4);
                let d = rng.gen_range(1..=8);
                let layers = ids.iter().map(|_| bounded_matrix(&mut rng, m, d, b)).collect();
                let stack = LayerStack::new(layers, ids.clone()).expect("consistent");
                let tau = cfg.temperatures[rng.gen_range(0..cfg.temperatures.len())];
                let (c, c2) = (pair.intended.category, pair.routed.category);

                let w = pair.intended.dense_vector(&ids);
                let w2 = pair.routed.dense_vector(&ids);
                let drift = max_token_drift(&stack, &softmax_mixture(&w, tau).expect("ok"), &softmax_mixture(&w2, tau).expect("ok"));
                let bound = b * tau / 2.0 * l1(&w, &w2);
                t.trial();
                t.bound(drift, bound, tol, || format!("misroute {c}->{c2} tau={tau} drift={drift} bound={bound}"));

                let a = pair.intended.mixture(&ids).expect("layers present");
                let a2 = pair.routed.mixture(&ids).expect("layers present");
                let drift = max_token_drift(&stack, &a, &a2);
                let bound = b * l1(a.as_slice(), a2.as_slice());
                t.trial();
                t.bound(drift, bound, tol, || format!("misroute {c}->{c2} mixture drift={drift} bound={bound}"));
            }
        }
    }
    let note = (!misroutes.is_empty()).then(|| format!("{} misroute pairs included", misroutes.len()));
    t.finish(note)
}

/// Fused rows stay inside each coordinate's layer range, are no longer than
/// the longest layer row, and equal a 64-bit recomputation.
pub fn check_hull(stack: &LayerStack, alpha: &MixtureWeights, tol: f64) -> CheckReport {
    let cfg = ProbeConfig::default();
    let mut t = Tally::new("convex-hull", &cfg);
    hull_case(&mut t, stack, alpha, tol);
    t.finish(None)
}

fn hull_case(t: &mut Tally, stack: &LayerStack, alpha: &MixtureWeights, tol: f64) {
    let z = fuse(stack, alpha).expect("aligned stack");
    t.trial();
    for tok in 0..z.rows() {
        for j in 0..z.cols() {
            let vals = stack.layers.iter().map(|l| f64::from(l.get(tok, j)));
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            let v = f64::from(z.get(tok, j));
            t.bound(v, hi, tol, || format!("token {tok} coord {j}: {v} above {hi}"));
            t.bound(lo, v, tol, || format!("token {tok} coord {j}: {v} below {lo}"));
            let exact: f64 = stack.layers.iter().zip(alpha.as_slice()).map(|(l, a)| a * f64::from(l.get(tok, j))).sum();
            t.bound((v - exact).abs(), 0.0, tol, || format!("token {tok} coord {j}: {v} vs exact {exact}"));
        }
        let norm = math::norm_f32(z.row(tok));
        let max_norm = stack.layers.iter().map(|l| math::norm_f32(l.row(tok))).fold(0.0, f64::max);
        t.bound(norm, max_norm, tol, || format!("token {tok}: norm {norm} above {max_norm}"));
    }
}

fn probe_hull(cfg: &ProbeConfig) -> CheckReport {
    let mut t = Tally::new("convex-hull", cfg);
    let mut rng = cfg.rng(t.name);
    for _ in 0..cfg.hull_trials {
        let l = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=8);
        let layers = (0..l).map(|_| bounded_matrix(&mut rng, m, d, cfg.norm_bound)).collect();
        let stack = LayerStack::new(layers, (0..l as u32).collect()).expect("consistent");
        let alpha = if rng.gen_bool(0.1) {
            MixtureWeights::one_hot(l, rng.gen_range(0..l))
        } else {
            softmax_mixture(&uniform_vec(&mut rng, l, 3.0), 1.0).expect("ok")
        };
        hull_case(&mut t, &stack, &alpha, cfg.tolerances.hull);
    }
    t.finish(None)
}

/// Random pruning instance with unit features over `pivots + pool` tokens.
struct Instance {
    feats: TokenMatrix,
    phi: SaliencyScores,
    ratio: f64,
    budget: usize,
}

fn random_instance(rng: &mut ChaCha8Rng, tokens: usize, pivots: usize, completion: usize, d: usize) -> Instance {
    let feats = random_matrix(rng, tokens, d);
    let values = (0..tokens).map(|_| rng.gen_range(0.0..1.0)).collect();
    let budget = pivots + completion;
    Instance {
        feats,
        phi: SaliencyScores::new(IndexSet::full(tokens), values).expect("finite"),
        ratio: pivots as f64 / budget as f64,
        budget,
    }
}

/// Lexicographically first `k`-subset of `0..n` minimizing `Σ rho`, found by
/// enumeration. Sums within `tol` are treated as equal.
fn brute_min_subset(rho: &[f64], k: usize, tol: f64) -> (Vec<usize>, f64) {
    let n = rho.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = (idx.clone(), idx.iter().map(|&i| rho[i]).sum::<f64>());
    loop {
        // advance to the next combination in lexicographic order
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
        let s: f64 = idx.iter().map(|&i| rho[i]).sum();
        if s < best.1 - tol {
            best = (idx.clone(), s);
        }
    }
}

/// Engine seeds match the exhaustive minimizer of total redundancy.
pub fn check_seed_optimality(cfg: &ProbeConfig) -> CheckReport {
    check_seed_optimality_collect(cfg, &mut Vec::new())
}

/// As [`check_seed_optimality`], also returning every stage run.
pub fn check_seed_optimality_collect(cfg: &ProbeConfig, runs: &mut Vec<SeparationCase>) -> CheckReport {
    let mut t = Tally::new("seed-optimality", cfg);
    let mut rng = cfg.rng(t.name);
    let opts = PruneOptions { iterations: cfg.kmeans_iterations, seed_rule: cfg.seed_rule };
    for _ in 0..cfg.seed_trials {
        let pool = rng.gen_range(1..=18);
        let k2 = rng.gen_range(1..=pool.min(6));
        let k1 = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=6);
        let inst = random_instance(&mut rng, pool + k1, k1, k2, d);
        let res = prune_stage(&inst.feats, &inst.phi, inst.ratio, inst.budget, &opts).expect("valid instance");
        t.trial();

        // independent pivots: highest saliency, lowest index on ties
        let mut order: Vec<usize> = (0..inst.phi.len()).collect();
        order.sort_by(|&a, &b| inst.phi.values[b].partial_cmp(&inst.phi.values[a]).expect("finite").then(a.cmp(&b)));
        let mut pivots: Vec<usize> = order[..k1].to_vec();
        pivots.sort_unstable();
        if pivots.as_slice() != res.pivots.as_slice() {
            t.fail(|| format!("pivots {:?} expected {:?}", res.pivots.as_slice(), pivots));
        }
        let unit = l2_normalize_rows(&inst.feats).expect("non-zero");
        let candidates: Vec<usize> = (0..inst.phi.len()).filter(|i| !pivots.contains(i)).collect();
        let rho: Vec<f64> = candidates
            .iter()
            .map(|&c| pivots.iter().map(|&p| dot64(unit.row(c), unit.row(p))).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (best, best_sum) = brute_min_subset(&rho, k2, 1e-12);
        let expected: Vec<usize> = best.iter().map(|&i| candidates[i]).collect();
        let got_sum: f64 = res
            .seeds
            .iter()
            .map(|s| candidates.iter().position(|&c| c == s).map_or(f64::INFINITY, |i| rho[i]))
            .sum();
        t.bound(got_sum, best_sum, cfg.tolerances.seed_sum, || {
            format!("seed sum {got_sum} above minimum {best_sum} (|U|={pool}, K2={k2})")
        });
        if res.seeds.as_slice() != expected.as_slice() {
            t.fail(|| format!("seeds {:?} expected {:?}", res.seeds.as_slice(), expected));
        }
        runs.push(SeparationCase { features: inst.feats, result: res });
    }
    t.finish(None)
}

/// Objective traces are non-decreasing and bounded by the number of rows.
pub fn check_kmeans_monotone(traces: &[(ClusterState, usize)], tol: f64) -> CheckReport {
    let cfg = ProbeConfig::default();
    let mut t = Tally::new("kmeans-monotone", &cfg);
    for (c, rows) in traces {
        kmeans_case(&mut t, c, *rows, tol);
    }
    t.finish(None)
}

fn kmeans_case(t: &mut Tally, c: &ClusterState, rows: usize, tol: f64) {
    t.trial();
    for (i, w) in c.objective_trace.windows(2).enumerate() {
        t.bound(w[0], w[1], tol, || format!("objective fell from {} to {} at iteration {}", w[0], w[1], i + 1));
    }
    // each term is a cosine of f32-normalized rows, so slack grows with rows
    let row_tol = tol * rows.max(1) as f64;
    for j in &c.objective_trace {
        t.bound(*j, rows as f64, row_tol, || format!("objective {j} above row count {rows}"));
    }
}

fn probe_kmeans(cfg: &ProbeConfig) -> CheckReport {
    let mut t = Tally::new("kmeans-monotone", cfg);
    let mut rng = cfg.rng(t.name);
    for _ in 0..cfg.kmeans_trials {
        let n = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=n.min(8));
        let raw = if rng.gen_bool(0.05) {
            // identical rows
            let row = random_matrix(&mut rng, 1, d);
            TokenMatrix::new(n, d, row.data().repeat(n)).expect("finite")
        } else {
            random_matrix(&mut rng, n, d)
        };
        let u = l2_normalize_rows(&raw).expect("non-zero");
        let mut seeds: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.gen_range(i..n);
            seeds.swap(i, j);
        }
        let seeds = IndexSet::from_unsorted(seeds[..k].iter().copied());
        let c = spherical_kmeans(&u, &seeds, cfg.kmeans_iterations);
        kmeans_case(&mut t, &c, n, cfg.tolerances.kmeans);
    }
    t.finish(None)
}

/// A stage result together with the token features it was computed from.
#[derive(Clone, Debug)]
pub struct SeparationCase {
    pub features: TokenMatrix,
    pub result: PruneStageResult,
}

/// Every seed lies at cosine at most δ from every pivot, and hence at
/// distance at least `sqrt(2(1 − δ))`, where δ is the completion-count-th
/// smallest redundancy recomputed from the features.
pub fn check_separation(cases: &[SeparationCase], tol: f64) -> CheckReport {
    let cfg = ProbeConfig::default();
    let mut t = Tally::new("seed-pivot-separation", &cfg);
    for c in cases {
        separation_case(&mut t, c, tol);
    }
    t.finish(None)
}

fn unit64(row: &[f32]) -> Vec<f64> {
    let n = math::sqrt(row.iter().map(|v| f64::from(*v) * f64::from(*v)).sum());
    row.iter().map(|v| f64::from(*v) / n).collect()
}

fn separation_case(t: &mut Tally, c: &SeparationCase, tol: f64) {
    let r = &c.result;
    if r.pivots.is_empty() || r.seeds.is_empty() {
        return;
    }
    t.trial();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pivots: Vec<Vec<f64>> = r.pivots.iter().map(|p| unit64(c.features.row(p))).collect();
    let mut rho: Vec<f64> = r
        .survivors
        .difference(&r.pivots)
        .iter()
        .map(|tok| {
            let u = unit64(c.features.row(tok));
            pivots.iter().map(|p| dot(&u, p)).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    rho.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let delta = rho[r.split.completion - 1];
    for s in r.seeds.iter() {
        let u = unit64(c.features.row(s));
        for (p, pv) in r.pivots.iter().zip(&pivots) {
            let cos = dot(&u, pv);
            t.bound(cos, delta, tol, || format!("seed {s} pivot {p}: cos {cos} above delta {delta}"));
            let dist = math::sqrt(u.iter().zip(pv).map(|(x, y)| (x - y) * (x - y)).sum());
            let floor = math::sqrt((2.0 * (1.0 - delta)).max(0.0));
            t.bound(floor, dist, tol, || format!("seed {s} pivot {p}: distance {dist} below {floor}"));
        }
    }
}

/// Random single-stage pruning runs over the full ratio grid.
pub fn probe_prune_runs(cfg: &ProbeConfig, trials: usize, max_tokens: usize) -> Vec<SeparationCase> {
    let mut rng = cfg.rng("prune-runs");
    let opts = PruneOptions { iterations: cfg.kmeans_iterations, seed_rule: cfg.seed_rule };
    (0..trials)
        .map(|_| {
            let m = rng.gen_range(16..=max_tokens.max(16));
            let d = rng.gen_range(2..=16);
            let a = f64::from(rng.gen_range(0..=5u8)) / 5.0;
            let r = rng.gen_range(1..=m);
            let k1 = crate::pruner::split_budget(a, r).expect("valid").pivots;
            let mut inst = random_instance(&mut rng, m, k1, r - k1, d);
            inst.ratio = a;
            let result = prune_stage(&inst.feats, &inst.phi, a, r, &opts).expect("valid instance");
            SeparationCase { features: inst.feats, result }
        })
        .collect()
}

fn probe_separation(cfg: &ProbeConfig) -> CheckReport {
    let mut t = Tally::new("seed-pivot-separation", cfg);
    for c in probe_prune_runs(cfg, cfg.separation_trials, 96) {
        separation_case(&mut t, &c, cfg.tolerances.separation);
    }
    t.finish(None)
}

/// Draws a random configuration, runs fusion, projection and one pruning
/// stage, and compares the recorded multiply-add counters with the formula.
pub fn check_complexity_counters(cfg: &ProbeConfig) -> CheckReport {
    let mut t = Tally::new("complexity-counters", cfg);
    let mut rng = cfg.rng(t.name);
    for _ in 0..cfg.complexity_trials {
        let m = rng.gen_range(16..=160);
        let l = rng.gen_range(1..=4);
        let dv = rng.gen_range(1..=24);
        let projected = rng.gen_bool(0.5);
        let d = if projected { rng.gen_range(1..=24) } else { dv };
        let iters = rng.gen_range(0..=6);
        let a = rng.gen_range(0.0..=1.0);
        let r = rng.gen_range(1..=m);
        let shape = counted_shape(&mut rng, m, l, dv, d, projected, a, r, iters);
        t.trial();
        if let Err(msg) = shape {
            t.fail(|| msg);
        }
    }
    t.finish(None)
}

#[allow(clippy::too_many_arguments)]
fn counted_shape(
    rng: &mut ChaCha8Rng,
    m: usize,
    l: usize,
    dv: usize,
    d: usize,
    projected: bool,
    a: f64,
    r: usize,
    iters: usize,
) -> core::result::Result<(), String> {
    let layers = (0..l).map(|_| random_matrix(rng, m, dv)).collect();
    let stack = LayerStack::new(layers, (0..l as u32).collect()).expect("consistent");
    let projection = if projected { Projection::Linear(random_matrix(rng, dv, d)) } else { Projection::Identity };
    let alpha = softmax_mixture(&uniform_vec(rng, l, 1.0), 1.0).expect("ok");
    let row: Vec<f32> = (0..m).map(|_| rng.gen_range(0.01f32..1.0)).collect();
    let total: f32 = row.iter().sum();
    let attn = TokenMatrix::new(1, m, row.iter().map(|v| v / total).collect()).expect("finite");
    let rec = AttentionRecord::with_identity_cols(attn, IndexSet::full(1), 2).expect("stochastic");
    let (feats, fops, _) = prepare_features(&stack, &alpha, &projection, UpsampleMode::Bilinear).map_err(|e| format!("{e}"))?;
    let schedule = StageSchedule::from_budgets(&[r]).expect("valid");
    let opts = PruneOptions { iterations: iters, seed_rule: SeedRule::BottomK };
    let stages = prune_features(&feats, &[rec], a, &schedule, &opts).map_err(|e| format!("{e}"))?;
    let s = &stages[0];
    let est = complexity_estimate(&Shape {
        tokens: m as u64,
        layers: l as u64,
        vision_dim: dv as u64,
        decoder_dim: d as u64,
        pivots: s.split.pivots as u64,
        completion: s.split.completion as u64,
        iterations: iters as u64,
    });
    let expected_projection = if projected { (m * dv * d) as u64 } else { 0 };
    let objective = if s.split.completion > 0 { ((m - s.split.pivots) * s.split.completion * d) as u64 } else { 0 };
    if est.fusion != fops.fusion_madds
        || fops.projection_madds != expected_projection
        || !est.matches_stage(&s.ops)
        || s.ops.objective_madds != objective
    {
        return Err(format!(
            "M={m} L={l} d_v={dv} d={d} K1={} K2={} T={iters}: estimate {est:?}, counted {:?} / {:?}",
            s.split.pivots, s.split.completion, fops, s.ops
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckReport>,
    pub passed: bool,
}

/// Runs every check. Misroute pairs come from `table` when given.
pub fn run_suite(cfg: &ProbeConfig, table: Option<&ProfileTable>) -> SuiteReport {
    let misroutes = table.map(misroute_pairs).unwrap_or_default();
    let checks = alloc::vec![
        check_cos_euclid(cfg),
        check_softmax_lipschitz(cfg),
        probe_temp_limits(cfg),
        check_stability_bound(cfg, &misroutes),
        probe_hull(cfg),
        check_seed_optimality(cfg),
        probe_kmeans(cfg),
        probe_separation(cfg),
        check_complexity_counters(cfg),
    ];
    let passed = checks.iter().all(|c| c.passed);
    SuiteReport { seed: cfg.seed, checks, passed }
}

/// Names accepted by [`run_check`].
pub const CHECK_NAMES: [&str; 9] = [
    "cos-euclid",
    "softmax-lipschitz",
    "temperature-limits",
    "fusion-stability",
    "convex-hull",
    "seed-optimality",
    "kmeans-monotone",
    "seed-pivot-separation",
    "complexity-counters",
];

/// Runs a single named check.
pub fn run_check(name: &str, cfg: &ProbeConfig, table: Option<&ProfileTable>) -> Option<CheckReport> {
    Some(match name {
        "cos-euclid" => check_cos_euclid(cfg),
        "softmax-lipschitz" => check_softmax_lipschitz(cfg),
        "temperature-limits" => probe_temp_limits(cfg),
        "fusion-stability" => check_stability_bound(cfg, &table.map(misroute_pairs).unwrap_or_default()),
        "convex-hull" => probe_hull(cfg),
        "seed-optimality" => check_seed_optimality(cfg),
        "kmeans-monotone" => probe_kmeans(cfg),
        "seed-pivot-separation" => probe_separation(cfg),
        "complexity-counters" => check_complexity_counters(cfg),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::CategoryId;
    use alloc::vec;

    fn small() -> ProbeConfig {
        ProbeConfig::default().scaled_down(50)
    }

    #[test]
    fn suite_passes_and_is_reproducible() {
        let a = run_suite(&small(), None);
        for c in &a.checks {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(a, run_suite(&small(), None));
    }

    #[test]
    fn temp_limit_examples() {
        assert!(check_temp_limits(&[1.7, -3.2, 0.4], 1e-6, 1e3).unwrap().passed);
        assert!(check_temp_limits(&[0.1, 0.9, 0.3], 1e-6, 1e4).unwrap().passed);
        assert_eq!(check_temp_limits(&[0.5, 0.5, 0.1], 1e-6, 1e4), Err(Error::DegenerateArgmax));
    }

    #[test]
    fn lipschitz_two_entry_slack() {
        // w = (M, 0), w' = (0, M), tau = 1: lhs tends to 2 while rhs = M
        let big = 50.0;
        let a = softmax_mixture(&[big, 0.0], 1.0).unwrap();
        let b = softmax_mixture(&[0.0, big], 1.0).unwrap();
        let lhs = l1(a.as_slice(), b.as_slice());
        assert!((lhs - 2.0).abs() < 1e-12);
        assert!(lhs <= 0.5 * l1(&[big, 0.0], &[0.0, big]));
    }

    #[test]
    fn hull_examples() {
        let e1 = TokenMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let e2 = TokenMatrix::from_rows(&[[0.0f32, 1.0]]).unwrap();
        let s = LayerStack::new(vec![e1, e2], vec![1, 2]).unwrap();
        assert!(check_hull(&s, &MixtureWeights::new(vec![0.5, 0.5]).unwrap(), 1e-5).passed);
        assert!(check_hull(&s, &MixtureWeights::one_hot(2, 1), 1e-5).passed);
    }

    #[test]
    fn stability_identical_layers_have_no_drift() {
        let row = TokenMatrix::from_rows(&[[0.3f32, -0.2]]).unwrap();
        let s = LayerStack::new(vec![row.clone(), row.clone(), row], vec![1, 2, 3]).unwrap();
        let a = softmax_mixture(&[0.1, 2.0, -1.0], 4.0).unwrap();
        let b = softmax_mixture(&[3.0, 0.0, 0.0], 4.0).unwrap();
        assert!(max_token_drift(&s, &a, &b) < 1e-7);
    }

    #[test]
    fn brute_force_subset_oracle() {
        assert_eq!(brute_min_subset(&[0.9, 0.1, 0.5], 1, 1e-12), (vec![1], 0.1));
        assert_eq!(brute_min_subset(&[0.3, 0.3, 0.8], 2, 1e-12).0, vec![0, 1]);
        assert_eq!(brute_min_subset(&[0.3, 0.3, 0.8], 3, 1e-12).0, vec![0, 1, 2]);
    }

    #[test]
    fn reversed_seed_rule_is_detected() {
        let mut cfg = small();
        cfg.seed_trials = 50;
        cfg.separation_trials = 50;
        cfg.seed_rule = SeedRule::TopK;
        assert!(!check_seed_optimality(&cfg).passed);
        assert!(!probe_separation(&cfg).passed);
    }

    #[test]
    fn separation_degenerate_boundary() {
        // seed identical to a pivot forces delta = 1; the distance floor is 0
        let f = TokenMatrix::from_rows(&[[1.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let phi = SaliencyScores::new(IndexSet::full(3), vec![0.9, 0.05, 0.05]).unwrap();
        let r = prune_stage(&f, &phi, 0.5, 2, &PruneOptions::default()).unwrap();
        assert_eq!(r.seeds.as_slice(), &[2]);
        let report = check_separation(&[SeparationCase { features: f, result: r }], 1e-6);
        assert!(report.passed);
    }

    #[test]
    fn misroute_pairs_are_ordered() {
        let p = |c: u32, a: f64| ClassProfile::weights(CategoryId::new(c).unwrap(), &[(1, 1.0)], a).unwrap();
        let table = ProfileTable::new((0..9).map(|c| p(c, 0.5)).collect()).unwrap();
        assert_eq!(misroute_pairs(&table).len(), 72);
    }

    #[test]
    fn unknown_check_name() {
        assert!(run_check("nope", &small(), None).is_none());
        for n in CHECK_NAMES {
            assert!(run_check(n, &small().scaled_down(10), None).is_some());
        }
    }
}
