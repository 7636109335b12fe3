//! Per-category search over candidate layer sets and split ratios.
//!
//! For every category the search evaluates each `(layer set, ratio)` pair of
//! a [`CandidateSpace`] on that category's samples, averages a pluggable
//! task score over the samples, and keeps the best pair. Fused features
//! depend only on the layer set, so they are computed once per sample and
//! layer set and shared by every ratio.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ClassProfile, MixtureWeights, ProfileTable, Projection, UpsampleMode, SIMPLEX_TOL};
use crate::matrix::{IndexSet, LayerStack};
use crate::pruner::{prepare_features, prune_features, PruneOptions, StageSchedule};
use crate::router::{CategoryId, NUM_CATEGORIES};
use crate::saliency::AttentionRecord;

/// Largest number of layers a candidate may mix.
pub const MAX_CANDIDATE_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateLayerSet {
    pub layers: Vec<u32>,
    /// Explicit weights aligned with `layers`; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl CandidateLayerSet {
    pub fn uniform(layers: &[u32]) -> Self {
        CandidateLayerSet { layers: layers.to_vec(), weights: None }
    }

    pub fn weighted(pairs: &[(u32, f64)]) -> Self {
        CandidateLayerSet {
            layers: pairs.iter().map(|p| p.0).collect(),
            weights: Some(pairs.iter().map(|p| p.1).collect()),
        }
    }

    pub fn resolved_weights(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => alloc::vec![1.0 / self.layers.len() as f64; self.layers.len()],
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCandidateSpace(m));
        if self.layers.is_empty() || self.layers.len() > MAX_CANDIDATE_LAYERS {
            return bad(format!("layer set {:?} must hold 1 to {MAX_CANDIDATE_LAYERS} layers", self.layers));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return bad(format!("layer set {:?} repeats a layer", self.layers));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.layers.len() {
                return bad(format!("layer set {:?} has {} weights", self.layers, w.len()));
            }
            let total: f64 = w.iter().sum();
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (total - 1.0).abs() > SIMPLEX_TOL {
                return bad(format!("weights of layer set {:?} are not a distribution", self.layers));
            }
        }
        Ok(())
    }

    pub fn profile(&self, category: CategoryId, ratio: f64) -> Result<ClassProfile> {
        let pairs: Vec<(u32, f64)> =
            self.layers.iter().copied().zip(self.resolved_weights()).collect();
        ClassProfile::weights(category, &pairs, ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpace {
    pub layer_sets: Vec<CandidateLayerSet>,
    pub ratios: Vec<f64>,
}

impl CandidateSpace {
    pub fn new(layer_sets: Vec<CandidateLayerSet>, ratios: Vec<f64>) -> Result<Self> {
        let space = CandidateSpace { layer_sets, ratios };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sets.is_empty() || self.ratios.is_empty() {
            return Err(Error::InvalidCandidateSpace("no candidates".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidCandidateSpace(format!("ratio {r} outside [0, 1]")));
        }
        self.layer_sets.iter().try_for_each(CandidateLayerSet::validate)
    }

    /// Number of `(layer set, ratio)` pairs.
    pub fn len(&self) -> usize {
        self.layer_sets.len() * self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid order: layer sets outer, ratios inner.
    fn pair(&self, index: usize) -> (usize, usize) {
        (index / self.ratios.len(), index % self.ratios.len())
    }
}

/// One labeled calibration sample with its recorded inputs.
#[derive(Clone, Debug)]
pub struct CalSample {
    pub id: String,
    pub prompt: String,
    pub category: CategoryId,
    pub stack: LayerStack,
    pub records: Vec<AttentionRecord>,
    pub projection: Projection,
    /// Tokens a good pruning should keep, used by the synthetic scorer.
    pub evidence: IndexSet,
}

#[derive(Clone, Copy, Debug)]
pub struct ScoreRequest<'a> {
    pub sample_id: &'a str,
    pub prompt: &'a str,
    pub category: CategoryId,
    pub retained: &'a IndexSet,
    pub evidence: &'a IndexSet,
}

/// Task score of a pruned sample. Higher is better.
pub trait Scorer {
    fn name(&self) -> String;
    fn score(&mut self, request: &ScoreRequest<'_>) -> core::result::Result<f64, String>;
}

/// `|retained ∩ evidence| / max(1, |evidence|)`.
pub fn synthetic_score(retained: &IndexSet, evidence: &IndexSet) -> f64 {
    retained.intersection_len(evidence) as f64 / evidence.len().max(1) as f64
}

/// Fraction of a sample's evidence tokens that survive pruning.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticScorer;

impl Scorer for SyntheticScorer {
    fn name(&self) -> String {
        "synthetic-evidence".into()
    }

    fn score(&mut self, r: &ScoreRequest<'_>) -> core::result::Result<f64, String> {
        Ok(synthetic_score(r.retained, r.evidence))
    }
}

/// Two-phase search: score every candidate on the first `fraction` of the
/// samples, then rescore only the best `keep` on all samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyRejection {
    pub fraction: f64,
    pub keep: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub schedule: StageSchedule,
    pub options: PruneOptions,
    pub upsample: UpsampleMode,
    pub early_rejection: Option<EarlyRejection>,
}

impl CalibrationConfig {
    pub fn new(schedule: StageSchedule) -> Self {
        CalibrationConfig {
            schedule,
            options: PruneOptions::default(),
            upsample: UpsampleMode::default(),
            early_rejection: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub category: CategoryId,
    pub layer_set: usize,
    pub layers: Vec<u32>,
    pub weights: Vec<f64>,
    pub ratio: f64,
    /// Mean score over `samples_scored` samples.
    pub score: f64,
    pub samples_scored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub category: CategoryId,
    pub samples: usize,
    pub layers: Vec<u32>,
    pub weights: Vec<f64>,
    pub ratio: f64,
    /// Absent when the profile was inherited.
    pub score: Option<f64>,
    /// Index of the winning entry in the report grid.
    pub best_entry: Option<usize>,
    /// Set when the class had no samples and took another profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inherited_from: Option<CategoryId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub scorer: String,
    pub candidates_per_class: usize,
    pub classes: Vec<ClassReport>,
    pub grid: Vec<GridEntry>,
}

/// Winning pair for one category together with every scored entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassOutcome {
    pub profile: ClassProfile,
    pub score: f64,
    pub best_entry: usize,
    pub entries: Vec<GridEntry>,
}

fn sorted_samples<'a>(samples: &[&'a CalSample]) -> Result<Vec<&'a CalSample>> {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = v.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::DuplicateSample(w[0].id.clone()));
    }
    Ok(v)
}

/// Mean score of each candidate in `candidates` over `samples`.
fn evaluate(
    category: CategoryId,
    samples: &[&CalSample],
    space: &CandidateSpace,
    candidates: &[usize],
    cfg: &CalibrationConfig,
    scorer: &mut dyn Scorer,
) -> Result<Vec<f64>> {
    let mut by_set: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (slot, &c) in candidates.iter().enumerate() {
        let (set, ratio) = space.pair(c);
        by_set.entry(set).or_default().push((slot, ratio));
    }
    let mut sums = alloc::vec![0.0f64; candidates.len()];
    for (&set, members) in &by_set {
        let cand = &space.layer_sets[set];
        let profile = cand.profile(category, 0.0)?;
        for sample in samples {
            let alpha: MixtureWeights = profile.mixture(&sample.stack.layer_ids)?;
            let (feats, _, _) =
                prepare_features(&sample.stack, &alpha, &sample.projection, cfg.upsample)?;
            for &(slot, r) in members {
                let ratio = space.ratios[r];
                let stages = prune_features(&feats, &sample.records, ratio, &cfg.schedule, &cfg.options)?;
                let retained = &stages[stages.len() - 1].retained;
                let req = ScoreRequest {
                    sample_id: &sample.id,
                    prompt: &sample.prompt,
                    category,
                    retained,
                    evidence: &sample.evidence,
                };
                let s = scorer.score(&req).map_err(|message| Error::ScorerFailure {
                    category: category.get(),
                    layer_set: set,
                    ratio,
                    sample: sample.id.clone(),
                    message,
                })?;
                if !s.is_finite() {
                    return Err(Error::ScorerFailure {
                        category: category.get(),
                        layer_set: set,
                        ratio,
                        sample: sample.id.clone(),
                        message: format!("non-finite score {s}"),
                    });
                }
                sums[slot] += s;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// First index of the maximum; NaN never wins.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Searches the whole candidate space for one category.
pub fn calibrate_class(
    category: CategoryId,
    samples: &[&CalSample],
    space: &CandidateSpace,
    cfg: &CalibrationConfig,
    scorer: &mut dyn Scorer,
) -> Result<ClassOutcome> {
    space.validate()?;
    if samples.is_empty() {
        return Err(Error::NoSamples(category.get()));
    }
    let samples = sorted_samples(samples)?;
    let all: Vec<usize> = (0..space.len()).collect();

    let mut scores = alloc::vec![0.0f64; space.len()];
    let mut counts = alloc::vec![samples.len(); space.len()];
    let finalists = match cfg.early_rejection {
        Some(er) if er.keep < space.len() => {
            let n = ((er.fraction.clamp(0.0, 1.0) * samples.len() as f64) as usize).clamp(1, samples.len());
            let phase1 = evaluate(category, &samples[..n], space, &all, cfg, scorer)?;
            let mut order = all.clone();
            order.sort_by(|&a, &b| phase1[b].partial_cmp(&phase1[a]).unwrap_or(core::cmp::Ordering::Equal));
            let mut kept: Vec<usize> = order[..er.keep.max(1)].to_vec();
            kept.sort_unstable();
            for (i, s) in phase1.into_iter().enumerate() {
                scores[i] = s;
                counts[i] = n;
            }
            kept
        }
        _ => all,
    };
    let full = evaluate(category, &samples, space, &finalists, cfg, scorer)?;
    for (&c, s) in finalists.iter().zip(&full) {
        scores[c] = *s;
        counts[c] = samples.len();
    }
    let best = finalists[argmax_first(&full)];

    let entries: Vec<GridEntry> = (0..space.len())
        .map(|i| {
            let (set, r) = space.pair(i);
            let cand = &space.layer_sets[set];
            GridEntry {
                category,
                layer_set: set,
                layers: cand.layers.clone(),
                weights: cand.resolved_weights(),
                ratio: space.ratios[r],
                score: scores[i],
                samples_scored: counts[i],
            }
        })
        .collect();
    let (set, r) = space.pair(best);
    Ok(ClassOutcome {
        profile: space.layer_sets[set].profile(category, space.ratios[r])?,
        score: scores[best],
        best_entry: best,
        entries,
    })
}

/// Calibrates every category that has samples. Categories without samples
/// take the default category's result, or the matching `fallback` profile
/// when the default category has no samples either.
pub fn calibrate_all(
    samples: &[CalSample],
    space: &CandidateSpace,
    cfg: &CalibrationConfig,
    scorer: &mut dyn Scorer,
    fallback: Option<&ProfileTable>,
) -> Result<(ProfileTable, CalibrationReport)> {
    let mut by_class: Vec<Vec<&CalSample>> = (0..NUM_CATEGORIES).map(|_| Vec::new()).collect();
    for s in samples {
        by_class[s.category.index()].push(s);
    }
    let mut outcomes: Vec<Option<ClassOutcome>> = Vec::with_capacity(NUM_CATEGORIES);
    for c in CategoryId::all() {
        let group = &by_class[c.index()];
        outcomes.push(if group.is_empty() {
            None
        } else {
            Some(calibrate_class(c, group, space, cfg, scorer)?)
        });
    }

    let mut grid = Vec::new();
    let mut profiles = Vec::with_capacity(NUM_CATEGORIES);
    let mut classes = Vec::with_capacity(NUM_CATEGORIES);
    let default = outcomes[CategoryId::DEFAULT.index()].as_ref();
    for (c, outcome) in CategoryId::all().zip(&outcomes) {
        let (profile, score, best_entry, inherited_from) = match outcome {
            Some(o) => {
                let offset = grid.len();
                grid.extend(o.entries.iter().cloned());
                (o.profile.clone(), Some(o.score), Some(offset + o.best_entry), None)
            }
            None => match (default, fallback) {
                (Some(d), _) => {
                    (ClassProfile { category: c, ..d.profile.clone() }, None, None, Some(CategoryId::DEFAULT))
                }
                (None, Some(table)) => (table.get(c).clone(), None, None, Some(c)),
                (None, None) => return Err(Error::NoSamples(c.get())),
            },
        };
        let (layers, weights) = profile_layers(&profile);
        classes.push(ClassReport {
            category: c,
            samples: by_class[c.index()].len(),
            layers,
            weights,
            ratio: profile.split_ratio,
            score,
            best_entry,
            inherited_from,
        });
        profiles.push(profile);
    }
    let report = CalibrationReport {
        scorer: scorer.name(),
        candidates_per_class: space.len(),
        classes,
        grid,
    };
    Ok((ProfileTable::new(profiles)?, report))
}

fn profile_layers(p: &ClassProfile) -> (Vec<u32>, Vec<f64>) {
    let layers: Vec<u32> = p.mode.support().collect();
    let weights = p.dense_vector(&layers);
    (layers, weights)
}

impl CalibrationReport {
    /// Entries scored for `category`, in grid order.
    pub fn entries_for(&self, category: CategoryId) -> impl Iterator<Item = (usize, &GridEntry)> + '_ {
        self.grid.iter().enumerate().filter(move |(_, e)| e.category == category)
    }

    pub fn to_summary(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            let score = c.score.map_or_else(|| "inherited".to_string(), |s| format!("{s:.4}"));
            out.push_str(&format!(
                "{} {:<34} layers={:?} a={} score={}\n",
                c.category,
                c.category.name(),
                c.layers,
                c.ratio,
                score
            ));
        }
        out
    }
}
