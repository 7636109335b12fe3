//! JSON result records for `prune`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtprune_core::{CategoryId, ClassProfile, PruneOptions, PruneTrace, SeedingMode, StageSchedule, UpsampleMode};

use crate::dump::ClsPolicy;
use crate::error::{Error, Result};
use crate::rules::CategorySource;

pub const ENGINE_VERSION: &str = concat!("vtprune ", env!("CARGO_PKG_VERSION"));

/// Everything that determines a run's output besides the dump itself.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig<'a> {
    pub engine: &'a str,
    pub profile: &'a ClassProfile,
    pub schedule: &'a StageSchedule,
    pub effective_budget: Option<usize>,
    pub options: PruneOptions,
    pub upsample: UpsampleMode,
    pub cls: ClsPolicy,
}

impl RunConfig<'_> {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub stage_layer: u32,
    pub budget: usize,
    pub retained: Vec<usize>,
    pub pivots: Vec<usize>,
    pub completion: Vec<usize>,
    pub seeding: SeedingMode,
    /// Redundancy threshold; absent without pivots or completion tokens.
    pub delta: Option<f64>,
    pub j_trace: Vec<f64>,
    pub attn_reused: bool,
    /// Stage tag of the attention record actually used.
    pub attn_source: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedOutput {
    pub sample_id: String,
    pub category: CategoryId,
    pub category_source: CategorySource,
    pub split_ratio: f64,
    pub layer_ids: Vec<u32>,
    pub mixture: Vec<f64>,
    pub effective_budget: Option<usize>,
    pub aligned: bool,
    pub stages: Vec<StageOutput>,
    pub final_retained: Vec<usize>,
    pub engine_version: String,
    pub config_digest: String,
    /// The only field that varies between identical runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

impl RetainedOutput {
    pub fn from_trace(
        sample_id: &str,
        trace: &PruneTrace,
        source: CategorySource,
        config: &RunConfig<'_>,
    ) -> Self {
        let stages = trace
            .stages
            .iter()
            .map(|s| StageOutput {
                stage_layer: s.stage_layer,
                budget: s.split.total,
                retained: s.retained.as_slice().to_vec(),
                pivots: s.pivots.as_slice().to_vec(),
                completion: s.completion.as_slice().to_vec(),
                seeding: s.seeding,
                delta: s.delta,
                j_trace: s.cluster.as_ref().map(|c| c.objective_trace.clone()).unwrap_or_default(),
                attn_reused: s.attn_reused(),
                attn_source: s.record.map(|r| r.stage_layer),
            })
            .collect();
        RetainedOutput {
            sample_id: sample_id.to_string(),
            category: trace.category,
            category_source: source,
            split_ratio: trace.split_ratio,
            layer_ids: trace.layer_ids.clone(),
            mixture: trace.mixture.as_slice().to_vec(),
            effective_budget: config.effective_budget,
            aligned: trace.aligned,
            stages,
            final_retained: trace.final_retained.as_slice().to_vec(),
            engine_version: config.engine.to_string(),
            config_digest: config.digest(),
            generated_at: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("output serializes");
        s.push('\n');
        s
    }
}

pub fn save_result(out: &RetainedOutput, path: &Path) -> Result<()> {
    fs::write(path, out.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_result(path: &Path) -> Result<RetainedOutput> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::ManifestParse { path: path.to_path_buf(), reason: e.to_string() })
}

/// Seconds since the Unix epoch, for the optional `generated_at` field.
pub fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("unix:{secs}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use vtprune_core::{AttentionRecord, IndexSet, LayerStack, Projection, TokenMatrix};

    fn trace() -> (PruneTrace, ClassProfile, StageSchedule) {
        let m = 12;
        let rows: Vec<Vec<f32>> =
            (0..m).map(|i| vec![(i as f32 * 0.7).sin(), (i as f32 * 1.3).cos(), 0.1 + i as f32 / 20.0]).collect();
        let stack = LayerStack::new(vec![TokenMatrix::from_rows(&rows).unwrap()], vec![1]).unwrap();
        let attn: Vec<f32> = (0..m).map(|i| (i + 1) as f32 / 78.0).collect();
        let rec = AttentionRecord::with_identity_cols(TokenMatrix::new(1, m, attn).unwrap(), IndexSet::full(1), 2)
            .unwrap();
        let profile = ClassProfile::weights(CategoryId::new(0).unwrap(), &[(1, 1.0)], 0.5).unwrap();
        let schedule = StageSchedule::from_budgets(&[8, 5]).unwrap();
        let t = vtprune_core::run_schedule(
            &stack,
            &[rec],
            &profile,
            &Projection::Identity,
            &schedule,
            &PruneOptions::default(),
        )
        .unwrap();
        (t, profile, schedule)
    }

    fn config<'a>(p: &'a ClassProfile, s: &'a StageSchedule) -> RunConfig<'a> {
        RunConfig {
            engine: ENGINE_VERSION,
            profile: p,
            schedule: s,
            effective_budget: None,
            options: PruneOptions::default(),
            upsample: UpsampleMode::Bilinear,
            cls: ClsPolicy::Drop,
        }
    }

    #[test]
    fn round_trip_preserves_indices_and_floats() {
        let (t, p, s) = trace();
        let out = RetainedOutput::from_trace("x", &t, CategorySource::Flag, &config(&p, &s));
        assert_eq!(out.final_retained.len(), s.final_budget());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        save_result(&out, &path).unwrap();
        let back = load_result(&path).unwrap();
        assert_eq!(back, out);
        for (a, b) in back.stages.iter().zip(&t.stages) {
            assert_eq!(a.delta.map(f64::to_bits), b.delta.map(f64::to_bits));
            let trace = &b.cluster.as_ref().unwrap().objective_trace;
            assert_eq!(a.j_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(a.retained, b.retained.as_slice());
        }
    }

    #[test]
    fn digest_tracks_config() {
        let (_, p, s) = trace();
        let a = config(&p, &s).digest();
        assert_eq!(a, config(&p, &s).digest());
        assert_eq!(a.len(), 64);
        let mut c = config(&p, &s);
        c.options.iterations = 3;
        assert_ne!(a, c.digest());
    }

    #[test]
    fn timestamp_is_optional() {
        let (t, p, s) = trace();
        let mut out = RetainedOutput::from_trace("x", &t, CategorySource::Flag, &config(&p, &s));
        assert!(!out.to_json().contains("generated_at"));
        out.generated_at = Some(timestamp());
        assert!(out.to_json().contains("generated_at"));
    }
}
