//! Synthetic dumps with planted evidence tokens.
//!
//! Half of the evidence tokens receive extra attention from the reference
//! rows. The other half look like their background region in shallow layers
//! and point in their own direction from `planted_layer` on, so only layer
//! mixtures reaching that depth let the coverage stage see them.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vtprune_core::{CategoryId, StageSchedule};

use crate::dump::{write_raw, AttentionEntry, LayerEntry, Manifest, ProjectionEntry, RawDump};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    /// Patch grid side; the dump has `grid * grid` tokens.
    pub grid: usize,
    pub d_v: usize,
    pub layer_ids: Vec<u32>,
    pub stage_layers: Vec<u32>,
    pub reference_rows: usize,
    pub evidence: usize,
    /// Fixed category for every sample; `None` cycles through all nine.
    pub category: Option<CategoryId>,
    /// Write the category into the manifest as a gold label.
    pub label: bool,
    pub planted_layer: Option<u32>,
    pub with_cls: bool,
    pub projection_dim: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            grid: 24,
            d_v: 32,
            layer_ids: vec![3, 5, 12, 14, 15, 17, 18, 19, 20, 22],
            stage_layers: StageSchedule::DEFAULT_LAYERS.to_vec(),
            reference_rows: 4,
            evidence: 24,
            category: None,
            label: true,
            planted_layer: None,
            with_cls: false,
            projection_dim: None,
        }
    }
}

const PROMPTS: [&str; 9] = [
    "What is this object?",
    "What breed is the dog?",
    "Who wrote the text on this sign?",
    "What is the weather like in this scene?",
    "What is to the left of the lamp?",
    "How many birds are in the picture?",
    "What is the child holding?",
    "What is this tool used for?",
    "Describe the image.",
];

/// A prompt the shipped rules route to `c`.
pub fn prompt_for(c: CategoryId) -> &'static str {
    PROMPTS[c.index()]
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = normal_vec(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

pub fn generate(cfg: &SynthConfig, index: usize) -> RawDump {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let side = cfg.grid.max(1);
    let m = side * side;
    let d = cfg.d_v.max(1);
    let category = cfg.category.unwrap_or_else(|| CategoryId::new((index % 9) as u32).expect("in range"));

    let mut evidence: Vec<usize> = sample(&mut rng, m, cfg.evidence.min(m)).into_vec();
    evidence.sort_unstable();
    let mut shuffled = evidence.clone();
    shuffled.sort_by_key(|&t| (t * 2_654_435_761) % 1_000_003);
    let (salient, distinct) = shuffled.split_at(shuffled.len() / 2);

    let regions: Vec<Vec<f64>> = (0..4).map(|_| unit_vec(&mut rng, d)).collect();
    let region_of = |t: usize| 2 * usize::from(t / side >= side / 2) + usize::from(t % side >= side / 2);
    let shared: Vec<Vec<f64>> = (0..m).map(|_| normal_vec(&mut rng, d)).collect();
    let own: Vec<Vec<f64>> = (0..m).map(|_| unit_vec(&mut rng, d)).collect();
    let planted = cfg.planted_layer.unwrap_or_else(|| cfg.layer_ids[cfg.layer_ids.len() / 2]);

    let mut layers = Vec::with_capacity(cfg.layer_ids.len());
    let mut entries = Vec::with_capacity(cfg.layer_ids.len());
    for &id in &cfg.layer_ids {
        let mut data = Vec::with_capacity((m + usize::from(cfg.with_cls)) * d);
        let mut rows = Vec::with_capacity(m);
        for t in 0..m {
            let noise = normal_vec(&mut rng, d);
            let row: Vec<f64> = if distinct.contains(&t) && id >= planted {
                own[t].iter().zip(&noise).map(|(o, n)| o + 0.1 * n).collect()
            } else {
                let r = &regions[region_of(t)];
                (0..d).map(|j| r[j] + 0.35 * shared[t][j] + 0.25 * noise[j]).collect()
            };
            rows.push(row);
        }
        if cfg.with_cls {
            data.extend((0..d).map(|j| (rows.iter().map(|r| r[j]).sum::<f64>() / m as f64) as f32));
        }
        data.extend(rows.iter().flatten().map(|&v| v as f32));
        layers.push(data);
        entries.push(LayerEntry {
            layer_id: id,
            tokens: m + usize::from(cfg.with_cls),
            grid: Some([side, side]),
            d_v: d,
            has_cls: cfg.with_cls,
            file: format!("layer_{id:02}.f32"),
        });
    }

    // column 0 is a non-visual sink; the class token, if any, is row/token 0
    let cls = usize::from(cfg.with_cls);
    let cols = m + 1 + cls;
    let mut attention = Vec::with_capacity(cfg.stage_layers.len());
    let mut attn_entries = Vec::with_capacity(cfg.stage_layers.len());
    for &tag in &cfg.stage_layers {
        let rows = cfg.reference_rows.max(1);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let mut logits = Vec::with_capacity(cols);
            logits.push(2.0);
            if cfg.with_cls {
                logits.push(1.0);
            }
            for t in 0..m {
                let boost = if salient.contains(&t) { 2.5 } else { 0.0 };
                logits.push(boost + 0.6 * rng.sample::<f64, _>(StandardNormal));
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| (e / z) as f32));
        }
        attention.push(data);
        attn_entries.push(AttentionEntry {
            stage_layer: tag,
            rows,
            cols,
            reference_rows: (0..rows).collect(),
            visual_cols: (0..m + cls).map(|t| [t + 1, t]).collect(),
            file: format!("attn_{tag:02}.f32"),
        });
    }

    let (projection, proj_entry) = match cfg.projection_dim {
        Some(out) => {
            let scale = 1.0 / (d as f64).sqrt();
            let data = (0..d * out).map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
            (Some(data), Some(ProjectionEntry { d_v: d, d: out, file: "proj.f32".into() }))
        }
        None => (None, None),
    };

    let manifest = Manifest {
        sample_id: format!("synth-{index:04}"),
        prompt: prompt_for(category).to_string(),
        category: cfg.label.then(|| u32::from(category.get())),
        num_layers: entries.len(),
        layers: entries,
        attention: attn_entries,
        projection: proj_entry,
        evidence: Some(evidence.iter().map(|t| t + cls).collect()),
    };
    RawDump { manifest, layers, attention, projection }
}

/// Writes `count` samples as `dir/synth-NNNN/`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, count: usize) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let dump = generate(cfg, i);
            let path = dir.join(&dump.manifest.sample_id);
            write_raw(&path, &dump)?;
            Ok(path)
        })
        .collect()
}
