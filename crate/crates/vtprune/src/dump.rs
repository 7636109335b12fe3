//! Token dumps: a JSON manifest next to headerless little-endian f32 tensors.
//!
//! ```text
//! sample/
//!   manifest.json
//!   layer_05.f32      tokens x d_v, row-major
//!   attn_02.f32       rows x cols, row-major
//! ```
//!
//! Tensor paths in the manifest are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vtprune_core::calibration::CalSample;
use vtprune_core::{
    align_stack, validate_stack, AttentionRecord, CategoryId, Grid, IndexSet, LayerStack,
    Projection, TokenMatrix, UpsampleMode,
};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sample_id: String,
    pub prompt: String,
    /// Gold label; overrides the router when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<u32>,
    pub num_layers: usize,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention: Vec<AttentionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<ProjectionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub layer_id: u32,
    /// Rows in the tensor, including the class token when `has_cls` is set.
    pub tokens: usize,
    /// `[height, width]` of the patch grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    pub d_v: usize,
    /// Row 0 is a class token rather than a patch.
    #[serde(default, skip_serializing_if = "is_false")]
    pub has_cls: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionEntry {
    pub stage_layer: u32,
    pub rows: usize,
    pub cols: usize,
    pub reference_rows: Vec<usize>,
    /// `[column, visual token]` pairs.
    pub visual_cols: Vec<[usize; 2]>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionEntry {
    pub d_v: usize,
    pub d: usize,
    pub file: String,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// What to do with a leading class token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClsPolicy {
    /// Remove it; tokens are the grid patches only.
    #[default]
    Drop,
    /// Keep it as token 0. Patch grids are aligned first and the class
    /// tokens are fused alongside them.
    Keep,
}

/// A manifest with its tensors, exactly as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDump {
    pub manifest: Manifest,
    pub layers: Vec<Vec<f32>>,
    pub attention: Vec<Vec<f32>>,
    pub projection: Option<Vec<f32>>,
}

/// A validated sample ready for fusion and pruning.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sample_id: String,
    pub prompt: String,
    pub category: Option<CategoryId>,
    pub stack: LayerStack,
    pub records: Vec<AttentionRecord>,
    pub projection: Projection,
    pub evidence: Option<IndexSet>,
}

impl Sample {
    pub fn into_cal_sample(self, category: CategoryId) -> CalSample {
        CalSample {
            id: self.sample_id,
            prompt: self.prompt,
            category,
            stack: self.stack,
            records: self.records,
            projection: self.projection,
            evidence: self.evidence.unwrap_or_default(),
        }
    }
}

/// Resolves a dump directory or a manifest path to the manifest path.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn is_dump(path: &Path) -> bool {
    manifest_path(path).is_file()
}

pub fn manifest_to_string(m: &Manifest) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn read_tensor(file: &Path, rows: usize, cols: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
    let expected = (rows * cols * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::TensorSizeMismatch { file: file.to_path_buf(), expected, actual: bytes.len() as u64 });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_tensor(file: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(file, bytes).map_err(|e| Error::io(file, e))
}

/// Reads a manifest and every tensor it names, checking file sizes.
pub fn read_raw(path: &Path) -> Result<RawDump> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::ManifestParse { path: mpath.clone(), reason: e.to_string() })?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let layers = manifest
        .layers
        .iter()
        .map(|l| read_tensor(&dir.join(&l.file), l.tokens, l.d_v))
        .collect::<Result<_>>()?;
    let attention = manifest
        .attention
        .iter()
        .map(|a| read_tensor(&dir.join(&a.file), a.rows, a.cols))
        .collect::<Result<_>>()?;
    let projection = match &manifest.projection {
        Some(p) => Some(read_tensor(&dir.join(&p.file), p.d_v, p.d)?),
        None => None,
    };
    Ok(RawDump { manifest, layers, attention, projection })
}

/// Writes the manifest and tensors under `dir`, creating it if needed.
pub fn write_raw(dir: &Path, dump: &RawDump) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &dump.manifest;
    if m.layers.len() != dump.layers.len() || m.attention.len() != dump.attention.len() {
        return Err(Error::ShapeInconsistency("manifest entries and tensors differ in count".into()));
    }
    for (entry, data) in m.layers.iter().zip(&dump.layers) {
        write_tensor(&dir.join(&entry.file), data)?;
    }
    for (entry, data) in m.attention.iter().zip(&dump.attention) {
        write_tensor(&dir.join(&entry.file), data)?;
    }
    if let (Some(entry), Some(data)) = (&m.projection, &dump.projection) {
        write_tensor(&dir.join(&entry.file), data)?;
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest_to_string(m)).map_err(|e| Error::io(&mpath, e))
}

pub fn load_dump(path: &Path, cls: ClsPolicy) -> Result<Sample> {
    read_raw(path)?.into_sample(cls, UpsampleMode::default())
}

/// Dump directories directly under `dir`, sorted by path.
pub fn list_dumps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() && is_dump(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn inconsistent<T>(msg: String) -> Result<T> {
    Err(Error::ShapeInconsistency(msg))
}

impl RawDump {
    /// Validates shapes and builds the in-memory sample.
    pub fn into_sample(self, cls: ClsPolicy, upsample: UpsampleMode) -> Result<Sample> {
        let m = self.manifest;
        if m.num_layers != m.layers.len() {
            return inconsistent(format!("num_layers is {} but {} layers are listed", m.num_layers, m.layers.len()));
        }
        if m.layers.is_empty() {
            return inconsistent("no layers".into());
        }
        let any_cls = m.layers.iter().any(|l| l.has_cls);
        if cls == ClsPolicy::Keep && any_cls && !m.layers.iter().all(|l| l.has_cls) {
            return inconsistent("class token present in some layers only".into());
        }

        let mut cls_rows = Vec::new();
        let mut patches = Vec::with_capacity(m.layers.len());
        for (entry, data) in m.layers.iter().zip(self.layers) {
            let patch_tokens = entry.tokens.checked_sub(usize::from(entry.has_cls));
            let Some(patch_tokens) = patch_tokens.filter(|&n| n > 0) else {
                return inconsistent(format!("layer {} has no patch tokens", entry.layer_id));
            };
            if let Some([h, w]) = entry.grid {
                if h * w != patch_tokens {
                    return inconsistent(format!(
                        "layer {}: grid {h}x{w} does not match {patch_tokens} patch tokens",
                        entry.layer_id
                    ));
                }
            }
            let (cls_row, patch) = if entry.has_cls {
                (Some(data[..entry.d_v].to_vec()), data[entry.d_v..].to_vec())
            } else {
                (None, data)
            };
            let mut mat = TokenMatrix::new(patch_tokens, entry.d_v, patch)?;
            if let Some([h, w]) = entry.grid {
                mat = mat.with_grid(Grid::new(h, w))?;
            }
            cls_rows.extend(cls_row);
            patches.push(mat);
        }

        let layer_ids: Vec<u32> = m.layers.iter().map(|l| l.layer_id).collect();
        let unchecked = LayerStack { layers: patches, layer_ids, d_v: m.layers[0].d_v };
        let report = validate_stack(&unchecked);
        if let Some(v) = report.violations.first() {
            return inconsistent(v.to_string());
        }
        let stack = if cls == ClsPolicy::Keep && any_cls {
            prepend_cls(unchecked, cls_rows, upsample)?
        } else {
            unchecked
        };
        let tokens = stack.aligned_tokens();
        // manifest token indices count tensor rows, class token included
        let shift = usize::from(any_cls && cls == ClsPolicy::Drop);

        let records = m
            .attention
            .iter()
            .zip(self.attention)
            .map(|(entry, data)| build_record(entry, data, tokens, shift))
            .collect::<Result<Vec<_>>>()?;

        let projection = match (&m.projection, self.projection) {
            (Some(p), Some(data)) => {
                if p.d_v != stack.d_v {
                    return inconsistent(format!("projection expects d_v {}, layers have {}", p.d_v, stack.d_v));
                }
                Projection::Linear(TokenMatrix::new(p.d_v, p.d, data)?)
            }
            _ => Projection::Identity,
        };

        let evidence = match m.evidence {
            Some(ev) => {
                let set = IndexSet::from_unsorted(ev.iter().filter_map(|t| t.checked_sub(shift)));
                if set.len() + ev.iter().filter(|&&t| t < shift).count() != ev.len() {
                    return inconsistent("evidence lists a token twice".into());
                }
                if let (Some(max), Some(n)) = (set.max(), tokens) {
                    if max >= n {
                        return inconsistent(format!("evidence token {max} outside {n} tokens"));
                    }
                }
                Some(set)
            }
            None => None,
        };

        let category = m.category.map(CategoryId::new).transpose()?;
        Ok(Sample { sample_id: m.sample_id, prompt: m.prompt, category, stack, records, projection, evidence })
    }
}

fn prepend_cls(stack: LayerStack, cls_rows: Vec<Vec<f32>>, upsample: UpsampleMode) -> Result<LayerStack> {
    let grids: Vec<_> = stack.layers.iter().map(TokenMatrix::grid).collect();
    let stack = match grids.last().copied().flatten() {
        Some(target) if grids.iter().any(|g| *g != Some(target)) => align_stack(&stack, target, upsample)?,
        _ => stack,
    };
    let layers = stack
        .layers
        .iter()
        .zip(cls_rows)
        .map(|(patch, cls)| {
            let mut data = cls;
            data.extend_from_slice(patch.data());
            TokenMatrix::new(patch.rows() + 1, patch.cols(), data)
        })
        .collect::<vtprune_core::Result<Vec<_>>>()?;
    Ok(LayerStack::new(layers, stack.layer_ids)?)
}

fn build_record(entry: &AttentionEntry, data: Vec<f32>, tokens: Option<usize>, shift: usize) -> Result<AttentionRecord> {
    let tag = entry.stage_layer;
    if entry.reference_rows.windows(2).any(|w| w[0] >= w[1]) {
        return inconsistent(format!("attention {tag}: reference_rows must be strictly increasing"));
    }
    if let Some(r) = entry.reference_rows.iter().find(|&&r| r >= entry.rows) {
        return inconsistent(format!("attention {tag}: reference row {r} outside {} rows", entry.rows));
    }
    let mut cols = BTreeSet::new();
    let mut toks = BTreeSet::new();
    for &[c, t] in &entry.visual_cols {
        if c >= entry.cols {
            return inconsistent(format!("attention {tag}: column {c} outside {} columns", entry.cols));
        }
        if !cols.insert(c) || !toks.insert(t) {
            return inconsistent(format!("attention {tag}: visual_cols are not unique"));
        }
        if let Some(n) = tokens.filter(|&n| t >= n + shift) {
            return inconsistent(format!("attention {tag}: token {t} outside {} tokens", n + shift));
        }
    }
    let matrix = TokenMatrix::new(entry.rows, entry.cols, data)?;
    let refs = IndexSet::from_sorted(entry.reference_rows.clone())?;
    let pairs = entry
        .visual_cols
        .iter()
        .filter(|&&[_, t]| t >= shift)
        .map(|&[c, t]| (c, t - shift))
        .collect();
    Ok(AttentionRecord::new(matrix, refs, pairs, tag)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RawDump {
        RawDump {
            manifest: Manifest {
                sample_id: "tiny".into(),
                prompt: "what is this".into(),
                category: None,
                num_layers: 1,
                layers: vec![LayerEntry {
                    layer_id: 1,
                    tokens: 4,
                    grid: Some([2, 2]),
                    d_v: 2,
                    has_cls: false,
                    file: "layer_01.f32".into(),
                }],
                attention: vec![AttentionEntry {
                    stage_layer: 2,
                    rows: 1,
                    cols: 4,
                    reference_rows: vec![0],
                    visual_cols: (0..4).map(|i| [i, i]).collect(),
                    file: "attn_02.f32".into(),
                }],
                projection: None,
                evidence: Some(vec![1]),
            },
            layers: vec![vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5]],
            attention: vec![vec![0.25; 4]],
            projection: None,
        }
    }

    #[test]
    fn minimal_dump_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), &tiny()).unwrap();
        let s = load_dump(dir.path(), ClsPolicy::Drop).unwrap();
        assert_eq!(s.stack.layers.len(), 1);
        assert_eq!((s.stack.layers[0].rows(), s.stack.layers[0].cols()), (4, 2));
        assert_eq!(s.stack.layers[0].grid(), Some(Grid::new(2, 2)));
        assert_eq!(s.records.len(), 1);
        assert_eq!(s.evidence.unwrap().as_slice(), &[1]);
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), &tiny()).unwrap();
        let f = dir.path().join("layer_01.f32");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
        match load_dump(dir.path(), ClsPolicy::Drop) {
            Err(Error::TensorSizeMismatch { expected: 32, actual: 28, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_errors() {
        let mut d = tiny();
        d.manifest.num_layers = 2;
        assert!(matches!(d.into_sample(ClsPolicy::Drop, UpsampleMode::Bilinear), Err(Error::ShapeInconsistency(_))));

        let mut d = tiny();
        d.manifest.layers[0].grid = Some([3, 2]);
        assert!(matches!(d.into_sample(ClsPolicy::Drop, UpsampleMode::Bilinear), Err(Error::ShapeInconsistency(_))));

        let mut d = tiny();
        d.manifest.attention[0].visual_cols[1] = [1, 0];
        assert!(matches!(d.into_sample(ClsPolicy::Drop, UpsampleMode::Bilinear), Err(Error::ShapeInconsistency(_))));

        let mut d = tiny();
        d.manifest.attention[0].reference_rows = vec![1];
        assert!(matches!(d.into_sample(ClsPolicy::Drop, UpsampleMode::Bilinear), Err(Error::ShapeInconsistency(_))));

        let mut d = tiny();
        d.manifest.evidence = Some(vec![4]);
        assert!(matches!(d.into_sample(ClsPolicy::Drop, UpsampleMode::Bilinear), Err(Error::ShapeInconsistency(_))));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"sample_id\": 3}").unwrap();
        assert!(matches!(load_dump(dir.path(), ClsPolicy::Drop), Err(Error::ManifestParse { .. })));
    }

    #[test]
    fn class_token_policies() {
        let mut d = tiny();
        d.manifest.layers[0].has_cls = true;
        d.manifest.layers[0].tokens = 5;
        d.layers[0].splice(0..0, [9.0, 9.0]);
        d.manifest.attention[0].visual_cols = (0..4).map(|i| [i, i + 1]).collect();
        d.manifest.evidence = Some(vec![2]);
        let dropped = d.clone().into_sample(ClsPolicy::Drop, UpsampleMode::Bilinear).unwrap();
        assert_eq!(dropped.stack.layers[0].rows(), 4);
        assert_eq!(dropped.stack.layers[0].row(0), &[1.0, 0.0]);
        assert_eq!(dropped.records[0].column_of(0), Some(0));
        assert_eq!(dropped.evidence.as_ref().unwrap().as_slice(), &[1]);
        let kept = d.into_sample(ClsPolicy::Keep, UpsampleMode::Bilinear).unwrap();
        assert_eq!(kept.stack.layers[0].rows(), 5);
        assert_eq!(kept.stack.layers[0].row(0), &[9.0, 9.0]);
        assert_eq!(kept.stack.layers[0].grid(), None);
        assert_eq!(kept.records[0].column_of(1), Some(0));
        assert_eq!(kept.evidence.unwrap().as_slice(), &[2]);
    }

    #[test]
    fn kept_class_tokens_ride_along_with_alignment() {
        let mut d = tiny();
        d.manifest.num_layers = 2;
        for e in &mut d.manifest.layers {
            e.has_cls = true;
            e.tokens = 5;
        }
        d.manifest.layers.push(LayerEntry {
            layer_id: 2,
            tokens: 2,
            grid: Some([1, 1]),
            d_v: 2,
            has_cls: true,
            file: "layer_02.f32".into(),
        });
        d.layers[0].splice(0..0, [9.0, 9.0]);
        d.layers.push(vec![7.0, 7.0, 0.5, 0.5]);
        // indices address the aligned stack: class token plus one patch
        d.manifest.attention[0].visual_cols = vec![[0, 0], [1, 1]];
        let s = d.into_sample(ClsPolicy::Keep, UpsampleMode::Bilinear).unwrap();
        assert_eq!(s.stack.layers[0].rows(), 2);
        assert_eq!(s.stack.layers[0].row(0), &[9.0, 9.0]);
        assert_eq!(s.stack.layers[0].row(1), &[0.25, 0.625]);
        assert_eq!(s.stack.layers[1].row(0), &[7.0, 7.0]);
    }
}
