//! Attention matrices and reference-set saliency of visual tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{IndexSet, TokenMatrix};

/// Allowed deviation of an attention row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-4;

/// Head-averaged, row-stochastic attention for one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    matrix: TokenMatrix,
    reference_rows: IndexSet,
    visual_cols: Vec<(usize, usize)>,
    col_of: BTreeMap<usize, usize>,
    stage_layer: u32,
}

impl AttentionRecord {
    /// `visual_cols` maps matrix columns to visual token indices.
    pub fn new(
        matrix: TokenMatrix,
        reference_rows: IndexSet,
        visual_cols: Vec<(usize, usize)>,
        stage_layer: u32,
    ) -> Result<Self> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidAttention(msg));
        if reference_rows.is_empty() {
            return bad("reference set is empty".into());
        }
        if let Some(r) = reference_rows.max().filter(|&r| r >= matrix.rows()) {
            return bad(format!("reference row {r} outside {} rows", matrix.rows()));
        }
        for (i, row) in matrix.iter_rows().enumerate() {
            if row.iter().any(|&v| v < 0.0) {
                return bad(format!("row {i} has a negative entry"));
            }
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return bad(format!("row {i} sums to {sum}"));
            }
        }
        let mut col_of = BTreeMap::new();
        let mut seen_cols = BTreeMap::new();
        for &(col, token) in &visual_cols {
            if col >= matrix.cols() {
                return bad(format!("visual column {col} outside {} columns", matrix.cols()));
            }
            if seen_cols.insert(col, ()).is_some() {
                return bad(format!("column {col} mapped twice"));
            }
            if col_of.insert(token, col).is_some() {
                return bad(format!("token {token} mapped twice"));
            }
        }
        Ok(AttentionRecord { matrix, reference_rows, visual_cols, col_of, stage_layer })
    }

    /// Record whose columns are the visual tokens `0..cols` in order.
    pub fn with_identity_cols(
        matrix: TokenMatrix,
        reference_rows: IndexSet,
        stage_layer: u32,
    ) -> Result<Self> {
        let cols = (0..matrix.cols()).map(|c| (c, c)).collect();
        AttentionRecord::new(matrix, reference_rows, cols, stage_layer)
    }

    pub fn matrix(&self) -> &TokenMatrix {
        &self.matrix
    }

    pub fn reference_rows(&self) -> &IndexSet {
        &self.reference_rows
    }

    pub fn visual_cols(&self) -> &[(usize, usize)] {
        &self.visual_cols
    }

    pub fn stage_layer(&self) -> u32 {
        self.stage_layer
    }

    pub fn column_of(&self, token: usize) -> Option<usize> {
        self.col_of.get(&token).copied()
    }
}

/// Per-token saliency, aligned with `tokens` (sorted ascending).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub tokens: IndexSet,
    pub values: Vec<f64>,
}

impl SaliencyScores {
    pub fn new(tokens: IndexSet, values: Vec<f64>) -> Result<Self> {
        if tokens.len() != values.len() {
            return Err(Error::DimMismatch { expected: tokens.len(), actual: values.len() });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteScore);
        }
        Ok(SaliencyScores { tokens, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, token: usize) -> Option<f64> {
        self.tokens.position(token).map(|p| self.values[p])
    }
}

/// Row-wise `softmax(Q K^T / sqrt(d_k))`.
pub fn attention_from_qk(q: &TokenMatrix, k: &TokenMatrix) -> Result<TokenMatrix> {
    if q.cols() != k.cols() {
        return Err(Error::DimMismatch { expected: q.cols(), actual: k.cols() });
    }
    if q.cols() == 0 {
        return Err(Error::ShapeMismatch("key dimension must be at least 1".into()));
    }
    let scale = 1.0 / math::sqrt(q.cols() as f64);
    let mut data = Vec::with_capacity(q.rows() * k.rows());
    let mut logits = alloc::vec![0.0f64; k.rows()];
    for qi in q.iter_rows() {
        for (l, kj) in logits.iter_mut().zip(k.iter_rows()) {
            *l = math::dot(qi, kj) * scale;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| math::exp(l - max)).sum();
        data.extend(logits.iter().map(|l| (math::exp(l - max) / total) as f32));
    }
    TokenMatrix::new(q.rows(), k.rows(), data)
}

/// Mean attention each surviving token receives from the reference rows.
/// Scores are absolute; they are not renormalized over the survivors.
pub fn saliency(rec: &AttentionRecord, survivors: &IndexSet) -> Result<SaliencyScores> {
    let cols = survivors
        .iter()
        .map(|t| rec.column_of(t).ok_or(Error::UnknownToken(t)))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / rec.reference_rows.len() as f64;
    let values = cols
        .iter()
        .map(|&c| {
            let sum: f64 =
                rec.reference_rows.iter().map(|r| f64::from(rec.matrix.get(r, c))).sum();
            sum * inv
        })
        .collect();
    SaliencyScores::new(survivors.clone(), values)
}
