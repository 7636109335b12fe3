//! Dense token matrices, layer stacks and index sets.
//!
//! Everything is stored row-major as 32-bit floats. Reductions (norms, dot
//! products) accumulate in f64.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Rows with a norm at or below this are rejected by [`l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Tolerance on the norm of rows of a [`UnitFeatureMatrix`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Spatial shape of a token sequence laid out as a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub const fn new(height: usize, width: usize) -> Self {
        Grid { height, width }
    }

    pub const fn tokens(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// An `rows x cols` matrix of finite f32 values, optionally tagged with the
/// spatial grid its rows were flattened from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    grid: Option<Grid>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength { rows, cols, actual: data.len() });
        }
        if let Some(offset) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { offset });
        }
        Ok(TokenMatrix { rows, cols, data, grid: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        TokenMatrix { rows, cols, data: alloc::vec![0.0; rows * cols], grid: None }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch { expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        TokenMatrix::new(rows.len(), cols, data)
    }

    pub fn with_grid(mut self, grid: Grid) -> Result<Self> {
        if grid.tokens() != self.rows {
            return Err(Error::InvalidGrid {
                height: grid.height,
                width: grid.width,
                tokens: self.rows,
            });
        }
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn without_grid(mut self) -> Self {
        self.grid = None;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn grid(&self) -> Option<Grid> {
        self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact(0) panics, so a zero-width matrix yields empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gathers the given rows, in order, into a new matrix (grid dropped).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidIndexSet { bound: self.rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(TokenMatrix { rows: indices.len(), cols: self.cols, data, grid: None })
    }

    pub(crate) fn from_parts_unchecked(
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        grid: Option<Grid>,
    ) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        TokenMatrix { rows, cols, data, grid }
    }
}

/// A matrix whose rows all have unit Euclidean norm (within 1e-6).
#[derive(Clone, Debug, PartialEq)]
pub struct UnitFeatureMatrix(TokenMatrix);

impl UnitFeatureMatrix {
    /// Accepts a matrix that is already row-normalized.
    pub fn try_from_matrix(m: TokenMatrix) -> Result<Self> {
        for (i, r) in m.iter_rows().enumerate() {
            if (math::norm_f32(r) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::ZeroNormRow { index: i });
            }
        }
        Ok(UnitFeatureMatrix(m))
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }

    pub fn as_matrix(&self) -> &TokenMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> TokenMatrix {
        self.0
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        self.0.select_rows(indices).map(UnitFeatureMatrix)
    }
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize_rows(m: &TokenMatrix) -> Result<UnitFeatureMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (i, r) in m.iter_rows().enumerate() {
        let n = math::norm_f32(r);
        if n <= MIN_ROW_NORM {
            return Err(Error::ZeroNormRow { index: i });
        }
        data.extend(r.iter().map(|&v| (f64::from(v) / n) as f32));
    }
    Ok(UnitFeatureMatrix(TokenMatrix::from_parts_unchecked(m.rows, m.cols, data, m.grid)))
}

/// Cosine similarity of two unit rows, clamped to [-1, 1].
///
/// Inputs are assumed to be unit-norm; only their lengths are checked.
pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch { expected: u.len(), actual: v.len() });
    }
    Ok(math::dot(u, v).clamp(-1.0, 1.0))
}

/// Strictly increasing set of token indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new() -> Self {
        IndexSet(Vec::new())
    }

    /// Wraps an already sorted, duplicate-free vector.
    pub fn from_sorted(v: Vec<usize>) -> Result<Self> {
        if v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidIndexSet { bound: usize::MAX });
        }
        Ok(IndexSet(v))
    }

    /// Sorts and deduplicates arbitrary indices.
    pub fn from_unsorted<I: IntoIterator<Item = usize>>(it: I) -> Self {
        let mut v: Vec<usize> = it.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        IndexSet(v)
    }

    /// `0..n`.
    pub fn full(n: usize) -> Self {
        IndexSet((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    /// Position of `i` within the set.
    pub fn position(&self, i: usize) -> Option<usize> {
        self.0.binary_search(&i).ok()
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }

    /// Errors unless every index is below `bound`.
    pub fn check_bound(&self, bound: usize) -> Result<()> {
        match self.max() {
            Some(m) if m >= bound => Err(Error::InvalidIndexSet { bound }),
            _ => Ok(()),
        }
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        IndexSet::from_unsorted(self.iter().chain(other.iter()))
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        self.iter().filter(|&i| other.contains(i)).count()
    }

    pub fn difference(&self, other: &IndexSet) -> IndexSet {
        IndexSet(self.iter().filter(|&i| !other.contains(i)).collect())
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.iter().all(|i| other.contains(i))
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl TryFrom<Vec<usize>> for IndexSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        IndexSet::from_sorted(v)
    }
}

impl From<IndexSet> for Vec<usize> {
    fn from(s: IndexSet) -> Self {
        s.0
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        IndexSet::from_unsorted(iter)
    }
}

/// Per-layer token features of one sample.
///
/// Fields are public so that malformed stacks can be described and then
/// checked with [`validate_stack`]; [`LayerStack::new`] only returns valid
/// stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<TokenMatrix>,
    /// Vision-encoder layer index of each entry in `layers`.
    pub layer_ids: Vec<u32>,
    pub d_v: usize,
}

impl LayerStack {
    pub fn new(layers: Vec<TokenMatrix>, layer_ids: Vec<u32>) -> Result<Self> {
        let d_v = layers.first().map_or(0, TokenMatrix::cols);
        let stack = LayerStack { layers, layer_ids, d_v };
        let report = validate_stack(&stack);
        match report.violations.first() {
            None => Ok(stack),
            Some(v) => Err(Error::InvalidStack(format!("{v}"))),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Token count when all layers agree.
    pub fn aligned_tokens(&self) -> Option<usize> {
        let first = self.layers.first()?.rows();
        self.layers.iter().all(|l| l.rows() == first).then_some(first)
    }

    pub fn position_of(&self, layer_id: u32) -> Option<usize> {
        self.layer_ids.iter().position(|&l| l == layer_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Empty,
    IdCountMismatch { layers: usize, ids: usize },
    FeatureDim { layer: usize, expected: usize, actual: usize },
    LayerIdsNotIncreasing { position: usize },
    TokenCountMismatch { layer: usize, expected: usize, actual: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "stack has no layers"),
            Violation::IdCountMismatch { layers, ids } => {
                write!(f, "{layers} layers but {ids} layer ids")
            }
            Violation::FeatureDim { layer, expected, actual } => {
                write!(f, "layer {layer} has feature dim {actual}, expected {expected}")
            }
            Violation::LayerIdsNotIncreasing { position } => {
                write!(f, "layer ids not strictly increasing at position {position}")
            }
            Violation::TokenCountMismatch { layer, expected, actual } => write!(
                f,
                "layer {layer} has {actual} tokens, expected {expected} (no grid to align by)"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every broken [`LayerStack`] invariant.
pub fn validate_stack(s: &LayerStack) -> ValidationReport {
    let mut violations = Vec::new();
    if s.layers.is_empty() {
        violations.push(Violation::Empty);
    }
    if s.layers.len() != s.layer_ids.len() {
        violations.push(Violation::IdCountMismatch {
            layers: s.layers.len(),
            ids: s.layer_ids.len(),
        });
    }
    for (i, l) in s.layers.iter().enumerate() {
        if l.cols() != s.d_v {
            violations.push(Violation::FeatureDim { layer: i, expected: s.d_v, actual: l.cols() });
        }
    }
    for (i, w) in s.layer_ids.windows(2).enumerate() {
        if w[0] >= w[1] {
            violations.push(Violation::LayerIdsNotIncreasing { position: i + 1 });
        }
    }
    if let Some(first) = s.layers.first() {
        let all_gridded = s.layers.iter().all(|l| l.grid().is_some());
        if !all_gridded {
            for (i, l) in s.layers.iter().enumerate().skip(1) {
                if l.rows() != first.rows() {
                    violations.push(Violation::TokenCountMismatch {
                        layer: i,
                        expected: first.rows(),
                        actual: l.rows(),
                    });
                }
            }
        }
    }
    ValidationReport { violations }
}
