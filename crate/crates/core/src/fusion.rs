//! Category-conditioned convex fusion of multi-layer features.
//!
//! A [`ClassProfile`] turns into [`MixtureWeights`] over the layers of a
//! [`LayerStack`], either directly (normalized coefficients) or through a
//! temperature softmax over layer scores. Layers a profile does not mention
//! receive weight exactly zero.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{Grid, LayerStack, TokenMatrix};
use crate::pruner::OpCounts;
use crate::router::{CategoryId, NUM_CATEGORIES};

/// Tolerance on the simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Temperature used when a score-mode profile does not give one.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Point on the probability simplex over the layers of a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidMixture);
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidMixture);
        }
        Ok(MixtureWeights(alpha))
    }

    /// All mass on layer position `at`.
    pub fn one_hot(len: usize, at: usize) -> Self {
        let mut v = alloc::vec![0.0; len];
        v[at] = 1.0;
        MixtureWeights(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MixtureWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        MixtureWeights::new(v)
    }
}

impl From<MixtureWeights> for Vec<f64> {
    fn from(w: MixtureWeights) -> Self {
        w.0
    }
}

/// `softmax(tau * scores)`, stabilized by subtracting the maximum.
pub fn softmax_mixture(scores: &[f64], tau: f64) -> Result<MixtureWeights> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if scores.is_empty() {
        return Err(Error::InvalidMixture);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore);
    }
    let scaled: Vec<f64> = scores.iter().map(|s| tau * s).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| math::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    Ok(MixtureWeights(exps.into_iter().map(|e| e / total).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ProfileMode {
    /// Normalized coefficients keyed by layer id.
    Weights { weights: BTreeMap<u32, f64> },
    /// Unnormalized layer scores turned into weights by a temperature softmax.
    Scores {
        scores: BTreeMap<u32, f64>,
        #[serde(default = "default_tau")]
        tau: f64,
    },
}

fn default_tau() -> f64 {
    DEFAULT_TEMPERATURE
}

impl ProfileMode {
    /// Layer ids with non-zero support.
    pub fn support(&self) -> impl Iterator<Item = u32> + '_ {
        match self {
            ProfileMode::Weights { weights } => weights.keys().copied(),
            ProfileMode::Scores { scores, .. } => scores.keys().copied(),
        }
    }
}

/// Layer mixture and relevance/coverage split for one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub category: CategoryId,
    #[serde(flatten)]
    pub mode: ProfileMode,
    pub split_ratio: f64,
}

impl ClassProfile {
    pub fn weights(category: CategoryId, weights: &[(u32, f64)], split_ratio: f64) -> Result<Self> {
        let p = ClassProfile {
            category,
            mode: ProfileMode::Weights { weights: weights.iter().copied().collect() },
            split_ratio,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn scores(
        category: CategoryId,
        scores: &[(u32, f64)],
        tau: f64,
        split_ratio: f64,
    ) -> Result<Self> {
        let p = ClassProfile {
            category,
            mode: ProfileMode::Scores { scores: scores.iter().copied().collect(), tau },
            split_ratio,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason: &str| Error::InvalidProfile {
            category: self.category.get(),
            reason: reason.to_string(),
        };
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(err("split ratio outside [0, 1]"));
        }
        match &self.mode {
            ProfileMode::Weights { weights } => {
                if weights.is_empty() {
                    return Err(err("no layer weights"));
                }
                if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(err("negative or non-finite weight"));
                }
                let total: f64 = weights.values().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(err("weights do not sum to 1"));
                }
            }
            ProfileMode::Scores { scores, tau } => {
                if scores.is_empty() {
                    return Err(err("no layer scores"));
                }
                if scores.values().any(|s| !s.is_finite()) {
                    return Err(err("non-finite score"));
                }
                if !(tau.is_finite() && *tau > 0.0) {
                    return Err(err("temperature must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Mixture weights aligned with `layer_ids` (the stack's layer order).
    pub fn mixture(&self, layer_ids: &[u32]) -> Result<MixtureWeights> {
        let positions = self
            .mode
            .support()
            .map(|id| {
                layer_ids.iter().position(|&l| l == id).ok_or(Error::MissingLayer(id))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut alpha = alloc::vec![0.0; layer_ids.len()];
        match &self.mode {
            ProfileMode::Weights { weights } => {
                for (&pos, w) in positions.iter().zip(weights.values()) {
                    alpha[pos] = *w;
                }
            }
            ProfileMode::Scores { scores, tau } => {
                let s: Vec<f64> = scores.values().copied().collect();
                let sub = softmax_mixture(&s, *tau)?;
                for (&pos, w) in positions.iter().zip(sub.as_slice()) {
                    alpha[pos] = *w;
                }
            }
        }
        MixtureWeights::new(alpha)
    }

    /// Dense vector of the profile's coefficients (weights or scores) over
    /// `layer_ids`, zero where unsupported.
    pub fn dense_vector(&self, layer_ids: &[u32]) -> Vec<f64> {
        let map = match &self.mode {
            ProfileMode::Weights { weights } => weights,
            ProfileMode::Scores { scores, .. } => scores,
        };
        layer_ids.iter().map(|id| map.get(id).copied().unwrap_or(0.0)).collect()
    }
}

/// Exactly one profile per category, indexed by category id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassProfile>", into = "Vec<ClassProfile>")]
pub struct ProfileTable {
    profiles: Vec<ClassProfile>,
}

impl ProfileTable {
    pub fn new(mut profiles: Vec<ClassProfile>) -> Result<Self> {
        profiles.sort_by_key(|p| p.category);
        if profiles.len() != NUM_CATEGORIES {
            return Err(Error::InvalidProfileTable(format!(
                "expected {NUM_CATEGORIES} profiles, got {}",
                profiles.len()
            )));
        }
        for (i, p) in profiles.iter().enumerate() {
            if p.category.index() != i {
                return Err(Error::InvalidProfileTable(format!(
                    "duplicate or missing category around {i}"
                )));
            }
            p.validate()?;
        }
        Ok(ProfileTable { profiles })
    }

    pub fn get(&self, c: CategoryId) -> &ClassProfile {
        &self.profiles[c.index()]
    }

    pub fn profiles(&self) -> &[ClassProfile] {
        &self.profiles
    }

    /// Sorted union of every layer id referenced by any profile.
    pub fn layer_union(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.profiles.iter().flat_map(|p| p.mode.support()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

impl TryFrom<Vec<ClassProfile>> for ProfileTable {
    type Error = Error;

    fn try_from(v: Vec<ClassProfile>) -> Result<Self> {
        ProfileTable::new(v)
    }
}

impl From<ProfileTable> for Vec<ClassProfile> {
    fn from(t: ProfileTable) -> Self {
        t.profiles
    }
}

/// Token-wise convex combination `sum_l alpha_l * Z_l`.
pub fn fuse(stack: &LayerStack, alpha: &MixtureWeights) -> Result<TokenMatrix> {
    fuse_counted(stack, alpha, &mut OpCounts::default())
}

pub(crate) fn fuse_counted(
    stack: &LayerStack,
    alpha: &MixtureWeights,
    ops: &mut OpCounts,
) -> Result<TokenMatrix> {
    if alpha.len() != stack.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "{} mixture weights for {} layers",
            alpha.len(),
            stack.num_layers()
        )));
    }
    let m = stack.aligned_tokens().ok_or(Error::UnalignedLayers)?;
    let grid = stack.layers.iter().find_map(|l| l.grid());
    if stack.layers.iter().any(|l| l.grid().is_some() && l.grid() != grid) {
        return Err(Error::UnalignedLayers);
    }
    let d = stack.d_v;
    let mut acc = alloc::vec![0.0f64; m * d];
    for (layer, &a) in stack.layers.iter().zip(alpha.as_slice()) {
        for (dst, &v) in acc.iter_mut().zip(layer.data()) {
            *dst += a * f64::from(v);
        }
        ops.fusion_madds += (m * d) as u64;
    }
    let data = acc.into_iter().map(|v| v as f32).collect();
    Ok(TokenMatrix::from_parts_unchecked(m, d, data, grid))
}

/// Linear map from vision feature space into decoder space.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Projection {
    #[default]
    Identity,
    /// `d_v x d` matrix applied as `m * matrix`.
    Linear(TokenMatrix),
}

impl Projection {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Projection::Identity => input_dim,
            Projection::Linear(p) => p.cols(),
        }
    }
}

pub fn project(m: &TokenMatrix, p: &Projection) -> Result<TokenMatrix> {
    project_counted(m, p, &mut OpCounts::default())
}

pub(crate) fn project_counted(
    m: &TokenMatrix,
    p: &Projection,
    ops: &mut OpCounts,
) -> Result<TokenMatrix> {
    let p = match p {
        Projection::Identity => return Ok(m.clone()),
        Projection::Linear(p) => p,
    };
    if p.rows() != m.cols() {
        return Err(Error::ShapeMismatch(format!(
            "projection expects dim {}, features have {}",
            p.rows(),
            m.cols()
        )));
    }
    let (rows, inner, out) = (m.rows(), m.cols(), p.cols());
    let mut data = Vec::with_capacity(rows * out);
    let mut acc = alloc::vec![0.0f64; out];
    for i in 0..rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &x) in m.row(i).iter().enumerate() {
            let x = f64::from(x);
            for (a, &w) in acc.iter_mut().zip(p.row(k)) {
                *a += x * f64::from(w);
            }
        }
        data.extend(acc.iter().map(|&a| a as f32));
    }
    ops.projection_madds += (rows * inner * out) as u64;
    Ok(TokenMatrix::from_parts_unchecked(rows, out, data, m.grid()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Resamples a gridded token matrix onto `target`.
///
/// Equal grids are returned unchanged. Fewer source tokens than target
/// tokens upsample (bilinear or nearest, pixel-center convention). More
/// source tokens downsample by area averaging when both factors are
/// integral and by bilinear resampling otherwise.
pub fn align_layer(m: &TokenMatrix, target: Grid, mode: UpsampleMode) -> Result<TokenMatrix> {
    let src = m.grid().ok_or(Error::MissingGrid)?;
    if target.height == 0 || target.width == 0 {
        return Err(Error::InvalidGrid { height: target.height, width: target.width, tokens: 0 });
    }
    if src == target {
        return Ok(m.clone());
    }
    let out = if src.tokens() > target.tokens()
        && src.height % target.height == 0
        && src.width % target.width == 0
    {
        area_pool(m, src, target)
    } else if src.tokens() < target.tokens() && mode == UpsampleMode::Nearest {
        nearest(m, src, target)
    } else {
        bilinear(m, src, target)
    };
    TokenMatrix::from_parts_unchecked(target.tokens(), m.cols(), out, None).with_grid(target)
}

/// Aligns every layer of a gridded stack onto `target`.
pub fn align_stack(stack: &LayerStack, target: Grid, mode: UpsampleMode) -> Result<LayerStack> {
    let layers = stack
        .layers
        .iter()
        .map(|l| align_layer(l, target, mode))
        .collect::<Result<Vec<_>>>()?;
    LayerStack::new(layers, stack.layer_ids.clone())
}

fn area_pool(m: &TokenMatrix, src: Grid, dst: Grid) -> Vec<f32> {
    let (fy, fx) = (src.height / dst.height, src.width / dst.width);
    let d = m.cols();
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = Vec::with_capacity(dst.tokens() * d);
    let mut acc = alloc::vec![0.0f64; d];
    for y in 0..dst.height {
        for x in 0..dst.width {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for sy in y * fy..(y + 1) * fy {
                for sx in x * fx..(x + 1) * fx {
                    for (a, &v) in acc.iter_mut().zip(m.row(sy * src.width + sx)) {
                        *a += f64::from(v);
                    }
                }
            }
            out.extend(acc.iter().map(|a| (a * inv) as f32));
        }
    }
    out
}

fn nearest(m: &TokenMatrix, src: Grid, dst: Grid) -> Vec<f32> {
    let pick = |o: usize, n_src: usize, n_dst: usize| -> usize {
        let s = math::floor((o as f64 + 0.5) * n_src as f64 / n_dst as f64) as usize;
        s.min(n_src - 1)
    };
    let mut out = Vec::with_capacity(dst.tokens() * m.cols());
    for y in 0..dst.height {
        let sy = pick(y, src.height, dst.height);
        for x in 0..dst.width {
            let sx = pick(x, src.width, dst.width);
            out.extend_from_slice(m.row(sy * src.width + sx));
        }
    }
    out
}

/// Source coordinate, lower index, upper index and interpolation weight for
/// output index `o` (align-corners-false).
fn bilinear_coord(o: usize, n_src: usize, n_dst: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).max(0.0);
    let lo = (math::floor(s) as usize).min(n_src - 1);
    let hi = (lo + 1).min(n_src - 1);
    (lo, hi, s - lo as f64)
}

fn bilinear(m: &TokenMatrix, src: Grid, dst: Grid) -> Vec<f32> {
    let d = m.cols();
    let mut out = Vec::with_capacity(dst.tokens() * d);
    for y in 0..dst.height {
        let (y0, y1, ly) = bilinear_coord(y, src.height, dst.height);
        for x in 0..dst.width {
            let (x0, x1, lx) = bilinear_coord(x, src.width, dst.width);
            let corners = [
                (y0 * src.width + x0, (1.0 - ly) * (1.0 - lx)),
                (y0 * src.width + x1, (1.0 - ly) * lx),
                (y1 * src.width + x0, ly * (1.0 - lx)),
                (y1 * src.width + x1, ly * lx),
            ];
            for j in 0..d {
                let v: f64 = corners.iter().map(|&(r, w)| w * f64::from(m.get(r, j))).sum();
                out.push(v as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn cat(i: u32) -> CategoryId {
        CategoryId::new(i).unwrap()
    }

    #[test]
    fn softmax_temperature_limits() {
        let a = softmax_mixture(&[1.7, -3.2, 0.4], 1e-6).unwrap();
        for &v in a.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-5);
        }
        let b = softmax_mixture(&[0.1, 0.9, 0.3], 1e3).unwrap();
        assert!(b.as_slice()[1] > 1.0 - 1e-9);
        let c = softmax_mixture(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(c.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert_eq!(softmax_mixture(&[1.0, f64::NAN], 1.0), Err(Error::NonFiniteScore));
        assert_eq!(softmax_mixture(&[1.0], 0.0), Err(Error::InvalidTemperature(0.0)));
    }

    fn basis_stack() -> LayerStack {
        let e = |i: usize| {
            let mut r = [0.0f32; 3];
            r[i] = 1.0;
            r
        };
        LayerStack::new(
            vec![
                TokenMatrix::from_rows(&[e(0), e(1)]).unwrap(),
                TokenMatrix::from_rows(&[e(1), e(2)]).unwrap(),
                TokenMatrix::from_rows(&[e(2), e(0)]).unwrap(),
            ],
            vec![5, 15, 22],
        )
        .unwrap()
    }

    #[test]
    fn fuse_table_weights() {
        // class-0 LLaVA row: {L5: 0.2, L15: 0.3, L22: 0.5}
        let stack = basis_stack();
        let p = ClassProfile::weights(cat(0), &[(5, 0.2), (15, 0.3), (22, 0.5)], 0.8).unwrap();
        let alpha = p.mixture(&stack.layer_ids).unwrap();
        let z = fuse(&stack, &alpha).unwrap();
        for (got, want) in z.row(0).iter().zip([0.2f32, 0.3, 0.5]) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn fuse_one_hot_and_identical_layers() {
        let stack = basis_stack();
        for l in 0..3 {
            let z = fuse(&stack, &MixtureWeights::one_hot(3, l)).unwrap();
            assert_eq!(z.data(), stack.layers[l].data());
        }
        let same = LayerStack::new(
            vec![stack.layers[0].clone(), stack.layers[0].clone()],
            vec![1, 2],
        )
        .unwrap();
        let z = fuse(&same, &MixtureWeights::new(vec![0.37, 0.63]).unwrap()).unwrap();
        for (a, b) in z.data().iter().zip(same.layers[0].data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn fuse_shape_errors() {
        let stack = basis_stack();
        assert!(matches!(
            fuse(&stack, &MixtureWeights::one_hot(2, 0)),
            Err(Error::ShapeMismatch(_))
        ));
        let a = TokenMatrix::zeros(4, 1).with_grid(Grid::new(2, 2)).unwrap();
        let b = TokenMatrix::zeros(1, 1).with_grid(Grid::new(1, 1)).unwrap();
        let s = LayerStack::new(vec![a, b], vec![1, 2]).unwrap();
        assert_eq!(fuse(&s, &MixtureWeights::one_hot(2, 0)), Err(Error::UnalignedLayers));
    }

    #[test]
    fn absent_layers_get_zero_weight() {
        let p = ClassProfile::scores(cat(3), &[(15, 2.0), (22, 1.0)], 1.0, 0.5).unwrap();
        let alpha = p.mixture(&[5, 15, 22]).unwrap();
        assert_eq!(alpha.as_slice()[0], 0.0);
        let e = libm::exp(1.0);
        assert!((alpha.as_slice()[1] - e / (e + 1.0)).abs() < 1e-12);
        assert_eq!(p.mixture(&[5, 22]), Err(Error::MissingLayer(15)));
    }

    #[test]
    fn profile_validation() {
        assert!(ClassProfile::weights(cat(0), &[(5, 0.5), (6, 0.4)], 0.5).is_err());
        assert!(ClassProfile::weights(cat(0), &[(5, 1.0)], 1.5).is_err());
        assert!(ClassProfile::scores(cat(0), &[(5, 1.0)], -1.0, 0.5).is_err());
        let p = ClassProfile::weights(cat(0), &[(5, 1.0)], 0.5).unwrap();
        assert!(ProfileTable::new(vec![p.clone()]).is_err());
        let all: Vec<_> = CategoryId::all()
            .map(|c| ClassProfile { category: c, ..p.clone() })
            .collect();
        assert!(ProfileTable::new(all.clone()).is_ok());
        let mut dup = all;
        dup[3].category = cat(2);
        assert!(ProfileTable::new(dup).is_err());
    }

    #[test]
    fn projection_examples() {
        let m = TokenMatrix::from_rows(&[[1.0f32, 2.0]]).unwrap();
        assert_eq!(project(&m, &Projection::Identity).unwrap(), m);
        let eye = TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(project(&m, &Projection::Linear(eye)).unwrap().data(), m.data());
        let p = TokenMatrix::from_rows(&[[1.0f32, 0.0, 1.0], [0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(project(&m, &Projection::Linear(p)).unwrap().data(), &[1.0, 2.0, 3.0]);
        let bad = TokenMatrix::from_rows(&[[1.0f32]]).unwrap();
        assert!(project(&m, &Projection::Linear(bad)).is_err());
    }

    fn gridded(h: usize, w: usize, rows: &[[f32; 2]]) -> TokenMatrix {
        TokenMatrix::from_rows(rows).unwrap().with_grid(Grid::new(h, w)).unwrap()
    }

    #[test]
    fn align_examples() {
        let m = gridded(2, 2, &[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 8.0]]);
        assert_eq!(align_layer(&m, Grid::new(2, 2), UpsampleMode::Bilinear).unwrap(), m);
        let pooled = align_layer(&m, Grid::new(1, 1), UpsampleMode::Bilinear).unwrap();
        assert_eq!(pooled.data(), &[2.5, 2.0]);
        let one = gridded(1, 1, &[[7.0, -1.0]]);
        let up = align_layer(&one, Grid::new(2, 2), UpsampleMode::Nearest).unwrap();
        assert_eq!(up.rows(), 4);
        assert!(up.iter_rows().all(|r| r == [7.0, -1.0]));
        assert_eq!(
            align_layer(&TokenMatrix::zeros(4, 2), Grid::new(2, 2), UpsampleMode::Bilinear),
            Err(Error::MissingGrid)
        );
    }

    #[test]
    fn bilinear_upsample_pixel_centers() {
        // 1x2 -> 1x4: source centers at 0.5 and 1.5 in a width-2 image.
        let m = gridded(1, 2, &[[0.0, 0.0], [4.0, 0.0]]);
        let up = align_layer(&m, Grid::new(1, 4), UpsampleMode::Bilinear).unwrap();
        let xs: Vec<f32> = up.iter_rows().map(|r| r[0]).collect();
        // output centers map to source coords -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped hi)
        assert_eq!(xs, vec![0.0, 1.0, 3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn simplex_property(scores in proptest::collection::vec(-10.0f64..10.0, 1..32), tau in 0.01f64..8.0) {
            let a = softmax_mixture(&scores, tau).unwrap();
            prop_assert!(a.as_slice().iter().all(|&v| v >= 0.0));
            prop_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn softmax_l1_lipschitz(
            pair in (1usize..32).prop_flat_map(|l| (
                proptest::collection::vec(-10.0f64..10.0, l),
                proptest::collection::vec(-10.0f64..10.0, l),
            )),
            tau in prop_oneof![Just(0.1f64), Just(1.0), Just(4.0)],
        ) {
            let (w, w2) = pair;
            let a = softmax_mixture(&w, tau).unwrap();
            let b = softmax_mixture(&w2, tau).unwrap();
            let lhs: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).sum();
            let rhs: f64 = tau / 2.0 * w.iter().zip(&w2).map(|(x, y)| (x - y).abs()).sum::<f64>();
            prop_assert!(lhs <= rhs + 1e-9);
        }

        #[test]
        fn fused_rows_stay_in_hull(
            (l, m, d) in (1usize..5, 1usize..5, 1usize..6),
            seed in proptest::collection::vec(-5.0f32..5.0, 100),
            raw in proptest::collection::vec(0.0f64..1.0, 5),
        ) {
            let layers: Vec<TokenMatrix> = (0..l).map(|k| {
                let data = (0..m * d).map(|i| seed[(k * 31 + i * 7) % seed.len()]).collect();
                TokenMatrix::new(m, d, data).unwrap()
            }).collect();
            let ids = (1..=l as u32).collect();
            let stack = LayerStack::new(layers, ids).unwrap();
            let total: f64 = raw[..l].iter().sum::<f64>() + 1e-9;
            let alpha = MixtureWeights::new(raw[..l].iter().map(|r| (r + 1e-9 / l as f64) / total).collect());
            prop_assume!(alpha.is_ok());
            let alpha = alpha.unwrap();
            let z = fuse(&stack, &alpha).unwrap();
            for t in 0..m {
                for j in 0..d {
                    let vals = stack.layers.iter().map(|lay| lay.get(t, j));
                    let lo = vals.clone().fold(f32::INFINITY, f32::min);
                    let hi = vals.clone().fold(f32::NEG_INFINITY, f32::max);
                    prop_assert!(z.get(t, j) >= lo - 1e-5 && z.get(t, j) <= hi + 1e-5);
                    let exact: f64 = stack.layers.iter().zip(alpha.as_slice())
                        .map(|(lay, a)| a * f64::from(lay.get(t, j))).sum();
                    prop_assert!((f64::from(z.get(t, j)) - exact).abs() <= 1e-5);
                }
                let max_norm = stack.layers.iter().map(|lay| math::norm_f32(lay.row(t))).fold(0.0, f64::max);
                prop_assert!(math::norm_f32(z.row(t)) <= max_norm + 1e-5);
            }
        }

        #[test]
        fn constant_field_round_trip(
            (h, w, k) in (1usize..5, 1usize..5, 2usize..4),
            value in proptest::collection::vec(-3.0f32..3.0, 3),
        ) {
            let rows: Vec<Vec<f32>> = (0..h * w).map(|_| value.clone()).collect();
            let m = TokenMatrix::from_rows(&rows).unwrap().with_grid(Grid::new(h, w)).unwrap();
            let up = align_layer(&m, Grid::new(h * k, w * k), UpsampleMode::Bilinear).unwrap();
            let down = align_layer(&up, Grid::new(h, w), UpsampleMode::Bilinear).unwrap();
            for (a, b) in down.data().iter().zip(m.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
