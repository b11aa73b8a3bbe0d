//! Registration losses: soft and multi-scale Dice, the forward/backward
//! consistency residual, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::ddf::{composed_sample, warp_scalar, DisplacementField};
use crate::error::{check_dims, Error, Result};
use crate::filter::GaussianSmoother;
use crate::volume::{one_hot, LabelMap, ProbVolume, Volume};

/// Added to every Dice denominator.
pub const DICE_EPS: f64 = 1e-7;

/// Half-width of the region around zero where the L1 derivative is linear.
pub const L1_SMOOTH_WIDTH: f64 = 1e-6;

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Gaussian sigmas (voxels) at which labels are compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleSet(Vec<f64>);

impl ScaleSet {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::InvalidArgument("scale set must not be empty".into()));
        }
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("scales must be finite and non-negative: {sigmas:?}")));
        }
        if !sigmas.contains(&0.0) {
            return Err(Error::InvalidArgument("scale set must include the native scale 0".into()));
        }
        Ok(Self(sigmas))
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self(vec![0.0, 1.0, 2.0, 4.0])
    }
}

impl TryFrom<Vec<f64>> for ScaleSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleSet> for Vec<f64> {
    fn from(s: ScaleSet) -> Self {
        s.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice_term: f64,
    /// Per-voxel mean consistency residual; this is the term weighted by lambda.
    pub cons_term: f64,
    /// Consistency residual summed over the grid.
    pub cons_sum: f64,
    pub total: f64,
    pub lambda: f64,
}

fn foreground_channels(label_set: &[i16]) -> Vec<usize> {
    label_set.iter().enumerate().filter(|(_, l)| **l != 0).map(|(c, _)| c).collect()
}

fn check_prob_pair(p: &ProbVolume, q: &ProbVolume) -> Result<()> {
    check_dims(p.grid.dims, q.grid.dims)?;
    if p.label_set != q.label_set || p.channels.len() != q.channels.len() {
        return Err(Error::LabelSetMismatch(p.label_set.clone(), q.label_set.clone()));
    }
    Ok(())
}

#[inline]
fn dice_sums(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let mut pq = 0.0;
    let mut pp = 0.0;
    let mut qq = 0.0;
    for (a, b) in p.iter().zip(q) {
        pq += a * b;
        pp += a * a;
        qq += b * b;
    }
    (pq, pp, qq)
}

/// Mean over foreground channels of `2Σpq / (Σp² + Σq² + ε)`.
pub fn soft_dice(p: &ProbVolume, q: &ProbVolume) -> Result<f64> {
    check_prob_pair(p, q)?;
    let fg = foreground_channels(&p.label_set);
    if fg.is_empty() {
        return Err(Error::InvalidArgument("soft Dice needs at least one foreground channel".into()));
    }
    let total: f64 = fg
        .iter()
        .map(|&c| {
            let (pq, pp, qq) = dice_sums(&p.channels[c], &q.channels[c]);
            2.0 * pq / (pp + qq + DICE_EPS)
        })
        .sum();
    Ok(total / fg.len() as f64)
}

/// Soft Dice and its gradient with respect to every channel of `q`
/// (background channels get zero gradient).
pub fn soft_dice_grad(p: &ProbVolume, q: &ProbVolume) -> Result<(f64, Vec<Vec<f64>>)> {
    check_prob_pair(p, q)?;
    let fg = foreground_channels(&p.label_set);
    if fg.is_empty() {
        return Err(Error::InvalidArgument("soft Dice needs at least one foreground channel".into()));
    }
    let mut grads = vec![vec![0.0; p.grid.len()]; p.channels.len()];
    let mut value = 0.0;
    let scale = 1.0 / fg.len() as f64;
    for &c in &fg {
        value += scale * dice_channel_grad(&p.channels[c], &q.channels[c], scale, &mut grads[c]);
    }
    Ok((value, grads))
}

/// Adds `weight * dD/dq` into `out`, returns the channel Dice `D`.
fn dice_channel_grad(p: &[f64], q: &[f64], weight: f64, out: &mut [f64]) -> f64 {
    let (pq, pp, qq) = dice_sums(p, q);
    let den = pp + qq + DICE_EPS;
    let a = weight * 2.0 / den;
    let b = weight * 4.0 * pq / (den * den);
    for ((o, pi), qi) in out.iter_mut().zip(p).zip(q) {
        *o += a * pi - b * qi;
    }
    2.0 * pq / den
}

fn smoothers(dims: [usize; 3], scales: &ScaleSet) -> Vec<GaussianSmoother> {
    scales.sigmas().iter().map(|&s| GaussianSmoother::new(dims, s)).collect()
}

/// Mean over scales of soft Dice between Gaussian-smoothed soft labels.
pub fn multi_scale_dice(a: &ProbVolume, b: &ProbVolume, scales: &ScaleSet) -> Result<f64> {
    check_prob_pair(a, b)?;
    let mut total = 0.0;
    for sm in smoothers(a.grid.dims, scales) {
        let smooth = |v: &ProbVolume| ProbVolume {
            grid: v.grid,
            label_set: v.label_set.clone(),
            channels: v.channels.iter().map(|c| sm.smooth(c)).collect(),
        };
        total += soft_dice(&smooth(a), &smooth(b))?;
    }
    Ok(total / scales.len() as f64)
}

pub fn multi_scale_dice_labels(a: &LabelMap, b: &LabelMap, scales: &ScaleSet) -> Result<f64> {
    multi_scale_dice(&one_hot(a), &one_hot(b), scales)
}

fn one_hot_with_set(labels: &LabelMap, label_set: &[i16]) -> Result<ProbVolume> {
    if labels.label_set != label_set {
        return Err(Error::LabelSetMismatch(labels.label_set.clone(), label_set.to_vec()));
    }
    Ok(one_hot(labels))
}

/// `-D_s(L_t, warped_atlas) - D_s(L_a, warped_target)`; minimum −2.
pub fn dice_loss(
    target_label: &LabelMap,
    warped_atlas: &ProbVolume,
    atlas_label: &LabelMap,
    warped_target: &ProbVolume,
    scales: &ScaleSet,
) -> Result<f64> {
    let lt = one_hot_with_set(target_label, &warped_atlas.label_set)?;
    let la = one_hot_with_set(atlas_label, &warped_target.label_set)?;
    Ok(-multi_scale_dice(&lt, warped_atlas, scales)? - multi_scale_dice(&la, warped_target, scales)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyTerms {
    pub sum: f64,
    pub mean: f64,
}

/// Restoration residuals `Σ|I'_a − I_a| + |I'_t − I_t|` where
/// `I'_a(x) = Ĩ_a(x + V(x))` and `I'_t(x) = Ĩ_t(x + U(x))`.
pub fn consistency_loss(
    atlas_img: &Volume,
    target_img: &Volume,
    u: &DisplacementField,
    v: &DisplacementField,
) -> Result<ConsistencyTerms> {
    check_dims(atlas_img.grid.dims, target_img.grid.dims)?;
    check_dims(atlas_img.grid.dims, u.grid.dims)?;
    check_dims(atlas_img.grid.dims, v.grid.dims)?;
    let restored_a = composed_sample(&warp_scalar(atlas_img, u)?, v)?;
    let restored_t = composed_sample(&warp_scalar(target_img, v)?, u)?;
    let sum: f64 = restored_a
        .data
        .iter()
        .zip(&atlas_img.data)
        .chain(restored_t.data.iter().zip(&target_img.data))
        .map(|(r, o)| (r - o).abs())
        .sum();
    Ok(ConsistencyTerms { sum, mean: sum / atlas_img.data.len() as f64 })
}

/// `L_reg = dice + λ·cons`.
pub fn total_loss(dice_term: f64, cons: ConsistencyTerms, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(LossBreakdown {
        dice_term,
        cons_term: cons.mean,
        cons_sum: cons.sum,
        total: dice_term + lambda * cons.mean,
        lambda,
    })
}

/// Derivative of `|r|`, linearized inside `±L1_SMOOTH_WIDTH`.
#[inline]
pub(crate) fn l1_grad(r: f64) -> f64 {
    (r / L1_SMOOTH_WIDTH).clamp(-1.0, 1.0)
}

/// Fixed side of a multi-scale Dice term, pre-smoothed once so repeated
/// evaluation against a moving soft label only smooths the moving side.
pub(crate) struct MultiScaleDiceTarget {
    smoothers: Vec<GaussianSmoother>,
    /// `[scale][foreground channel]`
    fixed: Vec<Vec<Vec<f64>>>,
    pub fg: Vec<usize>,
}

impl MultiScaleDiceTarget {
    pub fn new(fixed: &ProbVolume, scales: &ScaleSet) -> Self {
        let fg = foreground_channels(&fixed.label_set);
        let smoothers = smoothers(fixed.grid.dims, scales);
        let fixed = smoothers
            .iter()
            .map(|s| fg.iter().map(|&c| s.smooth(&fixed.channels[c])).collect())
            .collect();
        Self { smoothers, fixed, fg }
    }

    /// Value of `D_s(fixed, moving)` and its gradient with respect to the
    /// unsmoothed moving foreground channels (indexed like `self.fg`).
    pub fn value_grad(&self, moving_fg: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let n = moving_fg[0].len();
        let n_scales = self.smoothers.len() as f64;
        let weight = 1.0 / (n_scales * self.fg.len() as f64);
        let mut value = 0.0;
        let mut grads = vec![vec![0.0; n]; self.fg.len()];
        for (s, sm) in self.smoothers.iter().enumerate() {
            for (k, q) in moving_fg.iter().enumerate() {
                let qs = sm.smooth(q);
                let mut g = vec![0.0; n];
                value += weight * dice_channel_grad(&self.fixed[s][k], &qs, weight, &mut g);
                for (acc, d) in grads[k].iter_mut().zip(sm.smooth_adjoint(&g)) {
                    *acc += d;
                }
            }
        }
        (value, grads)
    }
}
