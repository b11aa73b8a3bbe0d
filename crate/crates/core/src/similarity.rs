//! Voxel-wise similarity between a warped atlas label and a target image.
//!
//! Three sources of fusion weights live here:
//! - [`ground_truth_similarity`]: patch agreement between the warped atlas
//!   label and the target's gold label (training targets, and the oracle).
//! - [`SimilarityModel`]: a logistic model over a multi-scale feature stack of
//!   the warped label and the target image, trained on cross entropy against
//!   ground-truth maps.
//! - [`mi_patch_similarity`]: patch mutual information between the target and
//!   the warped atlas image.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::filter::{box_mean, GaussianSmoother};
use crate::losses::ScaleSet;
use crate::volume::{one_hot, Grid, LabelMap, Volume};

/// Per-voxel weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DataLength { expected: grid.len(), found: values.len() });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("similarity values must lie in [0, 1]".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    pub fn to_volume(&self) -> Volume {
        Volume { grid: self.grid, data: self.values.clone() }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Half-widths of a local patch; radius 1 is a 3×3×3 patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub radius: [usize; 3],
}

impl PatchSpec {
    pub fn cube(radius: usize) -> Self {
        Self { radius: [radius; 3] }
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::cube(1)
    }
}

/// Fraction of the in-bounds patch around each voxel where the two label maps agree.
pub fn ground_truth_similarity(warped: &LabelMap, gold: &LabelMap, patch: PatchSpec) -> Result<SimilarityMap> {
    check_dims(warped.grid.dims, gold.grid.dims)?;
    let agree: Vec<f64> = warped.labels.iter().zip(&gold.labels).map(|(a, b)| (a == b) as u8 as f64).collect();
    let values = box_mean(&agree, warped.grid.dims, patch.radius);
    Ok(SimilarityMap { grid: warped.grid, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub scales: ScaleSet,
    /// Patch for the native-scale intensity mean/std.
    pub patch: PatchSpec,
    pub label_set: Vec<i16>,
}

impl FeatureConfig {
    pub fn new(label_set: Vec<i16>) -> Self {
        Self { scales: ScaleSet::default(), patch: PatchSpec::default(), label_set }
    }

    pub fn feature_count(&self) -> usize {
        let k = self.label_set.len();
        let s = self.scales.len();
        k * s + 2 * s + 2 * k * s + 2 * k
    }

    /// Feature names in stack order.
    ///
    /// 1. `label{l}_s{σ}`: one-hot channel of the warped label, Gaussian
    ///    smoothed at σ, for each scale then each label.
    /// 2. `mean_s{σ}`, `std_s{σ}`: local mean and standard deviation of the
    ///    target image (box patch at σ = 0, Gaussian window otherwise).
    /// 3. `label{l}_mean_s{σ}`, `label{l}_mean2_s{σ}`: unsmoothed one-hot
    ///    channel times the local mean and its square, for each label then
    ///    each scale.
    /// 4. `label{l}_int`, `label{l}_int2`: unsmoothed one-hot channel times
    ///    the voxel's own intensity and its square.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.feature_count());
        let sig = self.scales.sigmas();
        for s in sig {
            for l in &self.label_set {
                names.push(format!("label{l}_s{s}"));
            }
        }
        for s in sig {
            names.push(format!("mean_s{s}"));
            names.push(format!("std_s{s}"));
        }
        for l in &self.label_set {
            for s in sig {
                names.push(format!("label{l}_mean_s{s}"));
                names.push(format!("label{l}_mean2_s{s}"));
            }
        }
        for l in &self.label_set {
            names.push(format!("label{l}_int"));
            names.push(format!("label{l}_int2"));
        }
        names
    }
}

/// Feature-major stack: `columns[f][voxel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub columns: Vec<Vec<f32>>,
}

impl FeatureStack {
    pub fn voxels(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }
}

/// Builds the per-voxel feature stack documented on [`FeatureConfig::feature_names`].
pub fn extract_features(target_img: &Volume, warped: &LabelMap, config: &FeatureConfig) -> Result<FeatureStack> {
    check_dims(target_img.grid.dims, warped.grid.dims)?;
    if warped.label_set != config.label_set {
        return Err(Error::ConfigMismatch(format!(
            "warped label set {:?} differs from feature config {:?}",
            warped.label_set, config.label_set
        )));
    }
    if target_img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("target image has non-finite values".into()));
    }
    let dims = target_img.grid.dims;
    let oh = one_hot(warped);
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let mut columns = Vec::with_capacity(config.feature_count());

    let smoothers: Vec<GaussianSmoother> = config.scales.sigmas().iter().map(|&s| GaussianSmoother::new(dims, s)).collect();
    for sm in &smoothers {
        for ch in &oh.channels {
            columns.push(to_f32(sm.smooth(ch)));
        }
    }

    let squared: Vec<f64> = target_img.data.iter().map(|v| v * v).collect();
    let mut means = Vec::with_capacity(smoothers.len());
    for sm in &smoothers {
        let (m, m2) = if sm.sigma() == 0.0 {
            (box_mean(&target_img.data, dims, config.patch.radius), box_mean(&squared, dims, config.patch.radius))
        } else {
            (sm.smooth(&target_img.data), sm.smooth(&squared))
        };
        let std: Vec<f64> = m.iter().zip(&m2).map(|(a, b)| (b - a * a).max(0.0).sqrt()).collect();
        columns.push(to_f32(m.clone()));
        columns.push(to_f32(std));
        means.push(m);
    }

    for ch in &oh.channels {
        for m in &means {
            columns.push(ch.iter().zip(m).map(|(c, v)| (c * v) as f32).collect());
            columns.push(ch.iter().zip(m).map(|(c, v)| (c * v * v) as f32).collect());
        }
    }
    for ch in &oh.channels {
        columns.push(ch.iter().zip(&target_img.data).map(|(c, v)| (c * v) as f32).collect());
        columns.push(ch.iter().zip(&target_img.data).map(|(c, v)| (c * v * v) as f32).collect());
    }
    debug_assert_eq!(columns.len(), config.feature_count());
    Ok(FeatureStack { columns })
}

/// Logistic model over standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityModel {
    pub config: FeatureConfig,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Standardization applied before the linear map: `(x - offset) / scale`.
    pub feature_offset: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

/// Logits are clamped to this magnitude so predictions stay strictly inside (0, 1).
const MAX_LOGIT: f64 = 30.0;

impl SimilarityModel {
    /// Predicts 0.5 everywhere.
    pub fn zero(config: FeatureConfig) -> Self {
        let f = config.feature_count();
        Self { config, weights: vec![0.0; f], bias: 0.0, feature_offset: vec![0.0; f], feature_scale: vec![1.0; f] }
    }

    fn validate(&self) -> Result<()> {
        let f = self.config.feature_count();
        if self.weights.len() != f || self.feature_offset.len() != f || self.feature_scale.len() != f {
            return Err(Error::ConfigMismatch(format!(
                "model has {} weights for {} features",
                self.weights.len(),
                f
            )));
        }
        Ok(())
    }

    /// Raw linear score per voxel.
    fn logits(&self, features: &FeatureStack) -> Vec<f64> {
        let mut z = vec![self.bias; features.voxels()];
        for (f, col) in features.columns.iter().enumerate() {
            let w = self.weights[f] / self.feature_scale[f];
            if w == 0.0 {
                continue;
            }
            let off = self.feature_offset[f];
            for (zi, &x) in z.iter_mut().zip(col) {
                *zi += w * (x as f64 - off);
            }
        }
        z
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-MAX_LOGIT, MAX_LOGIT)).exp())
}

/// `-[y ln σ(z) + (1-y) ln(1-σ(z))]`, evaluated stably.
#[inline]
fn cross_entropy_logit(z: f64, y: f64) -> f64 {
    let z = z.clamp(-MAX_LOGIT, MAX_LOGIT);
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

/// Mean per-voxel cross entropy of predictions against targets.
pub fn cross_entropy(pred: &SimilarityMap, target: &SimilarityMap) -> Result<f64> {
    check_dims(pred.grid.dims, target.grid.dims)?;
    let total: f64 = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.values.len() as f64)
}

pub fn predict_similarity(model: &SimilarityModel, target_img: &Volume, warped: &LabelMap) -> Result<SimilarityMap> {
    model.validate()?;
    let features = extract_features(target_img, warped, &model.config)?;
    let values = model.logits(&features).into_iter().map(sigmoid).collect();
    Ok(SimilarityMap { grid: target_img.grid, values })
}

/// One training example: target image, warped atlas label, ground-truth similarity.
#[derive(Clone, Debug)]
pub struct SimilarityPair {
    pub target_img: Volume,
    pub warped: LabelMap,
    pub w_gt: SimilarityMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub initial_step: f64,
    /// Reweights agreeing (W_gt ≥ 0.5) and disagreeing voxels to equal total mass.
    pub class_balance: bool,
    /// Use every `voxel_stride`-th voxel of each pair (offset chosen by the seed).
    pub voxel_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 300, initial_step: 1.0, class_balance: false, voxel_stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean cross entropy of the accepted iterate after each iteration; entry 0 is the zero model.
    pub loss_trace: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace starts with the zero model")
    }
}

struct Design {
    columns: Vec<Vec<f32>>,
    targets: Vec<f64>,
    sample_weight: Vec<f64>,
}

fn assemble(pairs: &[SimilarityPair], config: &FeatureConfig, train: &TrainConfig, seed: u64) -> Result<Design> {
    let stride = train.voxel_stride.max(1);
    let offset = (seed % stride as u64) as usize;
    let f = config.feature_count();
    let mut columns: Vec<Vec<f32>> = vec![Vec::new(); f];
    let mut targets = Vec::new();
    for p in pairs {
        check_dims(p.target_img.grid.dims, p.w_gt.grid.dims)?;
        let stack = extract_features(&p.target_img, &p.warped, config)?;
        if stack.columns.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite feature values".into()));
        }
        for (dst, src) in columns.iter_mut().zip(&stack.columns) {
            dst.extend(src.iter().skip(offset).step_by(stride));
        }
        targets.extend(p.w_gt.values.iter().skip(offset).step_by(stride));
    }
    let n = targets.len();
    let sample_weight = if train.class_balance {
        let pos = targets.iter().filter(|&&y| y >= 0.5).count();
        let neg = n - pos;
        targets
            .iter()
            .map(|&y| {
                let (count, other) = if y >= 0.5 { (pos, neg) } else { (neg, pos) };
                if other == 0 {
                    1.0
                } else {
                    n as f64 / (2.0 * count as f64)
                }
            })
            .collect()
    } else {
        vec![1.0; n]
    };
    Ok(Design { columns, targets, sample_weight })
}

fn design_loss(model: &SimilarityModel, d: &Design) -> (f64, Vec<f64>) {
    let stack = FeatureStack { columns: d.columns.clone() };
    let z = model.logits(&stack);
    let n = d.targets.len() as f64;
    let mut loss = 0.0;
    let mut residual = vec![0.0; z.len()];
    for (i, &zi) in z.iter().enumerate() {
        let y = d.targets[i];
        let w = d.sample_weight[i];
        loss += w * cross_entropy_logit(zi, y);
        residual[i] = w * (sigmoid(zi) - y) / n;
    }
    (loss / n, residual)
}

/// Fits the logistic model by full-batch gradient descent on mean cross
/// entropy, starting from the zero model. A step that raises the loss is
/// rejected and the step size halved.
pub fn train_similarity(
    pairs: &[SimilarityPair],
    config: &FeatureConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(SimilarityModel, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("similarity training needs at least one pair".into()));
    }
    let design = assemble(pairs, config, train, seed)?;
    let mut model = SimilarityModel::zero(config.clone());
    for (f, col) in design.columns.iter().enumerate() {
        let n = col.len() as f64;
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        model.feature_offset[f] = mean;
        model.feature_scale[f] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }

    // Avoids re-cloning the design on every evaluation.
    let stack = FeatureStack { columns: design.columns };
    let design = Design { columns: Vec::new(), targets: design.targets, sample_weight: design.sample_weight };
    let eval = |m: &SimilarityModel| -> (f64, Vec<f64>, f64) {
        let z = m.logits(&stack);
        let n = design.targets.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; m.weights.len()];
        let mut gbias = 0.0;
        let mut residual = vec![0.0; z.len()];
        for (i, &zi) in z.iter().enumerate() {
            let y = design.targets[i];
            let w = design.sample_weight[i];
            loss += w * cross_entropy_logit(zi, y);
            residual[i] = w * (sigmoid(zi) - y) / n;
            gbias += residual[i];
        }
        for (f, col) in stack.columns.iter().enumerate() {
            let off = m.feature_offset[f];
            let inv = 1.0 / m.feature_scale[f];
            grad[f] = col.iter().zip(&residual).map(|(&x, r)| r * (x as f64 - off) * inv).sum();
        }
        (loss / n, grad, gbias)
    };

    let (mut loss, mut grad, mut gbias) = eval(&model);
    let mut trace = vec![loss];
    let mut step = train.initial_step;
    for _ in 0..train.iterations {
        let mut candidate = model.clone();
        for (w, g) in candidate.weights.iter_mut().zip(&grad) {
            *w -= step * g;
        }
        candidate.bias -= step * gbias;
        let (l, g, gb) = eval(&candidate);
        if l.is_finite() && l <= loss {
            model = candidate;
            loss = l;
            grad = g;
            gbias = gb;
            step *= 1.2;
        } else {
            step *= 0.5;
        }
        trace.push(loss);
    }
    Ok((model, TrainReport { loss_trace: trace }))
}

/// Mean cross entropy of a model on a set of pairs.
pub fn evaluate_model(model: &SimilarityModel, pairs: &[SimilarityPair]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in pairs {
        let d = Design {
            columns: extract_features(&p.target_img, &p.warped, &model.config)?.columns,
            targets: p.w_gt.values.clone(),
            sample_weight: vec![1.0; p.w_gt.values.len()],
        };
        let (l, _) = design_loss(model, &d);
        total += l * d.targets.len() as f64;
        n += d.targets.len();
    }
    Ok(total / n as f64)
}

/// Patch mutual information (bits) between two images, each patch min–max
/// binned independently, then divided by the largest value in the volume.
/// A volume whose patches all carry zero information maps to zeros.
pub fn mi_patch_similarity(target_img: &Volume, warped_img: &Volume, patch: PatchSpec, bins: usize) -> Result<SimilarityMap> {
    let mi = mi_patch_bits(target_img, warped_img, patch, bins)?;
    let max = mi.iter().fold(0.0f64, |m, &v| m.max(v));
    let values = if max > 0.0 { mi.iter().map(|v| v / max).collect() } else { vec![0.0; mi.len()] };
    Ok(SimilarityMap { grid: target_img.grid, values })
}

/// Unscaled per-voxel patch mutual information in bits.
pub fn mi_patch_bits(target_img: &Volume, warped_img: &Volume, patch: PatchSpec, bins: usize) -> Result<Vec<f64>> {
    check_dims(target_img.grid.dims, warped_img.grid.dims)?;
    if bins < 2 {
        return Err(Error::InvalidArgument("MI needs at least two bins".into()));
    }
    let g = target_img.grid;
    let [nx, ny, nz] = g.dims;
    let r = patch.radius;
    let mut joint = vec![0u32; bins * bins];
    let mut ma = vec![0u32; bins];
    let mut mb = vec![0u32; bins];
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut touched: Vec<usize> = Vec::new();
    let mut out = vec![0.0; g.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let [x, y, z] = g.coords(i);
        xs.clear();
        ys.clear();
        for zz in z.saturating_sub(r[2])..=(z + r[2]).min(nz - 1) {
            for yy in y.saturating_sub(r[1])..=(y + r[1]).min(ny - 1) {
                for xx in x.saturating_sub(r[0])..=(x + r[0]).min(nx - 1) {
                    let j = g.index(xx, yy, zz);
                    xs.push(target_img.data[j]);
                    ys.push(warped_img.data[j]);
                }
            }
        }
        let binner = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            move |s: f64| {
                if span > 0.0 {
                    (((s - lo) / span * bins as f64) as usize).min(bins - 1)
                } else {
                    0
                }
            }
        };
        let bx = binner(&xs);
        let by = binner(&ys);
        for (&a, &b) in xs.iter().zip(&ys) {
            let (ia, ib) = (bx(a), by(b));
            let cell = ia * bins + ib;
            if joint[cell] == 0 {
                touched.push(cell);
            }
            joint[cell] += 1;
            ma[ia] += 1;
            mb[ib] += 1;
        }
        let n = xs.len() as f64;
        let mut mi = 0.0;
        for &cell in &touched {
            let pj = joint[cell] as f64 / n;
            let pa = ma[cell / bins] as f64 / n;
            let pb = mb[cell % bins] as f64 / n;
            mi += pj * (pj / (pa * pb)).log2();
        }
        *o = mi.max(0.0);
        for &cell in &touched {
            joint[cell] = 0;
            ma[cell / bins] = 0;
            mb[cell % bins] = 0;
        }
        touched.clear();
    }
    Ok(out)
}
