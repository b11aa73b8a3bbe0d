//! Attention gate `α = sigmoid(w_c · relu(w_g · up(g) + w_f · f))` with
//! hand-written reverse-mode gradients, plus a finite-difference checker.
//!
//! All linear maps are per-voxel (1×1×1) channel mixes with biases.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::volume::{Grid, Volume};

/// Channel-major feature volume: `values[c * n + voxel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        let expected = channels * dims.iter().product::<usize>();
        if channels == 0 || dims.contains(&0) {
            return Err(Error::InvalidArgument("feature map needs at least one channel and voxel".into()));
        }
        if values.len() != expected {
            return Err(Error::DataLength { expected, found: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map values must be finite".into()));
        }
        Ok(Self { channels, dims, values })
    }

    pub fn constant(channels: usize, dims: [usize; 3], value: f64) -> Self {
        Self { channels, dims, values: vec![value; channels * dims.iter().product::<usize>()] }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.values[c * n..(c + 1) * n]
    }

    /// One channel as a unit-spacing volume, e.g. for `.mvol` export.
    pub fn channel_volume(&self, c: usize) -> Volume {
        Volume { grid: Grid::unit(self.dims), data: self.channel(c).to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub c_g: usize,
    pub c_f: usize,
    /// Shared intermediate width.
    pub c_i: usize,
    /// `c_i × c_g`, row-major.
    pub w_g: Vec<f64>,
    pub b_g: Vec<f64>,
    /// `c_i × c_f`, row-major.
    pub w_f: Vec<f64>,
    pub b_f: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b_c: f64,
}

impl GateParams {
    pub fn zeros(c_g: usize, c_f: usize, c_i: usize) -> Self {
        Self {
            c_g,
            c_f,
            c_i,
            w_g: vec![0.0; c_i * c_g],
            b_g: vec![0.0; c_i],
            w_f: vec![0.0; c_i * c_f],
            b_f: vec![0.0; c_i],
            w_c: vec![0.0; c_i],
            b_c: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.c_i > 0
            && self.w_g.len() == self.c_i * self.c_g
            && self.b_g.len() == self.c_i
            && self.w_f.len() == self.c_i * self.c_f
            && self.b_f.len() == self.c_i
            && self.w_c.len() == self.c_i;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("gate parameter shapes are inconsistent".into()))
        }
    }

    pub fn param_len(&self) -> usize {
        self.c_i * (self.c_g + self.c_f + 3) + 1
    }

    /// Flat order: `w_g, b_g, w_f, b_f, w_c, b_c`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_len());
        v.extend(&self.w_g);
        v.extend(&self.b_g);
        v.extend(&self.w_f);
        v.extend(&self.b_f);
        v.extend(&self.w_c);
        v.push(self.b_c);
        v
    }

    pub fn from_flat(c_g: usize, c_f: usize, c_i: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(c_g, c_f, c_i);
        if flat.len() != p.param_len() {
            return Err(Error::DataLength { expected: p.param_len(), found: flat.len() });
        }
        let mut rest = flat;
        for dst in [&mut p.w_g, &mut p.b_g, &mut p.w_f, &mut p.b_f, &mut p.w_c] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        p.b_c = rest[0];
        Ok(p)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Right-continuous derivative: 1 at the kink.
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-output-sample `(i0, i1, t)` for aligned-corner linear resampling of
/// `n` samples to `m`.
fn aligned_weights(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    (0..m)
        .map(|j| {
            if n == 1 || m == 1 {
                return (0, 0, 0.0);
            }
            let num = j * (n - 1);
            let den = m - 1;
            let i0 = num / den;
            if i0 >= n - 1 {
                (n - 1, n - 1, 0.0)
            } else {
                (i0, i0 + 1, (num % den) as f64 / den as f64)
            }
        })
        .collect()
}

/// Linear resampling along one axis between `small` dims and the same dims
/// with that axis set to `weights.len()`. `forward` maps small → big;
/// otherwise the adjoint maps big → small.
fn resample_axis(src: &[f64], small: [usize; 3], axis: usize, weights: &[(usize, usize, f64)], channels: usize, forward: bool) -> Vec<f64> {
    let mut big = small;
    big[axis] = weights.len();
    let (in_dims, out_dims) = if forward { (small, big) } else { (big, small) };
    let stride = |d: [usize; 3]| [1, d[0], d[0] * d[1]];
    let (ss, sb) = (stride(small), stride(big));
    let (in_n, out_n) = (in_dims.iter().product::<usize>(), out_dims.iter().product::<usize>());
    let (a1, a2) = [(1, 2), (0, 2), (0, 1)][axis];
    let mut out = vec![0.0; channels * out_n];
    for c in 0..channels {
        let src_c = &src[c * in_n..(c + 1) * in_n];
        let out_c = &mut out[c * out_n..(c + 1) * out_n];
        for p2 in 0..small[a2] {
            for p1 in 0..small[a1] {
                let bs = p1 * ss[a1] + p2 * ss[a2];
                let bb = p1 * sb[a1] + p2 * sb[a2];
                for (j, &(i0, i1, t)) in weights.iter().enumerate() {
                    let (k0, k1, kj) = (bs + i0 * ss[axis], bs + i1 * ss[axis], bb + j * sb[axis]);
                    if forward {
                        out_c[kj] = (1.0 - t) * src_c[k0] + t * src_c[k1];
                    } else {
                        out_c[k0] += (1.0 - t) * src_c[kj];
                        out_c[k1] += t * src_c[kj];
                    }
                }
            }
        }
    }
    out
}

/// Trilinear upsampling by an integer factor with aligned corners: output
/// sample `j` along an axis of length `n` reads source position
/// `j·(n−1)/(n·factor−1)`, so both end samples are preserved exactly.
pub fn trilinear_upsample(x: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor < 1 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let mut dims = x.dims;
    let mut values = x.values.clone();
    for axis in 0..3 {
        let m = dims[axis] * factor;
        let w = aligned_weights(dims[axis], m);
        values = resample_axis(&values, dims, axis, &w, x.channels, true);
        dims[axis] = m;
    }
    Ok(FeatureMap { channels: x.channels, dims, values })
}

/// Adjoint of [`trilinear_upsample`] for input dims `dims`.
pub fn trilinear_upsample_adjoint(upstream: &FeatureMap, dims: [usize; 3], factor: usize) -> Result<FeatureMap> {
    if factor < 1 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    check_dims(dims.map(|n| n * factor), upstream.dims)?;
    let mut cur = upstream.dims;
    let mut values = upstream.values.clone();
    for axis in (0..3).rev() {
        let m = cur[axis];
        let w = aligned_weights(dims[axis], m);
        let mut small = cur;
        small[axis] = dims[axis];
        values = resample_axis(&values, small, axis, &w, upstream.channels, false);
        cur = small;
    }
    Ok(FeatureMap { channels: upstream.channels, dims, values })
}

/// Upsample factor of the gating signal relative to the skip features.
pub const GATE_UPSAMPLE: usize = 2;

struct GateForward {
    g_up: FeatureMap,
    pre: Vec<f64>,
    logit: Vec<f64>,
}

fn gate_forward(g: &FeatureMap, f: &FeatureMap, p: &GateParams) -> Result<GateForward> {
    p.validate()?;
    if g.channels != p.c_g || f.channels != p.c_f {
        return Err(Error::InvalidArgument(format!(
            "gate expects {} gating and {} skip channels, got {} and {}",
            p.c_g, p.c_f, g.channels, f.channels
        )));
    }
    let g_up = trilinear_upsample(g, GATE_UPSAMPLE)?;
    check_dims(f.dims, g_up.dims)?;
    let n = f.voxels();
    let mut pre = vec![0.0; p.c_i * n];
    for k in 0..p.c_i {
        let row = &mut pre[k * n..(k + 1) * n];
        row.iter_mut().for_each(|v| *v = p.b_g[k] + p.b_f[k]);
        for c in 0..p.c_g {
            let w = p.w_g[k * p.c_g + c];
            row.iter_mut().zip(g_up.channel(c)).for_each(|(r, x)| *r += w * x);
        }
        for c in 0..p.c_f {
            let w = p.w_f[k * p.c_f + c];
            row.iter_mut().zip(f.channel(c)).for_each(|(r, x)| *r += w * x);
        }
    }
    let mut logit = vec![p.b_c; n];
    for k in 0..p.c_i {
        let w = p.w_c[k];
        logit.iter_mut().zip(&pre[k * n..(k + 1) * n]).for_each(|(l, q)| *l += w * relu(*q));
    }
    Ok(GateForward { g_up, pre, logit })
}

/// Per-voxel gate coefficients in (0, 1); `g` is given at half the resolution of `f`.
pub fn attention_coefficients(g: &FeatureMap, f: &FeatureMap, p: &GateParams) -> Result<FeatureMap> {
    let fw = gate_forward(g, f, p)?;
    Ok(FeatureMap { channels: 1, dims: f.dims, values: fw.logit.into_iter().map(sigmoid).collect() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateGradients {
    pub params: GateParams,
    pub g: FeatureMap,
    pub f: FeatureMap,
}

/// Vector–Jacobian product of [`attention_coefficients`] with `upstream` (dL/dα).
pub fn attention_backward(g: &FeatureMap, f: &FeatureMap, p: &GateParams, upstream: &FeatureMap) -> Result<GateGradients> {
    let fw = gate_forward(g, f, p)?;
    if upstream.channels != 1 {
        return Err(Error::InvalidArgument("upstream gradient must have one channel".into()));
    }
    check_dims(f.dims, upstream.dims)?;
    let n = f.voxels();
    let d_logit: Vec<f64> = fw
        .logit
        .iter()
        .zip(&upstream.values)
        .map(|(&z, &u)| {
            let s = sigmoid(z);
            u * s * (1.0 - s)
        })
        .collect();
    let mut gp = GateParams::zeros(p.c_g, p.c_f, p.c_i);
    gp.b_c = d_logit.iter().sum();
    let mut d_gup = vec![0.0; p.c_g * n];
    let mut d_f = vec![0.0; p.c_f * n];
    let mut d_pre = vec![0.0; n];
    for k in 0..p.c_i {
        let pre = &fw.pre[k * n..(k + 1) * n];
        let mut wc_grad = 0.0;
        for i in 0..n {
            wc_grad += d_logit[i] * relu(pre[i]);
            d_pre[i] = d_logit[i] * p.w_c[k] * relu_grad(pre[i]);
        }
        gp.w_c[k] = wc_grad;
        let s: f64 = d_pre.iter().sum();
        gp.b_g[k] = s;
        gp.b_f[k] = s;
        for c in 0..p.c_g {
            let x = fw.g_up.channel(c);
            gp.w_g[k * p.c_g + c] = d_pre.iter().zip(x).map(|(a, b)| a * b).sum();
            let w = p.w_g[k * p.c_g + c];
            d_gup[c * n..(c + 1) * n].iter_mut().zip(&d_pre).for_each(|(d, a)| *d += w * a);
        }
        for c in 0..p.c_f {
            let x = f.channel(c);
            gp.w_f[k * p.c_f + c] = d_pre.iter().zip(x).map(|(a, b)| a * b).sum();
            let w = p.w_f[k * p.c_f + c];
            d_f[c * n..(c + 1) * n].iter_mut().zip(&d_pre).for_each(|(d, a)| *d += w * a);
        }
    }
    let d_g = trilinear_upsample_adjoint(&FeatureMap { channels: p.c_g, dims: f.dims, values: d_gup }, g.dims, GATE_UPSAMPLE)?;
    Ok(GateGradients { params: gp, g: d_g, f: FeatureMap { channels: p.c_f, dims: f.dims, values: d_f } })
}

/// `f̂ = f ⊙ α`, with the single α channel broadcast over all channels of `f`.
pub fn apply_gate(f: &FeatureMap, alpha: &FeatureMap) -> Result<FeatureMap> {
    if alpha.channels != 1 {
        return Err(Error::InvalidArgument("gate coefficients must have one channel".into()));
    }
    check_dims(f.dims, alpha.dims)?;
    let n = f.voxels();
    let values = f.values.iter().enumerate().map(|(i, v)| v * alpha.values[i % n]).collect();
    Ok(FeatureMap { channels: f.channels, dims: f.dims, values })
}

/// Gradients of [`apply_gate`] with respect to `f` and `alpha`.
pub fn apply_gate_backward(f: &FeatureMap, alpha: &FeatureMap, upstream: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
    let d_f = apply_gate(upstream, alpha)?;
    check_dims(f.dims, upstream.dims)?;
    let n = f.voxels();
    let mut d_alpha = vec![0.0; n];
    for (i, (x, u)) in f.values.iter().zip(&upstream.values).enumerate() {
        d_alpha[i % n] += x * u;
    }
    Ok((d_f, FeatureMap { channels: 1, dims: f.dims, values: d_alpha }))
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-4;

/// Checks the analytic gradient of the scalar readout `s(θ) = ⟨probe, op(θ)⟩`
/// against central differences with step [`FD_STEP`].
///
/// `vjp(θ, probe)` must return `∂s/∂θ`. The result is the largest per-parameter
/// relative error `|a − n| / max(|a|, |n|)`; components where both are below
/// `1e-8 · max_j |a_j|` are treated as agreeing zeros.
pub fn grad_check<F, G>(op: F, vjp: G, params: &[f64], probe: &[f64]) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let readout = |theta: &[f64]| -> f64 {
        let out = op(theta);
        assert_eq!(out.len(), probe.len(), "probe length must match op output");
        out.iter().zip(probe).map(|(a, b)| a * b).sum()
    };
    let analytic = vjp(params, probe);
    assert_eq!(analytic.len(), params.len(), "vjp length must match parameter count");
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-8 * scale;
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        theta[k] = params[k] + FD_STEP;
        let plus = readout(&theta);
        theta[k] = params[k] - FD_STEP;
        let minus = readout(&theta);
        theta[k] = params[k];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[k];
        let denom = a.abs().max(numeric.abs());
        if denom <= floor || denom == 0.0 {
            continue;
        }
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
