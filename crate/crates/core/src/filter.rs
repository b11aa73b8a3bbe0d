//! Separable Gaussian smoothing with border renormalization, and its adjoint.
//!
//! The kernel is truncated at radius `ceil(3σ)`; at each output voxel the
//! weights are divided by the sum of the in-bounds taps. `σ = 0` is the
//! identity.

use crate::interp::voxel_coords;

#[derive(Clone, Debug)]
struct AxisKernel {
    taps: Vec<f64>,
    /// 1 / (sum of in-bounds taps), per position along the axis.
    inv_norm: Vec<f64>,
}

impl AxisKernel {
    fn new(sigma: f64, n: usize) -> Self {
        let r = (3.0 * sigma).ceil() as usize;
        let taps: Vec<f64> = (0..=r)
            .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let inv_norm = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                let s: f64 = (lo..=hi).map(|m| taps[i.abs_diff(m)]).sum();
                1.0 / s
            })
            .collect();
        Self { taps, inv_norm }
    }
}

/// Reusable smoother for one grid shape and one σ.
#[derive(Clone, Debug)]
pub struct GaussianSmoother {
    dims: [usize; 3],
    sigma: f64,
    axes: Option<[AxisKernel; 3]>,
}

impl GaussianSmoother {
    pub fn new(dims: [usize; 3], sigma: f64) -> Self {
        assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be finite and non-negative");
        let axes = (sigma > 0.0).then(|| std::array::from_fn(|a| AxisKernel::new(sigma, dims[a])));
        Self { dims, sigma, axes }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn smooth(&self, src: &[f64]) -> Vec<f64> {
        let mut out = src.to_vec();
        self.smooth_in_place(&mut out, false);
        out
    }

    /// Adjoint of [`smooth`](Self::smooth): `<smooth(x), y> = <x, smooth_adjoint(y)>`.
    pub fn smooth_adjoint(&self, src: &[f64]) -> Vec<f64> {
        let mut out = src.to_vec();
        self.smooth_in_place(&mut out, true);
        out
    }

    fn smooth_in_place(&self, buf: &mut Vec<f64>, adjoint: bool) {
        let Some(axes) = &self.axes else { return };
        assert_eq!(buf.len(), self.dims.iter().product::<usize>());
        let mut tmp = vec![0.0; buf.len()];
        // The adjoint applies the axis passes in reverse order.
        let order: [usize; 3] = if adjoint { [2, 1, 0] } else { [0, 1, 2] };
        for a in order {
            let k = &axes[a];
            if adjoint {
                scale_along(buf, self.dims, a, &k.inv_norm);
            }
            convolve_axis(buf, &mut tmp, self.dims, a, &k.taps);
            std::mem::swap(buf, &mut tmp);
            if !adjoint {
                scale_along(buf, self.dims, a, &k.inv_norm);
            }
        }
    }
}

/// Multiplies every voxel by `factor[coord along axis]`.
fn scale_along(buf: &mut [f64], dims: [usize; 3], axis: usize, factor: &[f64]) {
    let [nx, ny, _] = dims;
    match axis {
        0 => {
            for row in buf.chunks_exact_mut(nx) {
                for (v, f) in row.iter_mut().zip(factor) {
                    *v *= f;
                }
            }
        }
        1 => {
            for (r, row) in buf.chunks_exact_mut(nx).enumerate() {
                let f = factor[r % ny];
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        _ => {
            for (s, slab) in buf.chunks_exact_mut(nx * ny).enumerate() {
                let f = factor[s];
                slab.iter_mut().for_each(|v| *v *= f);
            }
        }
    }
}

/// `dst = taps[0]·center + Σ_j taps[j]·(lower_j + upper_j)` over whole rows,
/// where an out-of-range neighbor row is skipped.
fn accumulate_rows(dst: &mut [f64], row: impl Fn(usize) -> usize, src: &[f64], len: usize, c: usize, n: usize, taps: &[f64]) {
    let center = &src[row(c)..row(c) + len];
    for (d, s) in dst.iter_mut().zip(center) {
        *d = taps[0] * s;
    }
    for (j, &w) in taps.iter().enumerate().skip(1) {
        let lo = (c >= j).then(|| row(c - j));
        let hi = (c + j < n).then(|| row(c + j));
        match (lo, hi) {
            (Some(a), Some(b)) => {
                for ((d, x), y) in dst.iter_mut().zip(&src[a..a + len]).zip(&src[b..b + len]) {
                    *d += w * (x + y);
                }
            }
            (Some(a), None) | (None, Some(a)) => {
                for (d, x) in dst.iter_mut().zip(&src[a..a + len]) {
                    *d += w * x;
                }
            }
            (None, None) => {}
        }
    }
}

/// Unnormalized truncated convolution along one axis.
fn convolve_axis(src: &[f64], dst: &mut [f64], dims: [usize; 3], axis: usize, taps: &[f64]) {
    let [nx, ny, nz] = dims;
    let r = taps.len() - 1;
    match axis {
        0 => {
            for (srow, drow) in src.chunks_exact(nx).zip(dst.chunks_exact_mut(nx)) {
                for (i, d) in drow.iter_mut().enumerate() {
                    let mut acc = taps[0] * srow[i];
                    if i >= r && i + r < nx {
                        for (j, &w) in taps.iter().enumerate().skip(1) {
                            acc += w * (srow[i - j] + srow[i + j]);
                        }
                    } else {
                        for (j, &w) in taps.iter().enumerate().skip(1) {
                            if i >= j {
                                acc += w * srow[i - j];
                            }
                            if i + j < nx {
                                acc += w * srow[i + j];
                            }
                        }
                    }
                    *d = acc;
                }
            }
        }
        1 => {
            let slab = nx * ny;
            for z in 0..nz {
                for y in 0..ny {
                    let drow = &mut dst[z * slab + y * nx..z * slab + (y + 1) * nx];
                    accumulate_rows(drow, |m| z * slab + m * nx, src, nx, y, ny, taps);
                }
            }
        }
        _ => {
            let slab = nx * ny;
            for z in 0..nz {
                let dslab = &mut dst[z * slab..(z + 1) * slab];
                accumulate_rows(dslab, |m| m * slab, src, slab, z, nz, taps);
            }
        }
    }
}

/// Mean over an axis-aligned box of half-widths `radius`, truncated at the
/// borders (divides by the true in-bounds count).
pub fn box_mean(src: &[f64], dims: [usize; 3], radius: [usize; 3]) -> Vec<f64> {
    if radius == [0; 3] {
        return src.to_vec();
    }
    let mut buf = src.to_vec();
    let mut tmp = vec![0.0; buf.len()];
    for a in 0..3 {
        if radius[a] == 0 {
            continue;
        }
        convolve_axis(&buf, &mut tmp, dims, a, &vec![1.0; radius[a] + 1]);
        std::mem::swap(&mut buf, &mut tmp);
    }
    for (i, v) in buf.iter_mut().enumerate() {
        *v /= box_count(voxel_coords(i, dims), dims, radius) as f64;
    }
    buf
}

/// Number of in-bounds voxels in the box of half-widths `radius` around `c`.
pub fn box_count(c: [usize; 3], dims: [usize; 3], radius: [usize; 3]) -> usize {
    (0..3)
        .map(|a| (c[a] + radius[a]).min(dims[a] - 1) - c[a].saturating_sub(radius[a]) + 1)
        .product()
}
