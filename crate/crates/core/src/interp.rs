//! Clamp-to-edge trilinear sampling on a voxel grid.
//!
//! Coordinates are in voxel units, x-fastest layout. Samples outside
//! `[0, n-1]` on an axis are clamped to the edge voxel and have zero
//! derivative along that axis. Inside the domain the derivative uses the
//! right-continuous branch, so at an integer coordinate `i` it is
//! `f(i+1) - f(i)`.

/// Per-axis interpolation cell: lower index, fraction, and whether the
/// coordinate moves the sample (derivative is nonzero).
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisCell {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
    pub live: bool,
}

impl AxisCell {
    #[inline]
    pub fn new(c: f64, n: usize) -> Self {
        if n == 1 {
            return Self { lo: 0, hi: 0, t: 0.0, live: false };
        }
        let last = (n - 1) as f64;
        if !(c >= 0.0) {
            // also catches NaN
            Self { lo: 0, hi: 1, t: 0.0, live: false }
        } else if c >= last {
            Self { lo: n - 2, hi: n - 1, t: 1.0, live: false }
        } else {
            let lo = c.floor() as usize;
            Self { lo, hi: lo + 1, t: c - lo as f64, live: true }
        }
    }
}

/// Eight-corner stencil for one sample position, stored compactly: the
/// lower corner, the index step to the upper neighbor per axis (0 on
/// single-voxel axes), the fractions and the per-axis derivative scale.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    base: usize,
    step: [u32; 3],
    t: [f64; 3],
    /// 1 where the coordinate moves the sample, else 0.
    live: [f64; 3],
}

impl Stencil {
    #[inline]
    pub fn new(p: [f64; 3], dims: [usize; 3]) -> Self {
        let cells = [AxisCell::new(p[0], dims[0]), AxisCell::new(p[1], dims[1]), AxisCell::new(p[2], dims[2])];
        let strides = [1, dims[0], dims[0] * dims[1]];
        let mut base = 0;
        let mut step = [0u32; 3];
        let mut t = [0.0; 3];
        let mut live = [0.0; 3];
        for a in 0..3 {
            let c = cells[a];
            base += c.lo * strides[a];
            step[a] = ((c.hi - c.lo) * strides[a]) as u32;
            t[a] = c.t;
            live[a] = if c.live { 1.0 } else { 0.0 };
        }
        Self { base, step, t, live }
    }

    #[inline]
    fn corners(&self) -> [usize; 8] {
        let [sx, sy, sz] = self.step.map(|s| s as usize);
        let b = self.base;
        [b, b + sx, b + sy, b + sx + sy, b + sz, b + sx + sz, b + sy + sz, b + sx + sy + sz]
    }

    /// Corner weights in [`corners`](Self::corners) order (x fastest).
    #[inline]
    pub fn weights(&self) -> [f64; 8] {
        let [tx, ty, tz] = self.t;
        let (wx, wy, wz) = ([1.0 - tx, tx], [1.0 - ty, ty], [1.0 - tz, tz]);
        std::array::from_fn(|k| wx[k & 1] * wy[(k >> 1) & 1] * wz[k >> 2])
    }

    #[inline]
    fn fetch(&self, data: &[f64]) -> [f64; 8] {
        self.corners().map(|i| data[i])
    }

    #[inline]
    pub fn value(&self, data: &[f64]) -> f64 {
        let v = self.fetch(data);
        let w = self.weights();
        let mut acc = 0.0;
        for k in 0..8 {
            acc += w[k] * v[k];
        }
        acc
    }

    #[inline]
    pub fn gradient(&self, data: &[f64]) -> [f64; 3] {
        let v = self.fetch(data);
        let [tx, ty, tz] = self.t;
        // differences along x, then interpolate in y and z, etc.
        let dx = [v[1] - v[0], v[3] - v[2], v[5] - v[4], v[7] - v[6]];
        let gx = (1.0 - tz) * ((1.0 - ty) * dx[0] + ty * dx[1]) + tz * ((1.0 - ty) * dx[2] + ty * dx[3]);
        let dy = [v[2] - v[0], v[3] - v[1], v[6] - v[4], v[7] - v[5]];
        let gy = (1.0 - tz) * ((1.0 - tx) * dy[0] + tx * dy[1]) + tz * ((1.0 - tx) * dy[2] + tx * dy[3]);
        let dz = [v[4] - v[0], v[5] - v[1], v[6] - v[2], v[7] - v[3]];
        let gz = (1.0 - ty) * ((1.0 - tx) * dz[0] + tx * dz[1]) + ty * ((1.0 - tx) * dz[2] + tx * dz[3]);
        [gx * self.live[0], gy * self.live[1], gz * self.live[2]]
    }

    /// Adjoint of `value`: adds `upstream * w_k` into each corner.
    #[inline]
    pub fn scatter(&self, upstream: f64, out: &mut [f64]) {
        let w = self.weights();
        for (k, i) in self.corners().into_iter().enumerate() {
            out[i] += upstream * w[k];
        }
    }
}

#[inline]
pub(crate) fn sample(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    Stencil::new(p, dims).value(data)
}

#[inline]
pub(crate) fn voxel_coords(i: usize, dims: [usize; 3]) -> [usize; 3] {
    let x = i % dims[0];
    let r = i / dims[0];
    [x, r % dims[1], r / dims[1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Vec<f64> {
        (0..dims[0] * dims[1] * dims[2])
            .map(|i| {
                let [x, y, z] = voxel_coords(i, dims);
                x as f64 + 10.0 * y as f64 + 100.0 * z as f64
            })
            .collect()
    }

    #[test]
    fn reproduces_linear_functions_inside() {
        let dims = [4, 5, 3];
        let data = ramp(dims);
        let p = [1.25, 3.5, 0.75];
        let v = sample(&data, dims, p);
        assert!((v - (1.25 + 35.0 + 75.0)).abs() < 1e-12);
        let g = Stencil::new(p, dims).gradient(&data);
        assert_eq!(g, [1.0, 10.0, 100.0]);
    }

    #[test]
    fn clamps_outside_and_zeroes_derivative() {
        let dims = [4, 1, 1];
        let data = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(sample(&data, dims, [-2.0, 0.0, 0.0]), 0.0);
        assert_eq!(sample(&data, dims, [7.5, 0.0, 0.0]), 3.0);
        assert_eq!(Stencil::new([-0.5, 0.0, 0.0], dims).gradient(&data)[0], 0.0);
        assert_eq!(Stencil::new([3.0, 0.0, 0.0], dims).gradient(&data)[0], 0.0);
        // right-continuous branch at an interior integer
        assert_eq!(Stencil::new([2.0, 0.0, 0.0], dims).gradient(&data)[0], 1.0);
    }

    #[test]
    fn weights_sum_to_one() {
        let dims = [5, 6, 7];
        for p in [[0.3, 4.9, 2.2], [-1.0, 0.0, 10.0], [4.0, 5.0, 6.0]] {
            let s = Stencil::new(p, dims);
            let total: f64 = s.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-15);
        }
    }
}
