//! Dense displacement fields and warping.
//!
//! A field stores one displacement vector per voxel in voxel units; warping
//! pulls values back: `out(x) = in(x + u(x))`, trilinear, clamp-to-edge.

use crate::error::{check_dims, Error, Result};
use crate::interp::Stencil;
use crate::volume::{one_hot, Grid, LabelMap, ProbVolume, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid,
    /// x, y, z components, each `grid.len()` long.
    pub components: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, components: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn constant(grid: Grid, v: [f64; 3]) -> Self {
        let n = grid.len();
        Self { grid, components: [vec![v[0]; n], vec![v[1]; n], vec![v[2]; n]] }
    }

    pub fn from_components(grid: Grid, components: [Vec<f64>; 3]) -> Result<Self> {
        for c in &components {
            if c.len() != grid.len() {
                return Err(Error::DataLength { expected: grid.len(), found: c.len() });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("displacement components must be finite".into()));
            }
        }
        Ok(Self { grid, components })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        [self.components[0][i], self.components[1][i], self.components[2][i]]
    }

    /// Sample position `x + u(x)` of voxel `i`.
    #[inline]
    pub fn target(&self, i: usize) -> [f64; 3] {
        let c = self.grid.coords(i);
        [
            c[0] as f64 + self.components[0][i],
            c[1] as f64 + self.components[1][i],
            c[2] as f64 + self.components[2][i],
        ]
    }

    /// Trilinear stencils at every voxel's sample position.
    pub(crate) fn stencils(&self) -> Vec<Stencil> {
        let dims = self.grid.dims;
        (0..self.grid.len()).map(|i| Stencil::new(self.target(i), dims)).collect()
    }

    pub(crate) fn fill_stencils(&self, out: &mut Vec<Stencil>) {
        let dims = self.grid.dims;
        out.clear();
        out.extend((0..self.grid.len()).map(|i| Stencil::new(self.target(i), dims)));
    }

    /// Mean Euclidean displacement length over the voxels where `mask` is set.
    pub fn mean_magnitude(&self, mask: Option<&[bool]>) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.grid.len() {
            if mask.map_or(true, |m| m[i]) {
                let v = self.at(i);
                sum += (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Mean displacement vector over the voxels where `mask` is set.
    pub fn mean_vector(&self, mask: &[bool]) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let v = self.at(i);
            for a in 0..3 {
                sum[a] += v[a];
            }
            n += 1;
        }
        sum.map(|s| if n == 0 { 0.0 } else { s / n as f64 })
    }
}

fn warp_channel(data: &[f64], stencils: &[Stencil]) -> Vec<f64> {
    stencils.iter().map(|s| s.value(data)).collect()
}

/// `out(x) = vol(x + ddf(x))`.
pub fn warp_scalar(vol: &Volume, ddf: &DisplacementField) -> Result<Volume> {
    check_dims(vol.grid.dims, ddf.grid.dims)?;
    let st = ddf.stencils();
    Ok(Volume { grid: vol.grid, data: warp_channel(&vol.data, &st) })
}

/// Channel-wise warp of a soft-label volume.
pub fn warp_prob(vol: &ProbVolume, ddf: &DisplacementField) -> Result<ProbVolume> {
    check_dims(vol.grid.dims, ddf.grid.dims)?;
    let st = ddf.stencils();
    Ok(ProbVolume {
        grid: vol.grid,
        label_set: vol.label_set.clone(),
        channels: vol.channels.iter().map(|c| warp_channel(c, &st)).collect(),
    })
}

/// Label warp through one-hot channels: argmax of the trilinearly warped
/// one-hot volume, ties to the lowest label.
pub fn warp_label(labels: &LabelMap, ddf: &DisplacementField) -> Result<LabelMap> {
    Ok(warp_prob(&one_hot(labels), ddf)?.argmax())
}

/// Label warp by nearest-neighbor lookup at `x + u(x)` (clamped to the
/// volume; halfway points round down).
pub fn warp_label_nearest(labels: &LabelMap, ddf: &DisplacementField) -> Result<LabelMap> {
    check_dims(labels.grid.dims, ddf.grid.dims)?;
    let g = labels.grid;
    let out = (0..g.len())
        .map(|i| {
            let p = ddf.target(i);
            let mut c = [0usize; 3];
            for a in 0..3 {
                let r = (p[a] - 0.5).ceil();
                c[a] = if r.is_nan() || r < 0.0 { 0 } else { (r as usize).min(g.dims[a] - 1) };
            }
            labels.labels[g.index(c[0], c[1], c[2])]
        })
        .collect();
    Ok(LabelMap { grid: g, labels: out, label_set: labels.label_set.clone() })
}

/// `out(x) = warped(x + back(x))`: samples an already-warped image through
/// the opposite field.
pub fn composed_sample(warped: &Volume, back_ddf: &DisplacementField) -> Result<Volume> {
    warp_scalar(warped, back_ddf)
}

/// Warps the atlas forward by `u` and back by `v`; equals the input when the
/// two fields are mutually inverse.
pub fn restore_roundtrip(atlas_img: &Volume, u: &DisplacementField, v: &DisplacementField) -> Result<Volume> {
    check_dims(u.grid.dims, v.grid.dims)?;
    composed_sample(&warp_scalar(atlas_img, u)?, v)
}

/// Mean absolute restoration residual `|restored - original|` over `mask`
/// (all voxels when `None`).
pub fn roundtrip_residual(atlas_img: &Volume, u: &DisplacementField, v: &DisplacementField, mask: Option<&[bool]>) -> Result<f64> {
    let restored = restore_roundtrip(atlas_img, u, v)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (r, o)) in restored.data.iter().zip(&atlas_img.data).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            sum += (r - o).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Analytic derivative of each output voxel of `warp_scalar` with respect to
/// that voxel's own displacement vector.
pub fn warp_scalar_jacobian(vol: &Volume, ddf: &DisplacementField) -> Result<Vec<[f64; 3]>> {
    check_dims(vol.grid.dims, ddf.grid.dims)?;
    Ok(ddf.stencils().iter().map(|s| s.gradient(&vol.data)).collect())
}

/// Interior mask: voxels at least `margin` voxels from every face.
pub fn interior_mask(grid: &Grid, margin: usize) -> Vec<bool> {
    (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            (0..3).all(|a| c[a] >= margin && c[a] + margin < grid.dims[a])
        })
        .collect()
}
