//! Scalar, label, and soft-label volumes plus the preprocessing steps
//! applied before registration (isotropic resampling, z-score
//! normalization, centroid alignment).

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::interp::{sample, voxel_coords};

/// Voxel grid geometry shared by every volume kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// mm per voxel along each axis.
    pub spacing: [f64; 3],
    /// Physical position of voxel (0,0,0) in mm.
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit-spacing grid at the origin.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self { dims, spacing: [1.0; 3], origin: [0.0; 3] }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        voxel_coords(i, self.dims)
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DataLength { expected: grid.len(), found: data.len() });
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { data: vec![0.0; grid.len()], grid }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { grid, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub labels: Vec<i16>,
    /// Sorted distinct labels, always containing background 0.
    pub label_set: Vec<i16>,
}

impl LabelMap {
    /// Builds a label map whose label set is the distinct labels present plus 0.
    pub fn new(grid: Grid, labels: Vec<i16>) -> Result<Self> {
        let label_set = derive_label_set(&labels, &[]);
        Self::with_label_set(grid, labels, label_set)
    }

    /// Builds a label map with an explicit label set (which may include
    /// labels absent from the data).
    pub fn with_label_set(grid: Grid, labels: Vec<i16>, label_set: Vec<i16>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::DataLength { expected: grid.len(), found: labels.len() });
        }
        let label_set = derive_label_set(&label_set, &[0]);
        if let Some(bad) = labels.iter().find(|l| label_set.binary_search(l).is_err()) {
            return Err(Error::InvalidArgument(format!("label {bad} not in label set {label_set:?}")));
        }
        Ok(Self { grid, labels, label_set })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> i16) -> Self {
        let labels: Vec<i16> = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        let label_set = derive_label_set(&labels, &[0]);
        Self { grid, labels, label_set }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    /// Index of `label` within the label set.
    pub fn channel_of(&self, label: i16) -> Option<usize> {
        self.label_set.binary_search(&label).ok()
    }

    pub fn count(&self, label: i16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Binary mask of voxels carrying `label`.
    pub fn mask(&self, label: i16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn foreground_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }
}

fn derive_label_set(labels: &[i16], extra: &[i16]) -> Vec<i16> {
    let mut set: Vec<i16> = labels.iter().chain(extra).copied().collect();
    set.push(0);
    set.sort_unstable();
    set.dedup();
    set
}

/// Soft labels: one probability channel per entry of `label_set`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    pub grid: Grid,
    pub label_set: Vec<i16>,
    pub channels: Vec<Vec<f64>>,
}

impl ProbVolume {
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    /// Per-voxel argmax; ties resolve to the lowest channel index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.grid.len();
        let mut labels = vec![0i16; n];
        for (i, out) in labels.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (c, ch) in self.channels.iter().enumerate() {
                if ch[i] > best_v {
                    best_v = ch[i];
                    best = c;
                }
            }
            *out = self.label_set[best];
        }
        LabelMap { grid: self.grid, labels, label_set: self.label_set.clone() }
    }
}

/// One channel per label in the map's label set.
pub fn one_hot(labels: &LabelMap) -> ProbVolume {
    let n = labels.grid.len();
    let mut channels = vec![vec![0.0; n]; labels.label_set.len()];
    for (i, l) in labels.labels.iter().enumerate() {
        let c = labels.channel_of(*l).expect("label map invariant: label in label set");
        channels[c][i] = 1.0;
    }
    ProbVolume { grid: labels.grid, label_set: labels.label_set.clone(), channels }
}

fn resampled_grid(grid: &Grid, target_spacing: f64) -> Result<Grid> {
    if !(target_spacing > 0.0) || !target_spacing.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let extent = (grid.dims[a] - 1) as f64 * grid.spacing[a];
        dims[a] = (extent / target_spacing + 1e-9).floor() as usize + 1;
    }
    Grid::new(dims, [target_spacing; 3], grid.origin)
}

/// Source index coordinate of output voxel `i` along axis `a`.
#[inline]
fn source_coord(i: usize, target_spacing: f64, source_spacing: f64) -> f64 {
    i as f64 * target_spacing / source_spacing
}

/// Resamples a scalar volume onto an isotropic grid by trilinear sampling.
pub fn resample_isotropic(vol: &Volume, target_spacing: f64) -> Result<Volume> {
    let grid = resampled_grid(&vol.grid, target_spacing)?;
    if grid == vol.grid {
        return Ok(vol.clone());
    }
    let src = vol.grid;
    Ok(Volume::from_fn(grid, |x, y, z| {
        let p = [
            source_coord(x, target_spacing, src.spacing[0]),
            source_coord(y, target_spacing, src.spacing[1]),
            source_coord(z, target_spacing, src.spacing[2]),
        ];
        sample(&vol.data, src.dims, p)
    }))
}

/// Nearest source index; an exact midpoint resolves to the lower index.
#[inline]
fn nearest_index(c: f64, n: usize) -> usize {
    let i = (c - 0.5).ceil().max(0.0) as usize;
    i.min(n - 1)
}

/// Resamples a label map onto an isotropic grid by nearest-neighbor lookup.
pub fn resample_labels_isotropic(labels: &LabelMap, target_spacing: f64) -> Result<LabelMap> {
    let grid = resampled_grid(&labels.grid, target_spacing)?;
    if grid == labels.grid {
        return Ok(labels.clone());
    }
    let src = labels.grid;
    let data = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            let sx = nearest_index(source_coord(x, target_spacing, src.spacing[0]), src.dims[0]);
            let sy = nearest_index(source_coord(y, target_spacing, src.spacing[1]), src.dims[1]);
            let sz = nearest_index(source_coord(z, target_spacing, src.spacing[2]), src.dims[2]);
            labels.labels[src.index(sx, sy, sz)]
        })
        .collect();
    LabelMap::with_label_set(grid, data, labels.label_set.clone())
}

/// Zero-mean, unit population-variance rescaling. A constant volume maps to zeros.
pub fn zscore_normalize(vol: &Volume) -> Volume {
    let n = vol.data.len() as f64;
    let mean = vol.data.iter().sum::<f64>() / n;
    let var = vol.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let data = if std > 0.0 && std.is_finite() {
        vol.data.iter().map(|v| (v - mean) / std).collect()
    } else {
        vec![0.0; vol.data.len()]
    };
    Volume { grid: vol.grid, data }
}

/// Physical centroid (mm) of all nonzero labels.
pub fn foreground_centroid(labels: &LabelMap) -> Result<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l != 0 {
            let c = labels.grid.coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion("label map has no foreground voxels".into()));
    }
    let g = &labels.grid;
    Ok(std::array::from_fn(|a| g.origin[a] + g.spacing[a] * sum[a] / count as f64))
}

/// Vector (mm) from the atlas foreground centroid to the target foreground centroid.
pub fn center_align_translation(atlas_label: &LabelMap, target_label: &LabelMap) -> Result<[f64; 3]> {
    let a = foreground_centroid(atlas_label)?;
    let t = foreground_centroid(target_label)?;
    Ok([t[0] - a[0], t[1] - a[1], t[2] - a[2]])
}

/// Moves image content by `offset_mm`: `out(x) = in(x - offset)`, trilinear, clamp-to-edge.
pub fn translate_volume(vol: &Volume, offset_mm: [f64; 3]) -> Volume {
    let g = vol.grid;
    let shift: [f64; 3] = std::array::from_fn(|a| offset_mm[a] / g.spacing[a]);
    Volume::from_fn(g, |x, y, z| {
        sample(&vol.data, g.dims, [x as f64 - shift[0], y as f64 - shift[1], z as f64 - shift[2]])
    })
}

/// Label counterpart of [`translate_volume`] using nearest-neighbor lookup.
pub fn translate_labels(labels: &LabelMap, offset_mm: [f64; 3]) -> LabelMap {
    let g = labels.grid;
    let shift: [f64; 3] = std::array::from_fn(|a| offset_mm[a] / g.spacing[a]);
    let data = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            let s: [usize; 3] = std::array::from_fn(|a| {
                let p = (c[a] as f64 - shift[a]).clamp(0.0, (g.dims[a] - 1) as f64);
                nearest_index(p, g.dims[a])
            });
            labels.labels[g.index(s[0], s[1], s[2])]
        })
        .collect();
    LabelMap { grid: g, labels: data, label_set: labels.label_set.clone() }
}

pub(crate) fn check_same_grid(a: &Grid, b: &Grid) -> Result<()> {
    check_dims(a.dims, b.dims)
}
