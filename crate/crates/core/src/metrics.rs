//! Segmentation metrics: Dice score, average symmetric surface distance,
//! Hausdorff distance, volume difference; plus ROC AUC for similarity maps.
//!
//! Surfaces are foreground voxels with at least one 6-connected neighbor
//! outside the mask (voxels on the volume boundary count as surface).
//! Surface distances are exact Euclidean distances in mm, computed with a
//! separable squared-distance transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_same_grid, Grid, LabelMap};

fn check_pair(a: &LabelMap, b: &LabelMap) -> Result<()> {
    check_same_grid(&a.grid, &b.grid)
}

fn dice_of_masks(a: impl Iterator<Item = bool>, b: impl Iterator<Item = bool>) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.zip(b) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        100.0
    } else {
        100.0 * 2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Dice score (%) of one label; 100 when the label is absent from both.
pub fn dice_score(a: &LabelMap, b: &LabelMap, label: i16) -> Result<f64> {
    check_pair(a, b)?;
    Ok(dice_of_masks(a.labels.iter().map(|&l| l == label), b.labels.iter().map(|&l| l == label)))
}

/// Dice score (%) of the union of all nonzero labels.
pub fn foreground_dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    check_pair(a, b)?;
    Ok(dice_of_masks(a.labels.iter().map(|&l| l != 0), b.labels.iter().map(|&l| l != 0)))
}

/// Volume difference in mL (1 mL = 1000 mm³).
pub fn volume_difference(a: &LabelMap, b: &LabelMap, label: i16) -> Result<f64> {
    check_pair(a, b)?;
    let diff = a.count(label).abs_diff(b.count(label));
    Ok(diff as f64 * a.grid.voxel_volume() / 1000.0)
}

/// Surface voxels of a binary mask.
pub fn surface(mask: &[bool], grid: &Grid) -> Vec<bool> {
    let [nx, ny, nz] = grid.dims;
    (0..mask.len())
        .map(|i| {
            if !mask[i] {
                return false;
            }
            let [x, y, z] = grid.coords(i);
            let outside = |cx: Option<usize>, cy: Option<usize>, cz: Option<usize>| match (cx, cy, cz) {
                (Some(cx), Some(cy), Some(cz)) if cx < nx && cy < ny && cz < nz => !mask[grid.index(cx, cy, cz)],
                _ => true,
            };
            outside(x.checked_sub(1), Some(y), Some(z))
                || outside(Some(x + 1), Some(y), Some(z))
                || outside(Some(x), y.checked_sub(1), Some(z))
                || outside(Some(x), Some(y + 1), Some(z))
                || outside(Some(x), Some(y), z.checked_sub(1))
                || outside(Some(x), Some(y), Some(z + 1))
        })
        .collect()
}

/// One-dimensional lower envelope of parabolas: `out[q] = min_p (x_q − x_p)² + f[p]`
/// with `x_i = i·h`. Infinite entries of `f` are excluded.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    let pos = |i: usize| i as f64 * h;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < pos(q) {
            j += 1;
        }
        let p = v[j];
        let d = pos(q) - pos(p);
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest set voxel.
pub fn squared_distance_transform(sites: &[bool], grid: &Grid) -> Vec<f64> {
    let dims = grid.dims;
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..d.len() {
            if grid.coords(start)[axis] != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[start + k * stride];
            }
            edt_1d(&line, grid.spacing[axis], &mut out);
            for (k, o) in out.iter().enumerate() {
                d[start + k * stride] = *o;
            }
        }
    }
    d
}

/// Distances (mm) from each surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(from: &[bool], to: &[bool], grid: &Grid) -> Vec<f64> {
    let dt = squared_distance_transform(to, grid);
    from.iter().zip(&dt).filter(|(s, _)| **s).map(|(_, d)| d.sqrt()).collect()
}

fn label_surfaces(a: &LabelMap, b: &LabelMap, label: i16) -> Result<(Vec<bool>, Vec<bool>)> {
    check_pair(a, b)?;
    let ma = a.mask(label);
    let mb = b.mask(label);
    if !ma.iter().any(|&m| m) || !mb.iter().any(|&m| m) {
        return Err(Error::EmptyRegion(format!("label {label} is absent from one of the masks")));
    }
    Ok((surface(&ma, &a.grid), surface(&mb, &b.grid)))
}

/// Average symmetric surface distance (mm).
pub fn asd(a: &LabelMap, b: &LabelMap, label: i16) -> Result<f64> {
    let (sa, sb) = label_surfaces(a, b, label)?;
    let dab = directed_surface_distances(&sa, &sb, &a.grid);
    let dba = directed_surface_distances(&sb, &sa, &a.grid);
    let total: f64 = dab.iter().chain(&dba).sum();
    Ok(total / (dab.len() + dba.len()) as f64)
}

/// Exact (100th percentile) symmetric Hausdorff distance between surfaces (mm).
pub fn hausdorff(a: &LabelMap, b: &LabelMap, label: i16) -> Result<f64> {
    let (sa, sb) = label_surfaces(a, b, label)?;
    let dab = directed_surface_distances(&sa, &sb, &a.grid);
    let dba = directed_surface_distances(&sb, &sa, &a.grid);
    Ok(dab.iter().chain(&dba).fold(0.0, |m, &d| m.max(d)))
}

/// Metrics of one structure in one case. Surface metrics are `None` when the
/// structure is missing from either segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case: String,
    pub label: i16,
    pub ds: f64,
    pub asd: Option<f64>,
    pub hd: Option<f64>,
    pub vd: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Evaluates every nonzero label of the gold standard.
    pub fn evaluate(case: &str, pred: &LabelMap, gold: &LabelMap) -> Result<Self> {
        check_pair(pred, gold)?;
        let mut rows = Vec::new();
        for &label in gold.label_set.iter().filter(|&&l| l != 0) {
            rows.push(MetricRow {
                case: case.to_string(),
                label,
                ds: dice_score(pred, gold, label)?,
                asd: asd(pred, gold, label).ok(),
                hd: hausdorff(pred, gold, label).ok(),
                vd: volume_difference(pred, gold, label)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn mean_ds(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.ds).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("case,label,ds,asd_mm,hd_mm,vd_ml\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{},{},{:.6}\n", r.case, r.label, r.ds, fmt(r.asd), fmt(r.hd), r.vd));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Area under the ROC curve of `scores` against binary `positives`
/// (Mann–Whitney statistic, ties count half). `None` if either class is empty.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Sum of (average) ranks of positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| positives[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(grid: Grid, lo: [usize; 3], hi: [usize; 3]) -> LabelMap {
        LabelMap::from_fn(grid, |x, y, z| {
            let c = [x, y, z];
            (0..3).all(|a| c[a] >= lo[a] && c[a] < hi[a]) as i16
        })
    }

    #[test]
    fn dice_cases() {
        let g = Grid::unit([8, 8, 8]);
        let a = boxed(g, [0, 0, 0], [4, 4, 4]);
        let b = boxed(g, [2, 0, 0], [6, 4, 4]);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 100.0);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 50.0);
        assert_eq!(dice_score(&a, &boxed(g, [5, 5, 5], [8, 8, 8]), 1).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &b, 3).unwrap(), 100.0);
    }

    #[test]
    fn point_masks_distance() {
        let g = Grid::unit([8, 3, 3]);
        let a = boxed(g, [1, 1, 1], [2, 2, 2]);
        let b = boxed(g, [4, 1, 1], [5, 2, 2]);
        assert!((asd(&a, &b, 1).unwrap() - 3.0).abs() < 1e-12);
        assert!((hausdorff(&a, &b, 1).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(asd(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn offset_unit_cubes_hausdorff() {
        let g = Grid::unit([6, 2, 2]);
        let a = boxed(g, [0, 0, 0], [1, 1, 1]);
        let b = boxed(g, [2, 0, 0], [3, 1, 1]);
        assert!((hausdorff(&a, &b, 1).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn anisotropic_spacing_in_mm() {
        let g = Grid::new([1, 1, 6], [1.0, 1.0, 2.5], [0.0; 3]).unwrap();
        let a = boxed(g, [0, 0, 0], [1, 1, 1]);
        let b = boxed(g, [0, 0, 4], [1, 1, 5]);
        assert!((hausdorff(&a, &b, 1).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_errors() {
        let g = Grid::unit([3, 3, 3]);
        let a = boxed(g, [0, 0, 0], [1, 1, 1]);
        let e = LabelMap::with_label_set(g, vec![0; 27], vec![0, 1]).unwrap();
        assert!(matches!(asd(&a, &e, 1), Err(Error::EmptyRegion(_))));
        assert!(matches!(hausdorff(&e, &a, 1), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn volume_difference_units() {
        let g = Grid::new([10, 10, 15], [1.0; 3], [0.0; 3]).unwrap();
        let a = boxed(g, [0, 0, 0], [10, 10, 10]);
        let b = boxed(g, [0, 0, 0], [10, 10, 15]);
        assert!((volume_difference(&a, &b, 1).unwrap() - 0.5).abs() < 1e-12);
        let g2 = Grid::new([10, 15, 1], [2.0; 3], [0.0; 3]).unwrap();
        let a = boxed(g2, [0, 0, 0], [10, 10, 1]);
        let b = boxed(g2, [0, 0, 0], [10, 15, 1]);
        assert!((volume_difference(&a, &b, 1).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn auc_perfect_random_and_ties() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]), Some(0.0));
        assert_eq!(roc_auc(&[0.3], &[true]), None);
    }

    #[test]
    fn csv_layout() {
        let g = Grid::unit([4, 4, 4]);
        let a = boxed(g, [0, 0, 0], [2, 2, 2]);
        let r = MetricReport::evaluate("c0", &a, &a).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("case,label,ds,asd_mm,hd_mm,vd_ml\nc0,1,100.000000,0.000000,0.000000,0.000000\n"));
    }
}
