//! Label fusion of warped atlas labels.
//!
//! Both rules pick, per voxel, the label with the highest score. Weighted
//! ties are broken by the unweighted vote count, remaining ties go to the
//! lowest label value. So LWF with constant weights is exactly majority
//! voting, and a single atlas passes through even where its weight is 0.

use crate::error::{check_dims, Error, Result};
use crate::similarity::SimilarityMap;
use crate::volume::LabelMap;

fn common_label_set<'a>(maps: impl Iterator<Item = &'a LabelMap>) -> Result<(Vec<i16>, [usize; 3])> {
    let mut it = maps.peekable();
    let first = it.peek().ok_or_else(|| Error::InvalidArgument("fusion needs at least one atlas".into()))?;
    let set = first.label_set.clone();
    let dims = first.grid.dims;
    for m in it {
        check_dims(dims, m.grid.dims)?;
        if m.label_set != set {
            return Err(Error::LabelSetMismatch(set, m.label_set.clone()));
        }
    }
    Ok((set, dims))
}

/// Lookup from label value to channel index (labels are i16).
fn channel_table(set: &[i16]) -> Vec<u16> {
    let mut table = vec![u16::MAX; 1 << 16];
    for (c, &l) in set.iter().enumerate() {
        table[(l as i32 + 32768) as usize] = c as u16;
    }
    table
}

#[inline]
fn channel(table: &[u16], l: i16) -> usize {
    table[(l as i32 + 32768) as usize] as usize
}

fn argmax_low(scores: &[f64], counts: &[u32]) -> usize {
    let mut best = 0;
    for c in 1..scores.len() {
        if scores[c] > scores[best] || (scores[c] == scores[best] && counts[c] > counts[best]) {
            best = c;
        }
    }
    best
}

/// Locally weighted fusion: `argmax_l Σ_i W_i(x)·[L_i(x) = l]`.
pub fn lwf_fuse(inputs: &[(LabelMap, SimilarityMap)]) -> Result<LabelMap> {
    let (set, dims) = common_label_set(inputs.iter().map(|(l, _)| l))?;
    for (_, w) in inputs {
        check_dims(dims, w.grid.dims)?;
        if w.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("similarity weights must lie in [0, 1]".into()));
        }
    }
    let table = channel_table(&set);
    let n = inputs[0].0.labels.len();
    let mut scores = vec![0.0; set.len()];
    let mut counts = vec![0u32; set.len()];
    let labels = (0..n)
        .map(|x| {
            scores.iter_mut().for_each(|s| *s = 0.0);
            counts.iter_mut().for_each(|c| *c = 0);
            for (l, w) in inputs {
                let c = channel(&table, l.labels[x]);
                scores[c] += w.values[x];
                counts[c] += 1;
            }
            set[argmax_low(&scores, &counts)]
        })
        .collect();
    Ok(LabelMap { grid: inputs[0].0.grid, labels, label_set: set })
}

/// Per-voxel mode of the atlas labels.
pub fn majority_vote(labels: &[LabelMap]) -> Result<LabelMap> {
    let (set, _) = common_label_set(labels.iter())?;
    let table = channel_table(&set);
    let n = labels[0].labels.len();
    let mut counts = vec![0u32; set.len()];
    let out = (0..n)
        .map(|x| {
            counts.iter_mut().for_each(|c| *c = 0);
            for l in labels {
                counts[channel(&table, l.labels[x])] += 1;
            }
            let mut best = 0;
            for c in 1..counts.len() {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            set[best]
        })
        .collect();
    Ok(LabelMap { grid: labels[0].grid, labels: out, label_set: set })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn line(labels: Vec<i16>, set: Vec<i16>) -> LabelMap {
        let g = Grid::unit([labels.len(), 1, 1]);
        LabelMap::with_label_set(g, labels, set).unwrap()
    }

    fn weights(values: Vec<f64>) -> SimilarityMap {
        SimilarityMap::new(Grid::unit([values.len(), 1, 1]), values).unwrap()
    }

    #[test]
    fn weighted_vote_prefers_heavier_atlas() {
        let set = vec![0, 1, 2];
        let fused = lwf_fuse(&[
            (line(vec![1], set.clone()), weights(vec![0.8])),
            (line(vec![2], set.clone()), weights(vec![0.3])),
        ])
        .unwrap();
        assert_eq!(fused.labels, vec![1]);
    }

    #[test]
    fn single_atlas_passes_through() {
        let l = line(vec![0, 2, 1, 2], vec![0, 1, 2]);
        let fused = lwf_fuse(&[(l.clone(), weights(vec![0.2, 0.9, 0.01, 1.0]))]).unwrap();
        assert_eq!(fused, l);
    }

    #[test]
    fn zero_weight_single_atlas_passes_through() {
        let l = line(vec![2, 1, 0], vec![0, 1, 2]);
        let fused = lwf_fuse(&[(l.clone(), weights(vec![0.0, 0.0, 0.0]))]).unwrap();
        assert_eq!(fused, l);
    }

    #[test]
    fn weighted_tie_falls_back_to_votes() {
        let set = vec![0, 1, 2];
        // label 2: 0.5 + 0.5, label 1: 1.0 -> tie on weight, label 2 has more votes
        let fused = lwf_fuse(&[
            (line(vec![2], set.clone()), weights(vec![0.5])),
            (line(vec![2], set.clone()), weights(vec![0.5])),
            (line(vec![1], set.clone()), weights(vec![1.0])),
        ])
        .unwrap();
        assert_eq!(fused.labels, vec![2]);
    }

    #[test]
    fn majority_with_tie_rule() {
        let set = vec![0, 1, 2];
        let maps = vec![line(vec![1, 1], set.clone()), line(vec![1, 2], set.clone()), line(vec![2, 1], set.clone())];
        assert_eq!(majority_vote(&maps).unwrap().labels, vec![1, 1]);
        let tie = vec![line(vec![2], set.clone()), line(vec![1], set)];
        assert_eq!(majority_vote(&tie).unwrap().labels, vec![1]);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(majority_vote(&[]).is_err());
        assert!(lwf_fuse(&[]).is_err());
        let a = line(vec![0, 1], vec![0, 1]);
        let b = line(vec![0, 1, 1], vec![0, 1]);
        assert!(matches!(majority_vote(&[a, b]), Err(Error::DimMismatch { .. })));
    }
}
