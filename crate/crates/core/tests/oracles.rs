//! Brute-force reference implementations checked against the fast paths.

use mas_core::fusion::{lwf_fuse, majority_vote};
use mas_core::metrics::{asd, dice_score, hausdorff, volume_difference};
use mas_core::similarity::{ground_truth_similarity, PatchSpec, SimilarityMap};
use mas_core::volume::{Grid, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(rng: &mut ChaCha8Rng, grid: Grid, set: &[i16]) -> LabelMap {
    let labels = (0..grid.len()).map(|_| set[rng.gen_range(0..set.len())]).collect();
    LabelMap::with_label_set(grid, labels, set.to_vec()).unwrap()
}

/// Random blob: a ball with random center and radius plus speckle.
fn random_blob(rng: &mut ChaCha8Rng, grid: Grid) -> LabelMap {
    let c: Vec<f64> = grid.dims.iter().map(|&n| rng.gen_range(0.0..n as f64)).collect();
    let r = rng.gen_range(1.0..5.0);
    let speckle = rng.gen_range(0.0..0.05);
    let labels = (0..grid.len())
        .map(|i| {
            let p = grid.coords(i);
            let d2: f64 = (0..3).map(|a| ((p[a] as f64 - c[a]) * grid.spacing[a]).powi(2)).sum();
            (d2 < r * r || rng.gen_bool(speckle)) as i16
        })
        .collect();
    LabelMap::with_label_set(grid, labels, vec![0, 1]).unwrap()
}

fn brute_w_gt(a: &LabelMap, b: &LabelMap, r: usize) -> Vec<f64> {
    let g = a.grid;
    let d = g.dims;
    (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            let (mut agree, mut total) = (0usize, 0usize);
            for z in c[2].saturating_sub(r)..=(c[2] + r).min(d[2] - 1) {
                for y in c[1].saturating_sub(r)..=(c[1] + r).min(d[1] - 1) {
                    for x in c[0].saturating_sub(r)..=(c[0] + r).min(d[0] - 1) {
                        let j = g.index(x, y, z);
                        agree += (a.labels[j] == b.labels[j]) as usize;
                        total += 1;
                    }
                }
            }
            agree as f64 / total as f64
        })
        .collect()
}

#[test]
fn ground_truth_similarity_matches_patch_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = Grid::unit([12, 12, 12]);
    for case in 0..20 {
        let a = random_labels(&mut rng, grid, &[0, 1, 2]);
        let b = random_labels(&mut rng, grid, &[0, 1, 2]);
        let r = [0, 1, 2][case % 3];
        let fast = ground_truth_similarity(&a, &b, PatchSpec::cube(r)).unwrap();
        assert_eq!(fast.values, brute_w_gt(&a, &b, r), "case {case}");
    }
}

#[test]
fn dice_and_volume_difference_match_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = Grid::new([9, 10, 11], [1.0, 1.5, 2.0], [0.0; 3]).unwrap();
    for _ in 0..20 {
        let a = random_labels(&mut rng, grid, &[0, 1, 2]);
        let b = random_labels(&mut rng, grid, &[0, 1, 2]);
        for l in [1, 2] {
            let inter = a.labels.iter().zip(&b.labels).filter(|(x, y)| **x == l && **y == l).count();
            let (na, nb) = (a.count(l), b.count(l));
            assert_eq!(dice_score(&a, &b, l).unwrap(), 100.0 * 2.0 * inter as f64 / (na + nb) as f64);
            let vd = (na as f64 - nb as f64).abs() * 3.0 / 1000.0;
            assert!((volume_difference(&a, &b, l).unwrap() - vd).abs() < 1e-15);
        }
    }
}

fn brute_surface(m: &LabelMap) -> Vec<[usize; 3]> {
    let g = m.grid;
    (0..g.len())
        .filter(|&i| m.labels[i] == 1)
        .map(|i| g.coords(i))
        .filter(|c| {
            (0..3).any(|a| {
                [-1i64, 1].iter().any(|&s| {
                    let mut n = [c[0] as i64, c[1] as i64, c[2] as i64];
                    n[a] += s;
                    if n.iter().zip(g.dims).any(|(&v, d)| v < 0 || v >= d as i64) {
                        return true;
                    }
                    m.labels[g.index(n[0] as usize, n[1] as usize, n[2] as usize)] != 1
                })
            })
        })
        .collect()
}

fn brute_directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[test]
fn surface_distances_match_all_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 30 {
        let dims = [rng.gen_range(3..=12), rng.gen_range(3..=12), rng.gen_range(3..=12)];
        let spacing = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
        let grid = Grid::new(dims, spacing, [0.0; 3]).unwrap();
        let a = random_blob(&mut rng, grid);
        let b = random_blob(&mut rng, grid);
        let (sa, sb) = (brute_surface(&a), brute_surface(&b));
        if sa.is_empty() || sb.is_empty() {
            continue;
        }
        let d: Vec<f64> = brute_directed(&sa, &sb, spacing).into_iter().chain(brute_directed(&sb, &sa, spacing)).collect();
        let want_asd = d.iter().sum::<f64>() / d.len() as f64;
        let want_hd = d.iter().fold(0.0f64, |m, &v| m.max(v));
        assert!((asd(&a, &b, 1).unwrap() - want_asd).abs() < 1e-9);
        assert!((hausdorff(&a, &b, 1).unwrap() - want_hd).abs() < 1e-9);
        checked += 1;
    }
}

#[test]
fn hausdorff_bounds_average_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = Grid::unit([12, 12, 12]);
    let mut checked = 0;
    while checked < 100 {
        let a = random_blob(&mut rng, grid);
        let b = random_blob(&mut rng, grid);
        if a.count(1) == 0 || b.count(1) == 0 {
            continue;
        }
        assert!(hausdorff(&a, &b, 1).unwrap() >= asd(&a, &b, 1).unwrap());
        checked += 1;
    }
}

fn brute_majority(maps: &[LabelMap]) -> Vec<i16> {
    let set = &maps[0].label_set;
    (0..maps[0].labels.len())
        .map(|x| {
            let mut best = (0usize, set[0]);
            for &l in set {
                let n = maps.iter().filter(|m| m.labels[x] == l).count();
                if n > best.0 {
                    best = (n, l);
                }
            }
            best.1
        })
        .collect()
}

#[test]
fn fusion_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = Grid::unit([6, 5, 4]);
    let set = [0, 1, 2];
    for _ in 0..20 {
        let maps: Vec<LabelMap> = (0..5).map(|_| random_labels(&mut rng, grid, &set)).collect();
        let mv = majority_vote(&maps).unwrap();
        assert_eq!(mv.labels, brute_majority(&maps));
        let w = rng.gen_range(0.0..=1.0);
        let constant: Vec<_> = maps.iter().map(|m| (m.clone(), SimilarityMap::constant(grid, w).unwrap())).collect();
        assert_eq!(lwf_fuse(&constant).unwrap(), mv);

        let weights = SimilarityMap::new(grid, (0..grid.len()).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
        assert_eq!(lwf_fuse(&[(maps[0].clone(), weights)]).unwrap(), maps[0]);
        assert_eq!(majority_vote(&maps[..1]).unwrap(), maps[0]);
    }
}

#[test]
fn fusion_is_order_and_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = Grid::unit([5, 5, 3]);
    let set = [0, 1, 2, 4];
    for _ in 0..20 {
        // dyadic weights keep every score sum exact, so reordering cannot flip a near-tie
        let inputs: Vec<(LabelMap, SimilarityMap)> = (0..4)
            .map(|_| {
                let w = (0..grid.len()).map(|_| rng.gen_range(0..=8) as f64 / 8.0).collect();
                (random_labels(&mut rng, grid, &set), SimilarityMap::new(grid, w).unwrap())
            })
            .collect();
        let fused = lwf_fuse(&inputs).unwrap();
        for x in 0..grid.len() {
            assert!(inputs.iter().any(|(l, _)| l.labels[x] == fused.labels[x]));
        }
        let mut reversed = inputs.clone();
        reversed.reverse();
        assert_eq!(lwf_fuse(&reversed).unwrap(), fused);
        let halved: Vec<_> = inputs
            .iter()
            .map(|(l, w)| (l.clone(), SimilarityMap::new(grid, w.values.iter().map(|v| v * 0.5).collect()).unwrap()))
            .collect();
        assert_eq!(lwf_fuse(&halved).unwrap(), fused);
    }
}
