use mas_core::metrics::roc_auc;
use mas_core::phantom::{generate_cohort, CohortConfig, Ellipsoid, PhantomConfig};
use mas_core::similarity::*;
use mas_core::volume::{center_align_translation, translate_labels};

/// Half-size anatomy on a 24³ grid.
fn small_base() -> PhantomConfig {
    let base = PhantomConfig::default();
    PhantomConfig {
        dims: [24; 3],
        shapes: base.shapes.iter().map(|s| Ellipsoid { label: s.label, center: [11.5; 3], radii: s.radii.map(|r| r / 2.0) }).collect(),
        ..base
    }
}

fn cohort_pairs(seed: u64, count: usize) -> Vec<SimilarityPair> {
    let cohort = generate_cohort(&CohortConfig { base: small_base(), atlases: count, targets: count, seed, ..Default::default() }).unwrap();
    cohort
        .atlases
        .iter()
        .zip(&cohort.targets)
        .map(|(a, t)| {
            let warped = translate_labels(&a.label, center_align_translation(&a.label, &t.label).unwrap());
            let w_gt = ground_truth_similarity(&warped, &t.label, PatchSpec::default()).unwrap();
            SimilarityPair { target_img: t.image.clone(), warped, w_gt }
        })
        .collect()
}

#[test]
fn trained_model_beats_the_zero_model_on_held_out_pairs() {
    let train = cohort_pairs(1, 3);
    let test = cohort_pairs(2, 2);
    let config = FeatureConfig::new(vec![0, 1, 2]);
    let (model, report) = train_similarity(&train, &config, &TrainConfig { iterations: 150, ..Default::default() }, 0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((report.loss_trace[0] - ln2).abs() < 1e-12);
    assert!(report.final_loss() < ln2);
    assert!(report.loss_trace.windows(2).all(|w| w[1] <= w[0]));

    let held_out = evaluate_model(&model, &test).unwrap();
    assert!(held_out < ln2, "held-out cross-entropy {held_out}");
    let (mut scores, mut positives) = (Vec::new(), Vec::new());
    for p in &test {
        let pred = predict_similarity(&model, &p.target_img, &p.warped).unwrap();
        assert!(pred.values.iter().all(|&v| v > 0.0 && v < 1.0));
        scores.extend(pred.values);
        positives.extend(p.w_gt.values.iter().map(|&w| w > 0.5));
    }
    let auc = roc_auc(&scores, &positives).unwrap();
    assert!(auc > 0.5, "AUC {auc}");
}

#[test]
fn identical_pairs_predict_high_similarity() {
    // warped label = gold label, so W_gt ≡ 1
    let identical = |seed| -> Vec<SimilarityPair> {
        let cohort = generate_cohort(&CohortConfig { base: small_base(), atlases: 0, targets: 2, seed, ..Default::default() }).unwrap();
        cohort
            .targets
            .into_iter()
            .map(|t| {
                let w_gt = ground_truth_similarity(&t.label, &t.label, PatchSpec::default()).unwrap();
                SimilarityPair { target_img: t.image, warped: t.label, w_gt }
            })
            .collect()
    };
    let config = FeatureConfig::new(vec![0, 1, 2]);
    let (model, _) = train_similarity(&identical(5), &config, &TrainConfig { iterations: 50, ..Default::default() }, 0).unwrap();
    for p in identical(6) {
        let pred = predict_similarity(&model, &p.target_img, &p.warped).unwrap();
        assert!(pred.mean() > 0.9, "mean prediction {}", pred.mean());
    }
}

#[test]
fn model_json_round_trip_preserves_predictions() {
    let train = cohort_pairs(4, 1);
    let config = FeatureConfig::new(vec![0, 1, 2]);
    let (model, _) = train_similarity(&train, &config, &TrainConfig { iterations: 20, ..Default::default() }, 0).unwrap();
    let back = SimilarityModel::from_json(&model.to_json()).unwrap();
    let p = &train[0];
    assert_eq!(
        predict_similarity(&model, &p.target_img, &p.warped).unwrap(),
        predict_similarity(&back, &p.target_img, &p.warped).unwrap()
    );
}
