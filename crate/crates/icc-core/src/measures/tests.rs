use super::*;
use crate::store::{ActivationDataset, LabelHierarchy, LayerBlock, LayerKind};
use approx::assert_abs_diff_eq;
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

fn dataset(
    layers: Vec<Array2<f64>>,
    class_of: Vec<i64>,
    hierarchy: Option<(Vec<i64>, Vec<i64>)>,
) -> ActivationDataset {
    let labels = match hierarchy {
        Some((sub, map)) => LabelHierarchy::from_raw(class_of, Some(sub), Some(map)).unwrap(),
        None => LabelHierarchy::from_raw(class_of, None, None).unwrap(),
    };
    let blocks = layers
        .into_iter()
        .enumerate()
        .map(|(i, preacts)| LayerBlock {
            name: format!("h{i}"),
            layer_index: i,
            kind: LayerKind::Dense,
            preacts,
            neuron_offset: 0,
        })
        .collect();
    ActivationDataset::new(blocks, labels, "test".into(), None, BTreeMap::new()).unwrap()
}

#[test]
fn top_k_mean_examples() {
    assert_eq!(top_k_mean(&[3.0, 1.0, 2.0], 1).unwrap(), (3.0, false));
    assert_eq!(top_k_mean(&[3.0, 1.0, 2.0], 3).unwrap(), (2.0, false));
    // k beyond the length clamps and flags.
    assert_eq!(top_k_mean(&[3.0, 1.0, 2.0], 5).unwrap(), (2.0, true));
    assert!(matches!(top_k_mean(&[], 1).unwrap_err(), MeasureError::EmptyValues));
    assert!(matches!(top_k_mean(&[1.0], 0).unwrap_err(), MeasureError::InvalidConfig { .. }));
}

#[test]
fn top_k_mean_matches_sort_oracle_and_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values: Vec<f64> = (0..100).map(|_| rng.random_range(-50.0..50.0)).collect();
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut last = f64::INFINITY;
    for k in 1..=100 {
        let (got, clamped) = top_k_mean(&values, k).unwrap();
        let want = sorted[..k].iter().sum::<f64>() / k as f64;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        assert!(!clamped);
        assert!(got <= last + 1e-12, "top-k mean must not increase with k");
        last = got;
    }
}

#[test]
fn selectivity_hand_values() {
    // Subclass values {2,4} (mu 3, sd 1), complement {0,2} (mu 1, sd 1).
    let neuron = [2.0, 4.0, 0.0, 2.0];
    let (v, degen) = neuron_subclass_selectivity(&neuron, &[0, 1], &[0, 1, 2, 3], 0.0).unwrap();
    assert_eq!(v, 1.0);
    assert!(!degen);

    // Zero variance on both sides: epsilon-dominated large value, flagged.
    let neuron = [1.0, 1.0, -1.0, -1.0];
    let (v, degen) = neuron_subclass_selectivity(&neuron, &[0, 1], &[0, 1, 2, 3], 1e-12).unwrap();
    assert_eq!(v, 2e12);
    assert!(degen);

    // Identical distributions on both sides.
    let neuron = [5.0, 7.0, 5.0, 7.0];
    let (v, _) = neuron_subclass_selectivity(&neuron, &[0, 1], &[0, 1, 2, 3], 0.0).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn selectivity_input_validation() {
    let neuron = [1.0, 2.0, 3.0, 4.0];
    assert!(matches!(
        neuron_subclass_selectivity(&neuron, &[0], &[0, 1, 2, 3], 0.0).unwrap_err(),
        MeasureError::TooFewSamples { what: "subclass", .. }
    ));
    assert!(matches!(
        neuron_subclass_selectivity(&neuron, &[0, 1, 2], &[0, 1, 2, 3], 0.0).unwrap_err(),
        MeasureError::TooFewSamples { what: "superclass complement", .. }
    ));
    // Subclass not contained in superclass.
    assert!(matches!(
        neuron_subclass_selectivity(&neuron, &[0, 1], &[1, 2, 3], 0.0).unwrap_err(),
        MeasureError::BadIndexSet { .. }
    ));
    assert!(matches!(
        neuron_subclass_selectivity(&neuron, &[0, 9], &[0, 1, 2, 9], 0.0).unwrap_err(),
        MeasureError::BadIndexSet { .. }
    ));
}

#[test]
fn variance_ratio_is_exactly_2_47_on_engineered_dataset() {
    // Class deviations +-247 (sd exactly 247); the remaining samples are
    // chosen so the dataset's squared deviations sum to 130000 over 13
    // samples, i.e. sd exactly 100. 247/100 rounds to the literal 2.47.
    let neuron = [
        -247.0, 247.0, -62.0, 62.0, -11.0, 11.0, -5.0, 5.0, -1.0, 1.0, 0.0, 0.0, 0.0,
    ];
    let all: Vec<usize> = (0..13).collect();
    let (ratio, degen) = neuron_variance_ratio(&neuron, &[0, 1], &all, 0.0).unwrap();
    assert_eq!(ratio, 2.47);
    assert!(!degen);
}

#[test]
fn variance_ratio_trivial_cases() {
    let neuron = [0.0, 2.0, 1.0, 1.0];
    let all: Vec<usize> = (0..4).collect();
    // Class = whole dataset -> ratio exactly 1.
    let (v, _) = neuron_variance_ratio(&neuron, &all, &all, 0.0).unwrap();
    assert_eq!(v, 1.0);
    // Constant neuron -> 0 with the degenerate flag.
    let constant = [3.0; 4];
    let (v, degen) = neuron_variance_ratio(&constant, &[0, 1], &all, 1e-12).unwrap();
    assert_eq!(v, 0.0);
    assert!(degen);
    assert!(matches!(
        neuron_variance_ratio(&neuron, &[0], &all, 0.0).unwrap_err(),
        MeasureError::TooFewSamples { .. }
    ));
}

fn block_of(preacts: Array2<f64>) -> LayerBlock {
    LayerBlock {
        name: "h0".into(),
        layer_index: 0,
        kind: LayerKind::Dense,
        preacts,
        neuron_offset: 0,
    }
}

#[test]
fn standardize_activates_exact_fraction() {
    let preacts = array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [7.0], [8.0]];
    let out = standardize_neurons(&block_of(preacts), 0.25);
    assert!(out.degenerate_neurons.is_empty());
    let positives: Vec<usize> =
        (0..8).filter(|&s| out.matrix[[s, 0]] > 0.0).collect();
    assert_eq!(positives, vec![6, 7], "exactly the top quarter activates");
}

#[test]
fn standardize_cancels_affine_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let preacts = Array2::from_shape_fn((20, 3), |_| rng.random_range(-2.0..2.0));
    let mut transformed = preacts.clone();
    for (j, (a, b)) in [(3.0, 1.0), (0.02, -7.0), (40.0, 0.25)].iter().enumerate() {
        transformed.column_mut(j).mapv_inplace(|x| a * x + b);
    }
    let base = standardize_neurons(&block_of(preacts), 0.25);
    let moved = standardize_neurons(&block_of(transformed), 0.25);
    for (x, y) in base.matrix.iter().zip(moved.matrix.iter()) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
}

#[test]
fn standardize_flags_constant_neurons() {
    let preacts = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [4.0, 5.0]];
    let out = standardize_neurons(&block_of(preacts), 0.25);
    assert_eq!(out.degenerate_neurons, vec![1]);
    assert!(out.matrix.column(1).iter().all(|&v| v == 0.0));
}

/// 2 superclasses x 2 subclasses x `n` samples; neuron j fires +1 on
/// subclass j and -1 elsewhere, with Gaussian noise of scale `noise[j]`.
fn selective_dataset(n: usize, noise: [f64; 4], seed: u64) -> ActivationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = 4 * n;
    let sub_of: Vec<i64> = (0..total).map(|s| (s / n) as i64).collect();
    let class_of: Vec<i64> = sub_of.iter().map(|&sc| sc / 2).collect();
    let preacts = Array2::from_shape_fn((total, 4), |(s, j)| {
        let base = if sub_of[s] as usize == j { 1.0 } else { -1.0 };
        base + noise[j] * rng.sample::<f64, _>(StandardNormal)
    });
    dataset(vec![preacts], class_of, Some((sub_of, vec![0, 0, 1, 1])))
}

#[test]
fn c1_on_engineered_selective_neurons() {
    let ds = selective_dataset(10, [0.1; 4], 3);
    let cfg = MeasureConfig { k_neuron: 1, ..Default::default() };
    let m = compute_c1(&ds, &cfg).unwrap();
    // Analytically (mu 1 vs -1, both stds 0.1): 2 / 0.2 = 10, up to
    // sampling noise in the empirical stds.
    assert!(m.value > 6.0 && m.value < 15.0, "c1 = {}", m.value);
    assert!(!m.degenerate && !m.unreliable);
    assert!(m.warnings.is_empty(), "{:?}", m.warnings);
}

#[test]
fn c1_is_zero_on_constant_preacts() {
    let preacts = Array2::from_elem((12, 3), 0.75);
    let ds = dataset(
        vec![preacts],
        vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1],
        Some((vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3], vec![0, 0, 1, 1])),
    );
    let m = compute_c1(&ds, &MeasureConfig::default()).unwrap();
    assert_eq!(m.value, 0.0);
    assert!(m.degenerate, "zero-variance denominators must be flagged");
}

#[test]
fn c1_median_averages_middle_pair() {
    // Four subclasses with different noise scales give four distinct
    // per-subclass top selectivities; the median must average the middle
    // two, which we can read off the selectivity distribution.
    let ds = selective_dataset(12, [0.05, 0.1, 0.2, 0.4], 5);
    let cfg = MeasureConfig { k_neuron: 1, ..Default::default() };
    let m = compute_c1(&ds, &cfg).unwrap();
    let mut tops: Vec<f64> = selectivity_distribution(&ds, &cfg)
        .unwrap()
        .iter()
        .map(|e| e.selectivity)
        .collect();
    tops.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(m.value, 0.5 * (tops[1] + tops[2]));
}

#[test]
fn c1_skips_tiny_subclasses_and_flags_unreliable() {
    // Subclass 3 has a single sample: skipped, 1/4 = 25% > 20%.
    let sub_of = vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 3];
    let class_of: Vec<i64> = sub_of.iter().map(|&s| s / 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preacts = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
    let ds = dataset(vec![preacts], class_of, Some((sub_of, vec![0, 0, 1, 1])));
    let m = compute_c1(&ds, &MeasureConfig::default()).unwrap();
    assert!(m.unreliable);
    assert!(m.warnings.iter().any(|w| w.contains("subclass 3")), "{:?}", m.warnings);
}

#[test]
fn c1_requires_hierarchy() {
    let ds = dataset(vec![Array2::zeros((4, 2))], vec![0, 0, 1, 1], None);
    assert!(matches!(
        compute_c1(&ds, &MeasureConfig::default()).unwrap_err(),
        MeasureError::MissingHierarchy { measure: "c1" }
    ));
}

/// Each subclass sits on its own coordinate axis: perfect clusters.
fn one_hot_dataset(per_sub: usize) -> ActivationDataset {
    let total = 4 * per_sub;
    let sub_of: Vec<i64> = (0..total).map(|s| (s / per_sub) as i64).collect();
    let class_of: Vec<i64> = sub_of.iter().map(|&sc| sc / 2).collect();
    let preacts = Array2::from_shape_fn((total, 4), |(s, j)| {
        if sub_of[s] as usize == j {
            1.0
        } else {
            0.0
        }
    });
    dataset(vec![preacts], class_of, Some((sub_of, vec![0, 0, 1, 1])))
}

#[test]
fn c2_is_one_for_one_hot_subclasses() {
    let ds = one_hot_dataset(3);
    let cfg = MeasureConfig { k_layer: 1, ..Default::default() };
    let m = compute_c2(&ds, &cfg).unwrap();
    assert_eq!(m.value, 1.0);
    assert!(!m.unreliable);
}

#[test]
fn c2_is_zero_when_all_samples_coincide() {
    let total = 12;
    let sub_of: Vec<i64> = (0..total).map(|s| (s / 3) as i64).collect();
    let class_of: Vec<i64> = sub_of.iter().map(|&sc| sc / 2).collect();
    // Identical axis-aligned rows: every pairwise distance is exactly 0.
    let mut preacts = Array2::zeros((total, 4));
    preacts.column_mut(0).fill(3.0);
    let ds = dataset(vec![preacts], class_of, Some((sub_of, vec![0, 0, 1, 1])));
    let cfg = MeasureConfig { k_layer: 1, ..Default::default() };
    assert_eq!(compute_c2(&ds, &cfg).unwrap().value, 0.0);
}

#[test]
fn c2_skips_single_subclass_superclasses() {
    // Superclass 1 has one subclass; its silhouette is undefined.
    let sub_of = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
    let class_of = vec![0, 0, 0, 0, 0, 0, 1, 1, 1];
    let preacts = Array2::from_shape_fn((9, 3), |(s, j)| ((s * 3 + j) % 5) as f64 + 1.0);
    let ds = dataset(vec![preacts], class_of, Some((sub_of, vec![0, 0, 1])));
    let cfg = MeasureConfig { k_layer: 1, ..Default::default() };
    let m = compute_c2(&ds, &cfg).unwrap();
    assert!(m.warnings.iter().any(|w| w.contains("single subclass")), "{:?}", m.warnings);
    assert!(m.unreliable, "1 of 3 subclasses skipped is over 20%");

    // Every superclass single-subclass: nothing left to aggregate.
    let sub_of = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let class_of = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let preacts = Array2::from_shape_fn((8, 3), |(s, j)| (s + j) as f64);
    let ds = dataset(vec![preacts], class_of, Some((sub_of, vec![0, 1])));
    assert!(matches!(
        compute_c2(&ds, &cfg).unwrap_err(),
        MeasureError::NoUsableSubclasses { measure: "c2" }
    ));
}

#[test]
fn c3_matches_hand_computation() {
    // One neuron, class A = {0,2} (sd 1), class B = {1,1} (sd 0),
    // dataset sd = sqrt(0.5).
    let preacts = array![[0.0], [2.0], [1.0], [1.0]];
    let ds = dataset(vec![preacts], vec![0, 0, 1, 1], None);
    let cfg = MeasureConfig { k_neuron: 1, epsilon: 0.0, ..Default::default() };
    let m = compute_c3(&ds, &cfg).unwrap();
    let expected = (1.0 / 0.5f64.sqrt() + 0.0) / 2.0;
    assert_abs_diff_eq!(m.value, expected, epsilon = 1e-15);
}

#[test]
fn c3_is_zero_when_classes_collapse() {
    // Every neuron constant within each class, offsets differ by class.
    let class_of = vec![0, 0, 0, 1, 1, 1];
    let preacts = Array2::from_shape_fn((6, 4), |(s, j)| {
        let class = s / 3;
        (class as f64 + 1.0) * (j as f64 + 2.0)
    });
    let ds = dataset(vec![preacts], class_of, None);
    let m = compute_c3(&ds, &MeasureConfig::default()).unwrap();
    assert_eq!(m.value, 0.0);
}

#[test]
fn c3_rejects_tiny_classes() {
    let preacts = Array2::zeros((4, 2));
    let ds = dataset(vec![preacts], vec![0, 1, 1, 1], None);
    assert!(matches!(
        compute_c3(&ds, &MeasureConfig::default()).unwrap_err(),
        MeasureError::ClassTooSmall { class: 0, got: 1, need: 2 }
    ));
}

#[test]
fn c4_is_zero_when_classes_collapse_to_points() {
    let class_of = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
    let preacts = Array2::from_shape_fn((9, 5), |(s, j)| {
        let class = s / 3;
        (class as f64 + 1.0) * (j as f64 + 2.0) * 0.5
    });
    let ds = dataset(vec![preacts.clone(), preacts], class_of, None);
    let cfg = MeasureConfig { k_layer: 1, ..Default::default() };
    let m = compute_c4(&ds, &cfg).unwrap();
    assert_eq!(m.value, 0.0);
}

#[test]
fn c4_rejects_classes_below_three_samples() {
    let preacts = Array2::zeros((5, 2));
    let ds = dataset(vec![preacts], vec![0, 0, 1, 1, 1], None);
    assert!(matches!(
        compute_c4(&ds, &MeasureConfig::default()).unwrap_err(),
        MeasureError::ClassTooSmall { class: 0, got: 2, need: 3 }
    ));
}

#[test]
fn profile_matches_global_on_single_layer() {
    // Width 5 with k_neuron = 5 and k_layer = 1 makes the per-layer
    // restriction identical to the global measures.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let total = 24;
    let sub_of: Vec<i64> = (0..total).map(|s| (s / 6) as i64).collect();
    let class_of: Vec<i64> = sub_of.iter().map(|&sc| sc / 2).collect();
    let preacts = Array2::from_shape_fn((total, 5), |_| rng.random_range(-1.0..1.5));
    let ds = dataset(vec![preacts], class_of, Some((sub_of, vec![0, 0, 1, 1])));

    let cfg = MeasureConfig { k_neuron: 5, k_layer: 1, ..Default::default() };
    let result = compute_all(
        &ds,
        &cfg,
        &MeasureOptions { per_layer: true, selectivity_distribution: false },
    )
    .unwrap();
    let profile = &result.per_layer.as_ref().unwrap()[0];
    assert_eq!(profile.c1, result.c1);
    assert_eq!(profile.c2, result.c2);
    assert_eq!(profile.c3, result.c3);
    assert_eq!(profile.c4, result.c4);
}

#[test]
fn compute_all_without_hierarchy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let preacts = Array2::from_shape_fn((12, 4), |_| rng.random_range(-1.0..1.0));
    let ds = dataset(vec![preacts], vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2], None);
    let result = compute_all(&ds, &MeasureConfig::default(), &MeasureOptions::default()).unwrap();
    assert!(result.c1.is_none() && result.c2.is_none());
    assert!(result.c3.is_some() && result.c4.is_some());
    assert!(result.warnings.iter().any(|w| w.contains("no subclass labels")));

    let err = compute_all(
        &ds,
        &MeasureConfig::default(),
        &MeasureOptions { per_layer: false, selectivity_distribution: true },
    )
    .unwrap_err();
    assert!(matches!(err, MeasureError::MissingHierarchy { .. }));
}

#[test]
fn distribution_finds_engineered_neurons() {
    let ds = selective_dataset(8, [0.05; 4], 13);
    let entries = selectivity_distribution(&ds, &MeasureConfig::default()).unwrap();
    assert_eq!(entries.len(), 4);
    for (i, e) in entries.iter().enumerate() {
        assert_eq!(e.subclass, i);
        assert_eq!(e.neuron, i, "subclass {i} should pick its own neuron");
        assert!(e.selectivity > 5.0);
    }
}

#[test]
fn distribution_tie_breaks_to_lowest_neuron() {
    let preacts = Array2::from_elem((12, 3), 1.0);
    let sub_of: Vec<i64> = (0..12).map(|s| (s / 3) as i64).collect();
    let class_of: Vec<i64> = sub_of.iter().map(|&sc| sc / 2).collect();
    let ds = dataset(vec![preacts], class_of, Some((sub_of, vec![0, 0, 1, 1])));
    let entries = selectivity_distribution(&ds, &MeasureConfig::default()).unwrap();
    for e in entries {
        assert_eq!(e.selectivity, 0.0);
        assert_eq!(e.neuron, 0);
    }
}

#[test]
fn config_validation() {
    let ok = MeasureConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        MeasureConfig { k_neuron: 0, ..ok.clone() },
        MeasureConfig { k_layer: 0, ..ok.clone() },
        MeasureConfig { activation_fraction: 0.0, ..ok.clone() },
        MeasureConfig { activation_fraction: 1.0, ..ok.clone() },
        MeasureConfig { distance_cap: 1, ..ok.clone() },
        MeasureConfig { epsilon: -1.0, ..ok.clone() },
        MeasureConfig { epsilon: f64::NAN, ..ok },
    ] {
        assert!(matches!(bad.validate().unwrap_err(), MeasureError::InvalidConfig { .. }));
    }
}

#[test]
fn measure_report_serializes_round_trip() {
    let ds = one_hot_dataset(3);
    let cfg = MeasureConfig { k_neuron: 2, k_layer: 1, ..Default::default() };
    let result = compute_all(
        &ds,
        &cfg,
        &MeasureOptions { per_layer: true, selectivity_distribution: true },
    )
    .unwrap();
    let json = serde_json::to_string_pretty(&result).unwrap();
    let back: MeasureResult = serde_json::from_str(&json).unwrap();
    assert_eq!(result, back);
}
