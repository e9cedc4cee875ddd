use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use weightscope::diagnostics::{
    bias_fisher, family_contrast, knn_consistency, logreg_probe, nearest_centroid_top1, stage_metrics, token_flow, FlowInput, ProbeBudget,
    Split, StageId, StageSettings,
};
use weightscope::numcore::Tensor;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect())
}

fn random_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut *rng));
    let q = g.qr().q();
    Tensor::new(d, d, (0..d * d).map(|i| q[(i / d, i % d)]).collect())
}

#[test]
fn random_labels_give_chance_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian(2000, 8, &mut rng);
    let labels = random_labels(2000, 10, &mut rng);
    let v = knn_consistency(&x, &labels, 5).unwrap();
    assert!((v - 10.0).abs() <= 3.0, "{v}");
}

#[test]
fn logreg_on_random_labels_stays_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(3000, 10, &mut rng);
    let labels = random_labels(3000, 10, &mut rng);
    let split = Split::seeded(3000, 0.3, 5).unwrap();
    let r = logreg_probe(&x, &labels, &split, ProbeBudget::default()).unwrap();
    assert!((r.top1 - 10.0).abs() <= 5.0, "{}", r.top1);
}

#[test]
fn separated_class_means_give_perfect_centroid_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let noise = gaussian(60, 4, &mut rng);
    let x = Tensor::new(60, 4, (0..240).map(|k| noise.data()[k] * 0.01 + if k % 4 == labels[k / 4] { 10.0 } else { 0.0 }).collect());
    let split = Split::seeded(60, 0.3, 1).unwrap();
    assert_eq!(nearest_centroid_top1(&x, &labels, &split).unwrap(), 100.0);
}

#[test]
fn stage_equal_to_raw_offsets_has_equal_flow_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = gaussian(50, 6, &mut rng);
    let labels = random_labels(50, 5, &mut rng);
    let input = FlowInput { name: "a".into(), top1: 40.0, stages: vec![(StageId::RawOffset, x.clone()), (StageId::ReaderInput, x.clone())] };
    let flow = token_flow(&[input], &labels, 5).unwrap();
    let raw = knn_consistency(&x, &labels, 5).unwrap();
    assert_eq!(flow.value("a", StageId::ReaderInput), Some(raw));
    assert!(flow.correlations_omitted.is_some());
}

#[test]
fn bias_fisher_matches_a_direct_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(30, 3, &mut rng);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let f = bias_fisher(&x, &labels).unwrap();
    let mut ratios = Vec::new();
    for j in 0..3 {
        let col: Vec<f64> = (0..30).map(|i| x.get(i, j)).collect();
        let grand = col.iter().sum::<f64>() / 30.0;
        let (mut between, mut within) = (0.0, 0.0);
        for c in 0..3 {
            let members: Vec<f64> = (0..30).filter(|i| labels[*i] == c).map(|i| col[i]).collect();
            let m = members.iter().sum::<f64>() / members.len() as f64;
            between += members.len() as f64 * (m - grand).powi(2);
            within += members.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        }
        ratios.push(between / within);
    }
    let want = ratios.iter().sum::<f64>() / 3.0;
    assert!((f.mean - want).abs() < 1e-12);
    assert!((f.top50_mean - want).abs() < 1e-12);
}

#[test]
fn family_delta_is_consistent_with_its_cells() {
    let c = family_contrast("m", &[30.1, 28.4, 33.0], &[20.0, 22.5]).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&c.cluster_values) - mean(&c.other_values) - c.delta).abs() < 1e-9);
}

#[test]
fn stage_metrics_record_the_compression_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(40, 200, &mut rng);
    let labels = random_labels(40, 4, &mut rng);
    let m = stage_metrics(StageId::Block(2), &x, &labels, None, &StageSettings::default()).unwrap();
    assert_eq!(m.pca_width, 39);
    assert_eq!(m.stage.to_string(), "h2");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn knn_consistency_ignores_isometries(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(40, 5, &mut rng);
        let labels = random_labels(40, 4, &mut rng);
        let q = orthogonal(5, &mut rng);
        let shift = gaussian(1, 5, &mut rng).scale(10.0);
        let moved = x.matmul(&q);
        let moved = Tensor::new(40, 5, moved.data().iter().enumerate().map(|(k, v)| v + shift.data()[k % 5]).collect());
        prop_assert_eq!(knn_consistency(&x, &labels, 5).unwrap(), knn_consistency(&moved, &labels, 5).unwrap());
    }

    #[test]
    fn splits_are_disjoint_and_seeded(n in 10usize..200, seed in 0u64..10_000) {
        let a = Split::seeded(n, 0.3, seed).unwrap();
        let b = Split::seeded(n, 0.3, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.train.iter().all(|i| !a.test.contains(i)));
        prop_assert_eq!(a.train.len() + a.test.len(), n);
    }

    #[test]
    fn stratified_splits_keep_every_class_in_training(n in 4usize..120, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(n, 6, &mut rng);
        let Ok(s) = Split::stratified(&labels, 0.3, seed) else {
            prop_assume!(false);
            unreachable!()
        };
        prop_assert_eq!(&s, &Split::stratified(&labels, 0.3, seed).unwrap());
        prop_assert!(s.train.iter().all(|i| !s.test.contains(i)));
        prop_assert_eq!(s.train.len() + s.test.len(), n);
        for c in labels.iter() {
            prop_assert!(s.train.iter().any(|&i| labels[i] == *c));
        }
    }
}
