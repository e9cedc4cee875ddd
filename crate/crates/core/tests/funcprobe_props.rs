use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use weightscope::funcprobe::{responder, sample_responses, spread_compare, ProbeSetting, QuerySet};
use weightscope::numcore::Tensor;
use weightscope::siren::{SirenConfig, SirenParams};

fn config() -> SirenConfig {
    SirenConfig { num_hidden_layers: 2, hidden_dim: 5, omega0: 30.0, in_dim: 2, out_dim: 3 }
}

#[test]
fn constant_network_gives_constant_features() {
    let mut p = SirenParams::zeros(config());
    p.biases[2] = Tensor::row(vec![0.25, 0.25, 0.25]);
    let coords = ProbeSetting { queries: QuerySet::Random(32), w_psnr: 0.0, seed: 1 }.coords().unwrap();
    let f = sample_responses(&responder(&p), &coords).unwrap();
    assert_eq!(f.0.len(), 96);
    assert!(f.0.iter().all(|&v| v == 0.25));
}

/// Reorders the hidden units of layer `l`: its weight rows and biases, and
/// the matching columns of layer `l + 1`.
fn permute_hidden(p: &SirenParams, l: usize, perm: &[usize]) -> SirenParams {
    let mut q = p.clone();
    let (w, b, next) = (&p.weights[l], &p.biases[l], &p.weights[l + 1]);
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..w.cols() {
            q.weights[l].set(new, c, w.get(old, c));
        }
        q.biases[l].set(0, new, b.get(0, old));
        for r in 0..next.rows() {
            q.weights[l + 1].set(r, new, next.get(r, old));
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hidden_unit_permutations_leave_responses_unchanged(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SirenParams::init(config(), &mut rng);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let q = permute_hidden(&p, 0, &perm);
        prop_assert_ne!(p.flatten(), q.flatten());
        let coords = ProbeSetting { queries: QuerySet::Grid(4, 4), w_psnr: 0.0, seed: 0 }.coords().unwrap();
        let a = sample_responses(&responder(&p), &coords).unwrap();
        let b = sample_responses(&responder(&q), &coords).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn query_sets_are_seed_deterministic(seed in 0u64..10_000) {
        let s = ProbeSetting { queries: QuerySet::Random(64), w_psnr: 1.0, seed };
        let (a, b) = (s.coords().unwrap(), s.coords().unwrap());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn identical_panels_have_unit_ratio() {
    let v = vec![("a".to_string(), 40.0), ("b".to_string(), 44.0)];
    let r = spread_compare(&v, &v).unwrap();
    assert_eq!(r.ratio, Some(1.0));
    assert!(!r.narrower);
}
