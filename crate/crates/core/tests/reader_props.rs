use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use weightscope::coordinate::AugmentedTokenSet;
use weightscope::numcore::{Tape, Tensor};
use weightscope::reader::{classify, pool_var, Reader, ReaderConfig, ReaderVariant};

fn tokens(seed: u64) -> AugmentedTokenSet {
    AugmentedTokenSet {
        tokens: Tensor::uniform(4, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)),
        layer_of_token: vec![0, 0, 1, 1],
        neuron_of_token: vec![0, 1, 0, 1],
        bias_column: 2,
    }
}

fn reader(pool: [f64; 2]) -> Reader {
    let config = ReaderConfig {
        num_blocks: 2,
        embed_dim: 6,
        heads: 2,
        ffn_dim: 8,
        num_classes: 4,
        num_tokens: 4,
        token_dim: 3,
        num_token_layers: 2,
        max_neurons: 2,
        variant: ReaderVariant::Baseline,
        bias_encoder_width: 2,
        positional: true,
    };
    let mut r = Reader::init(config, 2).unwrap();
    *r.params.get_mut("pool.w") = Tensor::row(pool.to_vec());
    r
}

fn mean_token(h: &Tensor) -> Vec<f64> {
    (0..h.cols()).map(|c| (0..h.rows()).map(|r| h.get(r, c)).sum::<f64>() / h.rows() as f64).collect()
}

#[test]
fn pooled_state_is_the_softmax_weighted_block_mean() {
    let r = reader([0.4, -0.3]);
    let trace = r.forward(&tokens(1)).unwrap();
    let (e0, e1) = (0.4f64.exp(), (-0.3f64).exp());
    let (s0, s1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    let (m0, m1) = (mean_token(&trace.h[0]), mean_token(&trace.h[1]));
    for c in 0..6 {
        assert!((trace.pooled.get(0, c) - (s0 * m0[c] + s1 * m1[c])).abs() < 1e-12);
    }
}

#[test]
fn saturated_pool_selects_one_block() {
    let r = reader([50.0, 0.0]);
    let trace = r.forward(&tokens(2)).unwrap();
    let m0 = mean_token(&trace.h[0]);
    for c in 0..6 {
        assert!((trace.pooled.get(0, c) - m0[c]).abs() < 1e-6);
    }
}

#[test]
fn blocks_replay_from_the_trace() {
    let r = reader([0.0, 0.0]);
    let trace = r.forward(&tokens(3)).unwrap();
    assert_eq!(r.run_block(0, &trace.z0).unwrap(), trace.h[0]);
    assert_eq!(r.run_block(1, &trace.h[0]).unwrap(), trace.h[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logit_shift_keeps_the_prediction(seed in 0u64..10_000, shift in -1e3f64..1e3) {
        let logits = Tensor::uniform(1, 7, 3.0, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(classify(&logits), classify(&logits.map(|v| v + shift)));
    }

    #[test]
    fn duplicating_every_token_keeps_the_pooled_mean(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(4, 5, 1.0, &mut rng)).collect();
        let w = Tensor::uniform(1, 3, 1.0, &mut rng);
        let tape = Tape::new();
        let once: Vec<_> = h.iter().map(|t| tape.constant(t.clone())).collect();
        let twice: Vec<_> = h.iter().map(|t| tape.constant(Tensor::vstack(&[t.clone(), t.clone()]))).collect();
        let wv = tape.constant(w);
        let (a, b) = (pool_var(wv, &once).value(), pool_var(wv, &twice).value());
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }
}
