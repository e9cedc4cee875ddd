use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use weightscope::coordinate::{package, split_bias, AugmentedTokenSet, BiasSplit, PackagingMode, ReaderCoordinateParams, TokenLayout, TokenScope};
use weightscope::interventions::{
    apply, edit_mask, evaluate, ladder_report, run_ladder, Context, EvalSet, InterventionKind, Neutralize,
};
use weightscope::numcore::Tensor;
use weightscope::reader::{Reader, ReaderConfig, ReaderVariant};
use weightscope::siren::SirenConfig;

const LAYERS: usize = 2;

fn siren() -> SirenConfig {
    SirenConfig { num_hidden_layers: LAYERS, hidden_dim: 4, omega0: 30.0, in_dim: 2, out_dim: 3 }
}

struct Batch {
    tokens: Vec<AugmentedTokenSet>,
    labels: Vec<usize>,
    splits: Vec<BiasSplit>,
}

fn batch(n: usize, seed: u64) -> Batch {
    let config = siren();
    let layout = TokenLayout::new(&config, TokenScope::HiddenOnly);
    let p = config.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = Tensor::uniform(1, p, 0.5, &mut rng).into_data();
    let coord = ReaderCoordinateParams { beta: Tensor::uniform(1, p, 0.01, &mut rng), lambda: 100.0 };
    let (mut tokens, mut splits) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let phi: Vec<f64> = theta.iter().map(|t| t + 0.01 * Tensor::uniform(1, 1, 1.0, &mut rng).item()).collect();
        let z = package(&phi, &theta, &coord, PackagingMode::ResidualShift).unwrap();
        tokens.push(layout.tokenize(&z).unwrap());
        splits.push(split_bias(&layout, &phi, &theta, &coord, PackagingMode::ResidualShift).unwrap());
    }
    Batch { tokens, labels: (0..n).map(|i| i % 3).collect(), splits }
}

fn kinds() -> Vec<InterventionKind> {
    InterventionKind::ladder(LAYERS)
}

fn reader(variant: ReaderVariant) -> Reader {
    let layout = TokenLayout::new(&siren(), TokenScope::HiddenOnly);
    let config = ReaderConfig {
        num_blocks: 2,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 8,
        num_classes: 3,
        num_tokens: layout.num_tokens,
        token_dim: layout.token_dim,
        num_token_layers: LAYERS,
        max_neurons: 4,
        variant,
        bias_encoder_width: 3,
        positional: true,
    };
    Reader::init(config, 5).unwrap()
}

fn column_multiset(sets: &[AugmentedTokenSet], row: usize, col: usize) -> Vec<u64> {
    let mut v: Vec<u64> = sets.iter().map(|s| s.tokens.get(row, col).to_bits()).collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn edits_touch_only_their_declared_cells(seed in 0u64..10_000, which in 0usize..10) {
        let b = batch(9, seed);
        let kind = kinds()[which % kinds().len()];
        let ctx = Context { labels: &b.labels, splits: Some(&b.splits), seed, neutralize: Neutralize::BatchMean };
        let edited = apply(&b.tokens, kind, &ctx).unwrap();
        let allowed: BTreeSet<(usize, usize)> = edited.rows.iter().map(|&r| (r, edited.column)).collect();
        for (_, row, col) in edit_mask(&b.tokens, &edited.tokens) {
            prop_assert!(allowed.contains(&(row, col)), "{kind} changed ({row}, {col})");
        }
    }

    #[test]
    fn shuffles_are_reproducible_and_keep_marginals(seed in 0u64..10_000) {
        let b = batch(12, seed);
        let ctx = Context { labels: &b.labels, splits: None, seed, neutralize: Neutralize::BatchMean };
        for kind in [InterventionKind::CrossSampleShuffle, InterventionKind::WithinClassShuffle] {
            let first = apply(&b.tokens, kind, &ctx).unwrap();
            let again = apply(&b.tokens, kind, &ctx).unwrap();
            prop_assert_eq!(&first, &again);
            let col = b.tokens[0].bias_column;
            for row in 0..b.tokens[0].tokens.rows() {
                prop_assert_eq!(column_multiset(&b.tokens, row, col), column_multiset(&first.tokens, row, col));
            }
        }
    }
}

#[test]
fn no_edit_changes_nothing() {
    let b = batch(9, 1);
    let r = reader(ReaderVariant::Baseline);
    let set = EvalSet { tokens: b.tokens, labels: b.labels, splits: Some(b.splits) };
    let o = evaluate(&r, &set, None, 0, Neutralize::BatchMean, LAYERS).unwrap();
    assert_eq!(o.delta, 0.0);
    assert_eq!(o.top1, o.baseline_top1);
}

#[test]
fn a_ladder_run_leaves_the_reader_untouched() {
    let b = batch(9, 2);
    let r = reader(ReaderVariant::Baseline);
    let before = r.clone();
    let set = EvalSet { tokens: b.tokens, labels: b.labels, splits: Some(b.splits) };
    let first = evaluate(&r, &set, None, 0, Neutralize::BatchMean, LAYERS).unwrap();
    run_ladder("r", &r, &set, &kinds(), 3, Neutralize::BatchMean, LAYERS).unwrap();
    let second = evaluate(&r, &set, None, 0, Neutralize::BatchMean, LAYERS).unwrap();
    assert_eq!(r, before);
    assert_eq!(first.baseline_top1.to_bits(), second.baseline_top1.to_bits());
}

#[test]
fn single_reader_rows_have_no_spread() {
    let b = batch(9, 3);
    let r = reader(ReaderVariant::Baseline);
    let set = EvalSet { tokens: b.tokens, labels: b.labels, splits: Some(b.splits) };
    let cells = vec![run_ladder("only", &r, &set, &kinds(), 3, Neutralize::BatchMean, LAYERS).unwrap()];
    let rep = ladder_report(&cells, &kinds());
    for row in &rep.rows {
        assert_eq!(row.n, 1);
        assert_eq!(row.sd, None);
        assert_eq!(row.mean, cells[0].outcomes.iter().find(|o| o.kind == Some(row.kind)).unwrap().delta);
    }
}

#[test]
fn bias_route_rows_without_a_target_are_not_applicable() {
    let b = batch(9, 4);
    let r = reader(ReaderVariant::BiasRoute);
    let set = EvalSet { tokens: b.tokens, labels: b.labels, splits: Some(b.splits) };
    let cells = run_ladder("br", &r, &set, &kinds(), 3, Neutralize::BatchMean, LAYERS).unwrap();
    let applicable: Vec<bool> = cells.outcomes.iter().map(|o| o.applicable).collect();
    assert!(applicable.iter().any(|a| *a) && applicable.iter().any(|a| !a));
    for o in cells.outcomes.iter().filter(|o| !o.applicable) {
        assert!(o.reason.is_some());
    }
}
