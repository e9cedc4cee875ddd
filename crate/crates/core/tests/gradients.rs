use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use weightscope::coordinate::{package_var, PackagingMode, TokenLayout, TokenScope};
use weightscope::emitter::{self, MetaGradient};
use weightscope::numcore::{grad_check, Tape, Tensor, Var, PAD};
use weightscope::reader::{self, Reader, ReaderConfig, ReaderVariant};
use weightscope::siren::{self, CoordGrid, Image, SirenConfig, SirenParams};

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-4;

fn tensor(rows: usize, cols: usize, seed: u64, bound: f64) -> Tensor {
    Tensor::uniform(rows, cols, bound, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Entries bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Tensor {
    tensor(rows, cols, seed, 1.0).map(|v| v.signum() * (0.2 + v.abs()))
}

/// Weighted sum so that every output entry carries a distinct cotangent.
fn contract<'t>(x: Var<'t>, seed: u64) -> Var<'t> {
    let [r, c] = x.shape();
    (x * x.tape().constant(tensor(r, c, seed ^ 0xabc, 1.0))).sum()
}

fn check(f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>, params: &[Tensor]) {
    let err = grad_check(f, params, EPS).unwrap();
    assert!(err < TOL, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_ops(seed in 0u64..1000) {
        let x = away_from_zero(3, 4, seed);
        let pos = x.map(f64::abs);
        check(|_, p| contract(p[0].sin(), seed), &[x.clone()]);
        check(|_, p| contract(p[0].cos(), seed), &[x.clone()]);
        check(|_, p| contract(p[0].exp(), seed), &[x.clone()]);
        check(|_, p| contract(p[0].ln(), seed), &[pos.clone()]);
        check(|_, p| contract(p[0].powf(-0.5), seed), &[pos.clone()]);
        check(|_, p| contract(p[0].sqrt(), seed), &[pos]);
        check(|_, p| contract(p[0].square(), seed), &[x.clone()]);
        check(|_, p| contract(p[0].tanh(), seed), &[x.clone()]);
        check(|_, p| contract(p[0].sigmoid(), seed), &[x.clone()]);
        check(|_, p| contract(p[0].relu(), seed), &[x.clone()]);
        check(|_, p| contract(p[0].scale(-1.7).add_scalar(0.3).neg(), seed), &[x]);
    }

    #[test]
    fn binary_and_matrix_ops(seed in 0u64..1000) {
        let a = tensor(3, 4, seed, 1.0);
        let b = tensor(3, 4, seed + 1, 1.0);
        let m = tensor(4, 2, seed + 2, 1.0);
        check(|_, p| contract(p[0] + p[1], seed), &[a.clone(), b.clone()]);
        check(|_, p| contract(p[0] - p[1], seed), &[a.clone(), b.clone()]);
        check(|_, p| contract(p[0] * p[1], seed), &[a.clone(), b.clone()]);
        check(|_, p| contract(p[0].matmul(p[1]), seed), &[a.clone(), m.clone()]);
        check(|_, p| contract(p[0].t(), seed), &[a.clone()]);
        check(|_, p| contract(p[0].mul_scalar_var(p[1]), seed), &[a.clone(), Tensor::scalar(0.7)]);
        check(|_, p| contract(p[0].add_row(p[1]), seed), &[a.clone(), tensor(1, 4, seed + 3, 1.0)]);
    }

    #[test]
    fn reductions_and_layout_ops(seed in 0u64..1000) {
        let a = tensor(3, 4, seed, 1.0);
        check(|_, p| p[0].sum(), &[a.clone()]);
        check(|_, p| contract(p[0].mean().broadcast_scalar(2, 2), seed), &[a.clone()]);
        check(|_, p| contract(p[0].sum_rows().broadcast_rows(3), seed), &[a.clone()]);
        check(|_, p| contract(p[0].sum_cols().broadcast_cols(5), seed), &[a.clone()]);
        check(|_, p| contract(p[0].reshape(2, 6), seed), &[a.clone()]);
        check(|_, p| contract(p[0].slice_flat(3, 5), seed), &[a.clone()]);
        let idx = [5, PAD, 0, 11, 5, 7];
        check(|_, p| contract(p[0].gather(&idx, 2, 3), seed), &[a.clone()]);
        check(|_, p| contract(p[0].scatter(&[4, 0, 4, 2], 2, 3), seed), &[tensor(1, 4, seed + 5, 1.0)]);
        check(|_, p| contract(p[0].softmax_rows(), seed), &[a.clone()]);
        check(|_, p| contract(p[0].log_softmax_rows(), seed), &[a]);
    }

    #[test]
    fn second_order_through_the_gradient(seed in 0u64..1000) {
        let x = tensor(2, 3, seed, 1.0);
        let w = tensor(3, 2, seed + 1, 1.0);
        // d/dx of <c, ∇_x sin(x W) summed>, which needs the tape to
        // differentiate its own backward pass.
        check(
            |tape, p| {
                let inner = p[0].matmul(p[1]).sin().sum();
                let g = tape.grad(inner, &[p[0]])[0];
                contract(g, seed)
            },
            &[x, w],
        );
    }
}

fn tiny_siren() -> SirenConfig {
    SirenConfig { num_hidden_layers: 2, hidden_dim: 3, omega0: 30.0, in_dim: 2, out_dim: 3 }
}

fn image(seed: u64, side: usize) -> Image {
    let pixels = tensor(side * side, 3, seed, 1.0).map(|v| 0.5 + 0.5 * v);
    Image::new(side, side, pixels).unwrap()
}

#[test]
fn reconstruction_loss_gradient_for_every_siren_entry() {
    let config = tiny_siren();
    let params = SirenParams::init(config, &mut ChaCha8Rng::seed_from_u64(4));
    let img = image(1, 3);
    let grid = CoordGrid::new(3, 3);
    check(
        |tape, p| {
            let coords = tape.constant(grid.coords.clone());
            let targets = tape.constant(img.pixels.clone());
            siren::recon_loss_var(&config, p[0], coords, targets)
        },
        &[Tensor::row(params.flatten())],
    );
}

#[test]
fn packaging_gradient_in_every_mode() {
    let (phi, theta, beta) = (tensor(1, 6, 1, 0.1), tensor(1, 6, 2, 0.1), tensor(1, 6, 3, 0.1));
    for mode in PackagingMode::ALL {
        check(
            |_, p| contract(package_var(p[0], p[1], p[2], p[3], mode), 9),
            &[phi.clone(), theta.clone(), beta.clone(), Tensor::scalar(100.0)],
        );
    }
}

fn micro_reader(variant: ReaderVariant) -> Reader {
    let config = ReaderConfig {
        num_blocks: 2,
        embed_dim: 4,
        heads: 2,
        ffn_dim: 6,
        num_classes: 3,
        num_tokens: 3,
        token_dim: 4,
        num_token_layers: 2,
        max_neurons: 2,
        variant,
        bias_encoder_width: 2,
        positional: true,
    };
    Reader::init(config, 11).unwrap()
}

#[test]
fn reader_forward_and_backward_on_three_tokens() {
    let layer_of_token = [0, 0, 1];
    let neuron_of_token = [0, 1, 0];
    let tokens = tensor(3, 4, 5, 1.0);
    for variant in [ReaderVariant::Baseline, ReaderVariant::RoutingEnhanced, ReaderVariant::BiasRoute, ReaderVariant::RoutingBiasStack] {
        let r = micro_reader(variant);
        let mut params: Vec<Tensor> = r.params.values().to_vec();
        // Non-zero pool logits so every block contributes unequally.
        let pool = r.params.index("pool.w").unwrap();
        params[pool] = Tensor::row(vec![0.3, -0.2]);
        params.push(tokens.clone());
        let err = grad_check(
            |tape, p| {
                let mut store = r.params.clone();
                for (dst, src) in store.values_mut().iter_mut().zip(p) {
                    *dst = (*src.value()).clone();
                }
                let mut bound = store.bind(tape);
                bound.vars = p[..p.len() - 1].to_vec();
                let trace = reader::forward_var(&r.config, &bound, p[p.len() - 1], &layer_of_token, &neuron_of_token).unwrap();
                reader::cross_entropy_var(trace.logits, 2)
            },
            &params,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{}: relative error {err}", variant.name());
    }
}

#[test]
fn outer_gradient_through_second_order_inner_fit() {
    let config = tiny_siren();
    let layout = TokenLayout::new(&config, TokenScope::HiddenOnly);
    let rc = ReaderConfig {
        num_blocks: 2,
        embed_dim: 4,
        heads: 2,
        ffn_dim: 6,
        num_classes: 3,
        num_tokens: layout.num_tokens,
        token_dim: layout.token_dim,
        num_token_layers: 2,
        max_neurons: 3,
        variant: ReaderVariant::Baseline,
        bias_encoder_width: 2,
        positional: true,
    };
    let r = Reader::init(rc, 3).unwrap();
    let anchor = SirenParams::init(config, &mut ChaCha8Rng::seed_from_u64(8));
    let images = [image(21, 3), image(22, 3)];
    let labels = [0usize, 2];
    let rates = Tensor::full(1, config.param_count(), 1e-3);
    let beta = tensor(1, config.param_count(), 6, 0.01);
    let err = grad_check(
        |tape, p| {
            let bound = r.params.bind(tape);
            let mut total: Option<Var> = None;
            for (i, (img, &y)) in images.iter().zip(&labels).enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
                let rates = tape.constant(rates.clone());
                let phi = emitter::inner_fit_var(tape, &config, p[0], rates, 2, 0.5, img, &mut rng, MetaGradient::SecondOrder).unwrap();
                let z = package_var(phi, p[0], tape.constant(beta.clone()), tape.constant(Tensor::scalar(100.0)), PackagingMode::ResidualShift);
                let tokens = layout.tokenize_var(z);
                let trace = reader::forward_var(&rc, &bound, tokens, &layout.layer_of_token, &layout.neuron_of_token).unwrap();
                let loss = reader::cross_entropy_var(trace.logits, y);
                total = Some(match total {
                    Some(t) => t + loss,
                    None => loss,
                });
            }
            total.unwrap().scale(0.5)
        },
        &[Tensor::row(anchor.flatten())],
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn supervised_contrastive_loss_gradient() {
    let x = tensor(4, 3, 2, 1.0);
    check(|_, p| emitter::supcon_var(emitter::normalize_rows_var(p[0]), &[0, 1, 0, 1], 0.1), &[x]);
}
