//! The transformer that classifies token sets.
//!
//! Tokens are projected to the embedding width, optionally tagged with
//! learned layer-position and neuron-position embeddings, and passed through
//! `M` post-norm blocks (multi-head self-attention, then a ReLU feed-forward
//! layer, each followed by LayerNorm). The pooled vector is a softmax-weighted
//! sum over blocks of each block's mean token, and a single linear head maps
//! it to class logits.
//!
//! Two optional extensions change the per-token computation upstream of the
//! pool. The routing gate blends each block's output with its input through a
//! learned per-token sigmoid gate. The bias route removes the bias column from
//! the projected token stream and instead encodes the whole bias column
//! through a width-`K` tanh bottleneck whose output is added to every token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coordinate::AugmentedTokenSet;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderVariant {
    #[default]
    Baseline,
    RoutingEnhanced,
    BiasRoute,
    /// Routing gate and bias route together.
    RoutingBiasStack,
}

impl ReaderVariant {
    pub fn routing_gate(self) -> bool {
        matches!(self, ReaderVariant::RoutingEnhanced | ReaderVariant::RoutingBiasStack)
    }

    pub fn bias_route(self) -> bool {
        matches!(self, ReaderVariant::BiasRoute | ReaderVariant::RoutingBiasStack)
    }

    pub fn name(self) -> &'static str {
        match self {
            ReaderVariant::Baseline => "baseline",
            ReaderVariant::RoutingEnhanced => "routing_enhanced",
            ReaderVariant::BiasRoute => "bias_route",
            ReaderVariant::RoutingBiasStack => "routing_bias_stack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub num_tokens: usize,
    pub token_dim: usize,
    /// Distinct values of the tokenizer's layer index.
    pub num_token_layers: usize,
    /// Largest neuron index plus one.
    pub max_neurons: usize,
    pub variant: ReaderVariant,
    pub bias_encoder_width: usize,
    pub positional: bool,
}

impl ReaderConfig {
    /// Four blocks, width 64, four heads, for the desk token layout.
    pub fn desk(num_tokens: usize, token_dim: usize, num_token_layers: usize, max_neurons: usize) -> Self {
        Self {
            num_blocks: 4,
            embed_dim: 64,
            heads: 4,
            ffn_dim: 128,
            num_classes: 10,
            num_tokens,
            token_dim,
            num_token_layers,
            max_neurons,
            variant: ReaderVariant::Baseline,
            bias_encoder_width: 16,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 2 {
            return Err(Error::arg("reader needs at least two blocks"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::arg("embedding width must split evenly across heads"));
        }
        if self.variant.bias_route() && self.bias_encoder_width == 0 {
            return Err(Error::arg("bias encoder width must be at least 1"));
        }
        if self.token_dim < 2 || self.num_tokens == 0 || self.num_classes == 0 {
            return Err(Error::arg("reader needs tokens with a weight part and a bias column"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Every intermediate state of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderTrace {
    /// Projected input tokens, `T × E`.
    pub z0: Tensor,
    /// Output of each block, `T × E`.
    pub h: Vec<Tensor>,
    /// `1 × E`
    pub pooled: Tensor,
    /// `1 × C`
    pub logits: Tensor,
    /// Bias-encoder activations `1 × K` for the bias-route variants.
    pub bias_encoding: Option<Tensor>,
}

/// Tape values of a forward pass.
pub struct TraceVars<'t> {
    pub z0: Var<'t>,
    pub h: Vec<Var<'t>>,
    pub pooled: Var<'t>,
    pub logits: Var<'t>,
    pub bias_encoding: Option<Var<'t>>,
}

impl TraceVars<'_> {
    pub fn to_trace(&self) -> ReaderTrace {
        ReaderTrace {
            z0: (*self.z0.value()).clone(),
            h: self.h.iter().map(|v| (*v.value()).clone()).collect(),
            pooled: (*self.pooled.value()).clone(),
            logits: (*self.logits.value()).clone(),
            bias_encoding: self.bias_encoding.map(|v| (*v.value()).clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reader {
    pub config: ReaderConfig,
    pub params: ParamStore,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(rows, cols, bound, rng)
}

impl Reader {
    pub fn init(config: ReaderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, d, f) = (config.embed_dim, config.head_dim(), config.ffn_dim);
        let mut p = ParamStore::new();
        p.insert("in.w", xavier(config.token_dim, e, &mut rng));
        p.insert("in.b", Tensor::zeros(1, e));
        if config.positional {
            p.insert("pos.layer", Tensor::uniform(config.num_token_layers, e, 0.02, &mut rng));
            p.insert("pos.neuron", Tensor::uniform(config.max_neurons, e, 0.02, &mut rng));
        }
        if config.variant.bias_route() {
            let k = config.bias_encoder_width;
            p.insert("bias_enc.a", xavier(config.num_tokens, k, &mut rng));
            p.insert("bias_enc.c", Tensor::zeros(1, k));
            p.insert("bias_enc.fuse", xavier(k, e, &mut rng));
        }
        for m in 0..config.num_blocks {
            for h in 0..config.heads {
                p.insert(format!("b{m}.q{h}"), xavier(e, d, &mut rng));
                p.insert(format!("b{m}.k{h}"), xavier(e, d, &mut rng));
                p.insert(format!("b{m}.v{h}"), xavier(e, d, &mut rng));
                p.insert(format!("b{m}.o{h}"), xavier(d, e, &mut rng));
            }
            p.insert(format!("b{m}.o_b"), Tensor::zeros(1, e));
            p.insert(format!("b{m}.ln1.g"), Tensor::ones(1, e));
            p.insert(format!("b{m}.ln1.b"), Tensor::zeros(1, e));
            p.insert(format!("b{m}.ff1.w"), xavier(e, f, &mut rng));
            p.insert(format!("b{m}.ff1.b"), Tensor::zeros(1, f));
            p.insert(format!("b{m}.ff2.w"), xavier(f, e, &mut rng));
            p.insert(format!("b{m}.ff2.b"), Tensor::zeros(1, e));
            p.insert(format!("b{m}.ln2.g"), Tensor::ones(1, e));
            p.insert(format!("b{m}.ln2.b"), Tensor::zeros(1, e));
            if config.variant.routing_gate() {
                p.insert(format!("b{m}.gate.w"), Tensor::uniform(e, 1, 0.01, &mut rng));
                p.insert(format!("b{m}.gate.b"), Tensor::full(1, 1, 2.0));
            }
        }
        p.insert("pool.w", Tensor::zeros(1, config.num_blocks));
        p.insert("out.w", xavier(e, config.num_classes, &mut rng));
        p.insert("out.b", Tensor::zeros(1, config.num_classes));
        Ok(Self { config, params: p })
    }

    /// Full forward pass with plain values.
    pub fn forward(&self, tokens: &AugmentedTokenSet) -> Result<ReaderTrace> {
        self.check_tokens(tokens)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(tokens.tokens.clone());
        let trace = forward_var(&self.config, &bound, x, &tokens.layer_of_token, &tokens.neuron_of_token)?;
        Ok(trace.to_trace())
    }

    pub fn check_tokens(&self, tokens: &AugmentedTokenSet) -> Result<()> {
        let c = &self.config;
        if tokens.tokens.shape() != [c.num_tokens, c.token_dim] {
            return Err(Error::shape(format!(
                "reader expects {}x{} tokens, got {:?}",
                c.num_tokens,
                c.token_dim,
                tokens.tokens.shape()
            )));
        }
        if tokens.bias_column + 1 != c.token_dim {
            return Err(Error::shape("bias column must be the last token column"));
        }
        Ok(())
    }

    /// Re-runs block `m` (0-based) on a stored input state.
    pub fn run_block(&self, m: usize, input: &Tensor) -> Result<Tensor> {
        if m >= self.config.num_blocks {
            return Err(Error::arg(format!("block {m} outside a {}-block reader", self.config.num_blocks)));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let out = block_var(&self.config, &bound, m, tape.constant(input.clone()));
        Ok((*out.value()).clone())
    }

    /// Encodes one bias column (one entry per token) into `1 × K`.
    pub fn bias_route_encode(&self, bias_column: &[f64]) -> Result<Tensor> {
        if !self.config.variant.bias_route() {
            return Err(Error::Variant(format!(
                "bias encoder is not part of the {} reader",
                self.config.variant.name()
            )));
        }
        if bias_column.len() != self.config.num_tokens {
            return Err(Error::shape("bias column length must equal the token count"));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let b = tape.constant(Tensor::row(bias_column.to_vec()));
        Ok((*bias_encode_var(&bound, b).value()).clone())
    }

    pub fn classify(trace: &ReaderTrace) -> usize {
        classify(&trace.logits)
    }
}

fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, shift: Var<'t>) -> Var<'t> {
    let c = x.shape()[1];
    let mean = x.sum_cols().scale(1.0 / c as f64).broadcast_cols(c);
    let xc = x - mean;
    let var = xc.square().sum_cols().scale(1.0 / c as f64);
    let inv = var.add_scalar(LN_EPS).powf(-0.5).broadcast_cols(c);
    (xc * inv) * gain.broadcast_rows(x.shape()[0]) + shift.broadcast_rows(x.shape()[0])
}

fn bias_encode_var<'t>(p: &Bound<'_, 't>, bias_row: Var<'t>) -> Var<'t> {
    bias_row.matmul(p.var("bias_enc.a")).add_row(p.var("bias_enc.c")).tanh()
}

/// One post-norm block, including the routing gate when configured.
pub fn block_var<'t>(config: &ReaderConfig, p: &Bound<'_, 't>, m: usize, x: Var<'t>) -> Var<'t> {
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut attn: Option<Var<'t>> = None;
    for h in 0..config.heads {
        let q = x.matmul(p.var(&format!("b{m}.q{h}")));
        let k = x.matmul(p.var(&format!("b{m}.k{h}")));
        let v = x.matmul(p.var(&format!("b{m}.v{h}")));
        let weights = q.matmul(k.t()).scale(scale).softmax_rows();
        let head = weights.matmul(v).matmul(p.var(&format!("b{m}.o{h}")));
        attn = Some(match attn {
            Some(a) => a + head,
            None => head,
        });
    }
    let attn = attn.expect("at least one head").add_row(p.var(&format!("b{m}.o_b")));
    let x1 = layer_norm(x + attn, p.var(&format!("b{m}.ln1.g")), p.var(&format!("b{m}.ln1.b")));
    let ff = x1
        .matmul(p.var(&format!("b{m}.ff1.w")))
        .add_row(p.var(&format!("b{m}.ff1.b")))
        .relu()
        .matmul(p.var(&format!("b{m}.ff2.w")))
        .add_row(p.var(&format!("b{m}.ff2.b")));
    let out = layer_norm(x1 + ff, p.var(&format!("b{m}.ln2.g")), p.var(&format!("b{m}.ln2.b")));
    if config.variant.routing_gate() {
        let e = x.shape()[1];
        let gate = x
            .matmul(p.var(&format!("b{m}.gate.w")))
            .add_row(p.var(&format!("b{m}.gate.b")))
            .sigmoid()
            .broadcast_cols(e);
        x + gate * (out - x)
    } else {
        out
    }
}

/// Input projection (and bias route) for `T × token_dim` tokens.
pub fn project_var<'t>(
    config: &ReaderConfig,
    p: &Bound<'_, 't>,
    tokens: Var<'t>,
    layer_of_token: &[usize],
    neuron_of_token: &[usize],
) -> (Var<'t>, Option<Var<'t>>) {
    let tape = tokens.tape();
    let [t, d] = tokens.shape();
    let e = config.embed_dim;
    let mut encoding = None;
    let stream = if config.variant.bias_route() {
        let bias_idx: Vec<usize> = (0..t).map(|r| r * d + d - 1).collect();
        let bias_row = tokens.gather(&bias_idx, 1, t);
        let enc = bias_encode_var(p, bias_row);
        encoding = Some(enc);
        let mut mask = Tensor::ones(t, d);
        for r in 0..t {
            mask.set(r, d - 1, 0.0);
        }
        let w_only = tokens * tape.constant(mask);
        let fused = enc.matmul(p.var("bias_enc.fuse")).broadcast_rows(t);
        w_only.matmul(p.var("in.w")).add_row(p.var("in.b")) + fused
    } else {
        tokens.matmul(p.var("in.w")).add_row(p.var("in.b"))
    };
    let z0 = if config.positional {
        let layer_idx: Vec<usize> =
            layer_of_token.iter().flat_map(|&l| (0..e).map(move |c| l * e + c)).collect();
        let neuron_idx: Vec<usize> =
            neuron_of_token.iter().flat_map(|&n| (0..e).map(move |c| n * e + c)).collect();
        stream
            + p.var("pos.layer").gather(&layer_idx, t, e)
            + p.var("pos.neuron").gather(&neuron_idx, t, e)
    } else {
        stream
    };
    (z0, encoding)
}

/// Complete forward pass on a tape.
pub fn forward_var<'t>(
    config: &ReaderConfig,
    p: &Bound<'_, 't>,
    tokens: Var<'t>,
    layer_of_token: &[usize],
    neuron_of_token: &[usize],
) -> Result<TraceVars<'t>> {
    let (z0, bias_encoding) = project_var(config, p, tokens, layer_of_token, neuron_of_token);
    if !z0.value().is_finite() {
        return Err(Error::NonFinite { context: "reader input projection".into() });
    }
    let mut h = Vec::with_capacity(config.num_blocks);
    let mut x = z0;
    for m in 0..config.num_blocks {
        x = block_var(config, p, m, x);
        if !x.value().is_finite() {
            return Err(Error::NonFinite { context: format!("reader block {}", m + 1) });
        }
        h.push(x);
    }
    let pooled = pool_var(p.var("pool.w"), &h);
    let logits = pooled.matmul(p.var("out.w")).add_row(p.var("out.b"));
    Ok(TraceVars { z0, h, pooled, logits, bias_encoding })
}

/// `Σ_m softmax(w)_m · mean-token(h_m)`.
pub fn pool_var<'t>(w: Var<'t>, h: &[Var<'t>]) -> Var<'t> {
    let s = w.softmax_rows();
    let mut pooled: Option<Var<'t>> = None;
    for (m, hm) in h.iter().enumerate() {
        let t = hm.shape()[0];
        let mean = hm.sum_rows().scale(1.0 / t as f64);
        let term = mean.mul_scalar_var(s.slice_flat(m, 1));
        pooled = Some(match pooled {
            Some(acc) => acc + term,
            None => term,
        });
    }
    pooled.expect("at least one block")
}

/// Cross-entropy of `1 × C` logits against `label`.
pub fn cross_entropy_var<'t>(logits: Var<'t>, label: usize) -> Var<'t> {
    let c = logits.shape()[1];
    let mut onehot = Tensor::zeros(1, c);
    onehot.set(0, label, 1.0);
    -(logits.log_softmax_rows() * logits.tape().constant(onehot)).sum()
}

/// Argmax with the lowest index winning ties.
pub fn classify(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is among the `k` largest logits (ties resolved toward
/// lower indices, as in [`classify`]).
pub fn in_top_k(logits: &Tensor, label: usize, k: usize) -> bool {
    let d = logits.data();
    let rank = d
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > d[label] || (v == d[label] && i < label))
        .count();
    rank < k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(variant: ReaderVariant) -> ReaderConfig {
        ReaderConfig {
            num_blocks: 2,
            embed_dim: 4,
            heads: 2,
            ffn_dim: 6,
            num_classes: 3,
            num_tokens: 3,
            token_dim: 3,
            num_token_layers: 2,
            max_neurons: 2,
            variant,
            bias_encoder_width: 2,
            positional: true,
        }
    }

    fn tokens(seed: u64) -> AugmentedTokenSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AugmentedTokenSet {
            tokens: Tensor::uniform(3, 3, 1.0, &mut rng),
            layer_of_token: vec![0, 0, 1],
            neuron_of_token: vec![0, 1, 0],
            bias_column: 2,
        }
    }

    #[test]
    fn classify_breaks_ties_low() {
        assert_eq!(classify(&Tensor::zeros(1, 10)), 0);
        assert_eq!(classify(&Tensor::row(vec![0.0, 1.0, 0.0])), 1);
        assert_eq!(classify(&Tensor::row(vec![5.0, 7.0, 7.0])), 1);
        assert!(in_top_k(&Tensor::row(vec![5.0, 7.0, 7.0]), 2, 2));
        assert!(!in_top_k(&Tensor::row(vec![5.0, 7.0, 7.0]), 0, 2));
    }

    #[test]
    fn trace_shapes_and_block_replay() {
        for variant in [
            ReaderVariant::Baseline,
            ReaderVariant::RoutingEnhanced,
            ReaderVariant::BiasRoute,
            ReaderVariant::RoutingBiasStack,
        ] {
            let r = Reader::init(micro(variant), 7).unwrap();
            let tr = r.forward(&tokens(1)).unwrap();
            assert_eq!(tr.h.len(), 2);
            assert_eq!(tr.logits.shape(), [1, 3]);
            assert_eq!(tr.bias_encoding.is_some(), variant.bias_route());
            assert_eq!(r.run_block(0, &tr.z0).unwrap(), tr.h[0]);
            assert_eq!(r.run_block(1, &tr.h[0]).unwrap(), tr.h[1]);
        }
    }

    #[test]
    fn bias_encoder_is_variant_gated() {
        let r = Reader::init(micro(ReaderVariant::Baseline), 1).unwrap();
        assert!(matches!(r.bias_route_encode(&[0.0; 3]), Err(Error::Variant(_))));
        let r = Reader::init(micro(ReaderVariant::BiasRoute), 1).unwrap();
        let enc = r.bias_route_encode(&[0.0; 3]).unwrap();
        assert_eq!(enc, r.params.get("bias_enc.c").map(f64::tanh));
    }
}
