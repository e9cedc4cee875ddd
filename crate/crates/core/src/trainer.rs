//! The outer training loop: joint optimization of the anchor, inner-loop
//! rates, reader coordinate and reader, plus the fresh-reader control.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coordinate::{self, AugmentedTokenSet, PackagingMode, ReaderCoordinateParams, TokenLayout, TokenScope};
use crate::emitter::{
    self, ClassCenters, ContrastProjection, EmitterKind, EmitterVariant, InnerLoopSchedule, MetaGradient,
};
use crate::error::{Error, Result};
use crate::harness::dataset::{Dataset, Sample};
use crate::numcore::{Tape, Tensor, Var};
use crate::reader::{self, Reader, ReaderConfig, ReaderTrace, ReaderVariant};
use crate::rng;
use crate::siren::{self, CoordGrid, Image, SirenConfig, SirenParams};

/// One-cycle schedule: cosine ramp from `peak/initial_div` to `peak` over
/// the warmup, then cosine anneal to `peak/final_div` at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub warmup_fraction: f64,
    pub initial_div: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self { warmup_fraction: 0.05, initial_div: 25.0, final_div: 1e4 }
    }
}

impl OneCycle {
    /// Index of the step at which the rate peaks.
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        if total_steps < 3 {
            return 0;
        }
        ((self.warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps - 2)
    }
}

/// Learning rate at `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, schedule: &OneCycle) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::arg(format!("step {step} outside a {total_steps}-step schedule")));
    }
    let start = peak / schedule.initial_div;
    let end = peak / schedule.final_div;
    let w = schedule.warmup_steps(total_steps);
    if total_steps < 3 {
        return Ok(if step == 0 { start } else { end });
    }
    let cos_mix = |from: f64, to: f64, frac: f64| to + (from - to) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
    Ok(if step <= w {
        cos_mix(start, peak, step as f64 / w as f64)
    } else {
        cos_mix(peak, end, (step - w) as f64 / (total_steps - 1 - w) as f64)
    })
}

/// Decoupled-weight-decay Adam over a list of tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(shapes: &[[usize; 2]], weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|&[r, c]| Tensor::zeros(r, c)).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update; `lrs[i]` is the rate for tensor `i`, zero to freeze it.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            if lr == 0.0 {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                *pj -= lr * self.weight_decay * *pj;
                *pj -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Reader trunk dimensions, independent of the token layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReaderShape {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub bias_encoder_width: usize,
    pub positional: bool,
}

impl Default for ReaderShape {
    fn default() -> Self {
        Self { num_blocks: 4, embed_dim: 64, heads: 4, ffn_dim: 128, bias_encoder_width: 16, positional: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub schedule: OneCycle,
    /// Peak rate for the anchor `θ`.
    pub lr_siren: f64,
    /// Peak rate for the inner-loop rates `α`.
    pub lr_meta_rates: f64,
    /// Peak rate for `β` and `λ`.
    pub lr_coord: f64,
    /// Peak rate for the reader and its head.
    pub lr_reader: f64,
    pub seed: u64,
    pub emitter: EmitterVariant,
    pub reader_variant: ReaderVariant,
    pub sample_fraction: f64,
    pub inner_steps: usize,
    pub cls_weight: f64,
    pub recon_weight: f64,
    pub meta_gradient: MetaGradient,
    pub packaging: PackagingMode,
    pub token_scope: TokenScope,
    pub siren: SirenConfig,
    pub reader: ReaderShape,
    pub initial_rate: f64,
    pub lambda_init: f64,
    pub learn_lambda: bool,
}

impl TrainConfig {
    /// Optimizer conventions of the full-scale runs: 1e-4 for network
    /// weights, 1e-2 for the inner-loop rates.
    pub fn full_scale(kind: EmitterKind) -> Self {
        let mut c = Self::desk(kind);
        c.lr_siren = 1e-4;
        c.lr_reader = 1e-4;
        c.lr_coord = 1e-4;
        c.lr_meta_rates = 1e-2;
        c
    }

    /// Desk-scale preset: larger reader and coordinate rates so that a small
    /// dataset trains within a few dozen epochs.
    pub fn desk(kind: EmitterKind) -> Self {
        let (reader_variant, sample_fraction) = match kind {
            EmitterKind::Routing => (ReaderVariant::RoutingEnhanced, 0.05),
            EmitterKind::BiasRoute => (ReaderVariant::BiasRoute, 0.05),
            EmitterKind::StochasticFit => (ReaderVariant::RoutingEnhanced, 0.10),
            _ => (ReaderVariant::Baseline, 0.05),
        };
        Self {
            epochs: 20,
            batch_size: 8,
            weight_decay: 1e-4,
            schedule: OneCycle::default(),
            lr_siren: 1e-4,
            lr_meta_rates: 1e-3,
            lr_coord: 1e-3,
            lr_reader: 1e-3,
            seed: 42,
            emitter: EmitterVariant::new(kind),
            reader_variant,
            sample_fraction,
            inner_steps: 4,
            cls_weight: 1.0,
            recon_weight: 1.0,
            meta_gradient: MetaGradient::SecondOrder,
            packaging: PackagingMode::ResidualShift,
            token_scope: TokenScope::HiddenOnly,
            siren: SirenConfig::desk(),
            reader: ReaderShape::default(),
            initial_rate: 1e-2,
            lambda_init: ReaderCoordinateParams::DEFAULT_LAMBDA,
            learn_lambda: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.siren.validate()?;
        self.emitter.validate()?;
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::arg("sample fraction must lie in (0, 1]"));
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::arg("lambda must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to turn an image into logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub siren: SirenConfig,
    /// `θ`, `1 × P`
    pub anchor: Tensor,
    pub schedule: InnerLoopSchedule,
    pub coord: ReaderCoordinateParams,
    pub packaging: PackagingMode,
    pub layout: TokenLayout,
    pub token_scope: TokenScope,
    pub reader: Reader,
}

/// An image carried through fitting, packaging and tokenization.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub fitted: Vec<f64>,
    pub z: Vec<f64>,
    pub tokens: AugmentedTokenSet,
}

impl Model {
    pub fn init(config: &TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let anchor = SirenParams::init(config.siren, &mut rng::stream(config.seed, "init/anchor"));
        let layout = TokenLayout::new(&config.siren, config.token_scope);
        let reader = Reader::init(reader_config(config.reader, config.reader_variant, &layout, num_classes), rng::derive_seed(config.seed, "init/reader"))?;
        let mut coord = ReaderCoordinateParams::new(config.siren.param_count());
        coord.lambda = config.lambda_init;
        Ok(Self {
            siren: config.siren,
            anchor: Tensor::row(anchor.flatten()),
            schedule: InnerLoopSchedule::constant(
                &config.siren,
                config.initial_rate,
                config.inner_steps,
                config.sample_fraction,
            ),
            coord,
            packaging: config.packaging,
            layout,
            token_scope: config.token_scope,
            reader,
        })
    }

    pub fn anchor_params(&self) -> SirenParams {
        SirenParams::from_flat(self.siren, self.anchor.data()).expect("anchor matches its config")
    }

    pub fn fit<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Vec<f64>> {
        Ok(emitter::inner_fit(&self.anchor_params(), &self.schedule, image, rng)?.flatten())
    }

    pub fn package(&self, fitted: &[f64]) -> Vec<f64> {
        coordinate::package(fitted, self.anchor.data(), &self.coord, self.packaging)
            .expect("fitted vector matches the anchor layout")
    }

    pub fn embed<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Embedded> {
        let fitted = self.fit(image, rng)?;
        let z = self.package(&fitted);
        let tokens = self.layout.tokenize(&z)?;
        Ok(Embedded { fitted, z, tokens })
    }

    pub fn trace(&self, tokens: &AugmentedTokenSet) -> Result<ReaderTrace> {
        self.reader.forward(tokens)
    }
}

pub fn reader_config(shape: ReaderShape, variant: ReaderVariant, layout: &TokenLayout, num_classes: usize) -> ReaderConfig {
    ReaderConfig {
        num_blocks: shape.num_blocks,
        embed_dim: shape.embed_dim,
        heads: shape.heads,
        ffn_dim: shape.ffn_dim,
        num_classes,
        num_tokens: layout.num_tokens,
        token_dim: layout.token_dim,
        num_token_layers: layout.layer_of_token.iter().max().map_or(1, |m| m + 1),
        max_neurons: layout.neuron_of_token.iter().max().map_or(1, |m| m + 1),
        variant,
        bias_encoder_width: shape.bias_encoder_width,
        positional: shape.positional,
    }
}

/// The fixed fitting stream used whenever a sample is evaluated rather
/// than trained on.
pub fn eval_stream(seed: u64, split: &str, index: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &format!("eval-fit/{split}/{index}"))
}

/// Fits, packages and tokenizes every sample with the evaluation streams.
pub fn embed_all(model: &Model, samples: &[Sample], seed: u64, split: &str) -> Result<Vec<Embedded>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| model.embed(&s.image, &mut eval_stream(seed, split, i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Top-1 / Top-5 in percent of a reader over pre-built token sets.
pub fn accuracy(reader: &Reader, tokens: &[AugmentedTokenSet], labels: &[usize]) -> Result<Accuracy> {
    let mut c1 = 0;
    let mut c5 = 0;
    for (t, &y) in tokens.iter().zip(labels) {
        let tr = reader.forward(t)?;
        c1 += usize::from(reader::classify(&tr.logits) == y);
        c5 += usize::from(reader::in_top_k(&tr.logits, y, 5));
    }
    let n = tokens.len().max(1) as f64;
    Ok(Accuracy { top1: 100.0 * c1 as f64 / n, top5: 100.0 * c5 as f64 / n })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub recon: f64,
    pub aux: f64,
    /// The scalar actually optimized.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr_reader: f64,
    pub loss: LossParts,
    /// `|w_cls·cls + w_recon·recon + w_aux·aux − total|`
    pub weighted_sum_error: f64,
    /// Largest absolute gradient entry over `θ`, `α`, `β`, `λ`.
    pub emitter_grad_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_top1: f64,
    pub train_top5: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub loss: LossParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_top1: Option<f64>,
    /// Mean validation Top-1 over the last five epochs.
    pub final_window_mean: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunRecord {
    fn new(label: String, seed: u64, config: serde_json::Value) -> Self {
        Self {
            label,
            seed,
            config,
            epochs: vec![],
            steps: vec![],
            best_epoch: None,
            best_val_top1: None,
            final_window_mean: None,
            checkpoints: vec![],
        }
    }

    fn finish(&mut self) {
        let n = self.epochs.len();
        if n > 0 {
            let tail = &self.epochs[n.saturating_sub(5)..];
            self.final_window_mean = Some(tail.iter().map(|e| e.val_top1).sum::<f64>() / tail.len() as f64);
        }
    }

    /// One JSON object per epoch, then a summary line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for e in &self.epochs {
            serde_json::to_writer(&mut buf, &serde_json::json!({"record": "epoch", "label": self.label, "seed": self.seed, "epoch": e}))?;
            buf.push(b'\n');
        }
        serde_json::to_writer(&mut buf, &serde_json::json!({"record": "summary", "run": self}))?;
        buf.push(b'\n');
        crate::harness::write_atomic(path, &buf)
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    /// Model at the checkpoint-best epoch.
    pub best: Option<Model>,
    pub last: Model,
}

struct Grads {
    anchor: Tensor,
    rates: Tensor,
    beta: Tensor,
    lambda: f64,
    reader: Vec<Tensor>,
}

impl Grads {
    fn zeros(model: &Model) -> Self {
        Self {
            anchor: Tensor::zeros(1, model.anchor.len()),
            rates: Tensor::zeros(1, model.anchor.len()),
            beta: Tensor::zeros(1, model.anchor.len()),
            lambda: 0.0,
            reader: model.reader.params.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }

    fn add(&mut self, other: &Grads) {
        self.anchor = self.anchor.add(&other.anchor);
        self.rates = self.rates.add(&other.rates);
        self.beta = self.beta.add(&other.beta);
        self.lambda += other.lambda;
        for (a, b) in self.reader.iter_mut().zip(&other.reader) {
            *a = a.add(b);
        }
    }

    fn emitter_max(&self) -> f64 {
        self.anchor.max_abs().max(self.rates.max_abs()).max(self.beta.max_abs()).max(self.lambda.abs())
    }

    fn is_finite(&self) -> bool {
        self.anchor.is_finite()
            && self.rates.is_finite()
            && self.beta.is_finite()
            && self.lambda.is_finite()
            && self.reader.iter().all(Tensor::is_finite)
    }
}

enum Aux<'a> {
    None,
    Center(&'a [f64]),
    ContrastSurrogate(&'a Tensor, &'a Tensor),
}

struct ImageStep {
    grads: Grads,
    ce: f64,
    recon: f64,
    aux: f64,
    optimized: f64,
    logits: Tensor,
    residual: Vec<f64>,
}

/// Everything on one tape for one image.
#[allow(clippy::too_many_arguments)]
fn image_step(
    model: &Model,
    cfg: &TrainConfig,
    sample: &Sample,
    batch: usize,
    rng_a: &mut rand_chacha::ChaCha8Rng,
    rng_b: Option<&mut rand_chacha::ChaCha8Rng>,
    aux: Aux<'_>,
    projection: Option<&ContrastProjection>,
) -> Result<ImageStep> {
    let tape = Tape::new();
    let theta = tape.leaf(model.anchor.clone());
    let rates = tape.leaf(model.schedule.rates.clone());
    let beta = tape.leaf(model.coord.beta.clone());
    let lambda = tape.leaf(Tensor::scalar(model.coord.lambda));
    let bound = model.reader.params.bind(&tape);
    let k = model.schedule.steps;
    let rho = model.schedule.sample_fraction;

    let phi = emitter::inner_fit_var(&tape, &model.siren, theta, rates, k, rho, &sample.image, rng_a, cfg.meta_gradient)?;
    let z = coordinate::package_var(phi, theta, beta, lambda, model.packaging);
    let tokens = model.layout.tokenize_var(z);
    let trace = reader::forward_var(
        &model.reader.config,
        &bound,
        tokens,
        &model.layout.layer_of_token,
        &model.layout.neuron_of_token,
    )?;
    let ce = reader::cross_entropy_var(trace.logits, sample.label);
    let grid = CoordGrid::new(sample.image.height, sample.image.width);
    let recon = siren::recon_loss_var(
        &model.siren,
        phi,
        tape.constant(grid.coords),
        tape.constant(sample.image.pixels.clone()),
    );
    let b = batch as f64;
    let mut loss = (ce.scale(cfg.cls_weight) + recon.scale(cfg.recon_weight)).scale(1.0 / b);
    let delta = phi - theta;
    let mut aux_value = 0.0;
    let mut optimized = loss.item();
    match aux {
        Aux::None => {}
        Aux::Center(center) => {
            let term = emitter::center_term_var(delta, center, batch);
            aux_value = term.item();
            loss = loss + term.scale(cfg.emitter.aux_weight);
            optimized = loss.item();
        }
        Aux::ContrastSurrogate(ga, gb) => {
            let proj = projection.expect("contrast projection");
            let rng_b = rng_b.expect("second view stream");
            let phi_b = emitter::inner_fit_var(&tape, &model.siren, theta, rates, k, rho, &sample.image, rng_b, cfg.meta_gradient)?;
            let ea = proj.project_var(delta);
            let eb = proj.project_var(phi_b - theta);
            let surrogate = (ea * tape.constant(ga.clone())).sum() + (eb * tape.constant(gb.clone())).sum();
            loss = loss + surrogate.scale(cfg.emitter.aux_weight);
        }
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite { context: "outer loss".into() });
    }
    let mut wrt = vec![theta, rates, beta, lambda];
    wrt.extend_from_slice(&bound.vars);
    let g: Vec<Tensor> = tape.grad(loss, &wrt).iter().map(|v| (*v.value()).clone()).collect();
    let mut it = g.into_iter();
    let grads = Grads {
        anchor: it.next().expect("anchor grad"),
        rates: it.next().expect("rates grad"),
        beta: it.next().expect("beta grad"),
        lambda: it.next().expect("lambda grad").item(),
        reader: it.collect(),
    };
    Ok(ImageStep {
        grads,
        ce: ce.item(),
        recon: recon.item(),
        aux: aux_value,
        optimized,
        logits: (*trace.logits.value()).clone(),
        residual: delta.value().data().to_vec(),
    })
}

fn fit_stream(seed: u64, epoch: usize, index: usize, view: &str) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &format!("train-fit/{epoch}/{index}/{view}"))
}

fn apply_update(model: &mut Model, opt: &mut AdamW, grads: &Grads, lrs: [f64; 4], learn_lambda: bool) {
    let mut lambda = Tensor::scalar(model.coord.lambda);
    let mut all: Vec<Tensor> = vec![grads.anchor.clone(), grads.rates.clone(), grads.beta.clone(), Tensor::scalar(grads.lambda)];
    all.extend(grads.reader.iter().cloned());
    let mut rates: Vec<f64> = vec![lrs[0], lrs[1], lrs[2], if learn_lambda { lrs[2] } else { 0.0 }];
    rates.extend(std::iter::repeat_n(lrs[3], grads.reader.len()));
    {
        let mut params: Vec<&mut Tensor> = vec![&mut model.anchor, &mut model.schedule.rates, &mut model.coord.beta, &mut lambda];
        params.extend(model.reader.params.values_mut().iter_mut());
        opt.step(&mut params, &all, &rates);
    }
    model.coord.lambda = lambda.item().max(1e-6);
}

fn param_shapes(model: &Model) -> Vec<[usize; 2]> {
    let mut shapes = vec![model.anchor.shape(), model.schedule.rates.shape(), model.coord.beta.shape(), [1, 1]];
    shapes.extend(model.reader.params.values().iter().map(Tensor::shape));
    shapes
}

/// Trains a model from scratch. When `out_dir` is given, a checkpoint is
/// written there every time validation Top-1 strictly improves.
pub fn train(config: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let model = Model::init(config, data.num_classes)?;
    train_from(model, config, data, out_dir)
}

pub fn train_from(mut model: Model, config: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::arg("training split is empty"));
    }
    let label = format!("{}-{}", config.emitter.kind.name(), config.seed);
    let mut record = RunRecord::new(label, config.seed, serde_json::to_value(config)?);
    let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut opt = AdamW::new(&param_shapes(&model), config.weight_decay);
    let kind = config.emitter.kind;
    let mut centers = ClassCenters::zeros(data.num_classes, model.anchor.len(), config.emitter.center_rate);
    let projection = (kind == EmitterKind::Contrast)
        .then(|| ContrastProjection::new(model.anchor.len(), rng::derive_seed(config.seed, "contrast/projection")));
    let val_labels = data.val_labels();
    let mut best: Option<Model> = None;
    let mut global = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &format!("shuffle/{epoch}")));
        let mut epoch_loss = LossParts::default();
        let (mut c1, mut c5) = (0usize, 0usize);

        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let diverged = |_: Error| Error::Divergence { epoch, step };
            let b = batch.len();
            let mut grads = Grads::zeros(&model);
            let mut parts = LossParts::default();
            let mut residuals = Vec::with_capacity(b);

            // Contrastive pressure needs the whole batch of embeddings first.
            let contrast_grads = if let Some(proj) = &projection {
                let mut rows_a = Vec::new();
                let mut rows_b = Vec::new();
                for &i in batch {
                    let s = &data.train[i];
                    let fa = model.fit(&s.image, &mut fit_stream(config.seed, epoch, i, "a")).map_err(diverged)?;
                    let fb = model.fit(&s.image, &mut fit_stream(config.seed, epoch, i, "b")).map_err(diverged)?;
                    let da: Vec<f64> = fa.iter().zip(model.anchor.data()).map(|(f, a)| f - a).collect();
                    let db: Vec<f64> = fb.iter().zip(model.anchor.data()).map(|(f, a)| f - a).collect();
                    rows_a.push(proj.project(&da));
                    rows_b.push(proj.project(&db));
                }
                let labels: Vec<usize> = batch.iter().map(|&i| data.train[i].label).collect();
                let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
                let tape = Tape::new();
                let mut stacked = rows_a.clone();
                stacked.extend(rows_b);
                let emb = tape.leaf(Tensor::vstack(&stacked));
                let loss = emitter::supcon_var(emb, &labels2, config.emitter.temperature);
                parts.aux = loss.item();
                let g = (*tape.grad(loss, &[emb])[0].value()).clone();
                Some(g)
            } else {
                None
            };

            for (slot, &i) in batch.iter().enumerate() {
                let s = &data.train[i];
                let mut rng_a = fit_stream(config.seed, epoch, i, "a");
                let mut rng_b = fit_stream(config.seed, epoch, i, "b");
                let (ga, gb);
                let aux = match kind {
                    EmitterKind::Center => Aux::Center(centers.center(s.label)),
                    EmitterKind::Contrast => {
                        let g = contrast_grads.as_ref().expect("contrast grads");
                        ga = g.select_rows(&[slot]);
                        gb = g.select_rows(&[slot + b]);
                        Aux::ContrastSurrogate(&ga, &gb)
                    }
                    _ => Aux::None,
                };
                let st = image_step(&model, config, s, b, &mut rng_a, Some(&mut rng_b), aux, projection.as_ref())
                    .map_err(diverged)?;
                grads.add(&st.grads);
                parts.cls += st.ce / b as f64;
                parts.recon += st.recon / b as f64;
                if kind == EmitterKind::Center {
                    parts.aux += st.aux;
                }
                parts.total += st.optimized;
                c1 += usize::from(reader::classify(&st.logits) == s.label);
                c5 += usize::from(reader::in_top_k(&st.logits, s.label, 5));
                residuals.push(st.residual);
            }
            if kind == EmitterKind::Contrast {
                parts.total += config.emitter.aux_weight * parts.aux;
            }
            if !grads.is_finite() || !parts.total.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let weighted = config.cls_weight * parts.cls + config.recon_weight * parts.recon + config.emitter.aux_weight * parts.aux;
            let lr = |peak: f64| lr_at(global, total, peak, &config.schedule);
            let lrs = [lr(config.lr_siren)?, lr(config.lr_meta_rates)?, lr(config.lr_coord)?, lr(config.lr_reader)?];
            record.steps.push(StepRecord {
                epoch,
                step,
                lr_reader: lrs[3],
                loss: parts,
                weighted_sum_error: (weighted - parts.total).abs(),
                emitter_grad_max: grads.emitter_max(),
            });
            apply_update(&mut model, &mut opt, &grads, lrs, config.learn_lambda);
            if kind == EmitterKind::Center {
                let labels: Vec<usize> = batch.iter().map(|&i| data.train[i].label).collect();
                centers = centers.updated(&residuals, &labels);
            }
            let n = steps_per_epoch as f64;
            epoch_loss.cls += parts.cls / n;
            epoch_loss.recon += parts.recon / n;
            epoch_loss.aux += parts.aux / n;
            epoch_loss.total += parts.total / n;
            global += 1;
        }

        let val_tokens: Vec<AugmentedTokenSet> =
            embed_all(&model, &data.val, config.seed, "val")?.into_iter().map(|e| e.tokens).collect();
        let val = accuracy(&model.reader, &val_tokens, &val_labels)?;
        let n = data.train.len() as f64;
        record.epochs.push(EpochRecord {
            epoch,
            train_top1: 100.0 * c1 as f64 / n,
            train_top5: 100.0 * c5 as f64 / n,
            val_top1: val.top1,
            val_top5: val.top5,
            loss: epoch_loss,
        });
        if record.best_val_top1.is_none_or(|b| val.top1 > b) {
            record.best_val_top1 = Some(val.top1);
            record.best_epoch = Some(epoch);
            if let Some(dir) = out_dir {
                let path = dir.join(format!("{}-best.ckpt", record.label));
                save_checkpoint(&path, &model)?;
                record.checkpoints.push(path);
            }
            best = Some(model.clone());
        }
    }
    record.finish();
    Ok(TrainOutcome { record, best, last: model })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreshReaderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_reader: f64,
    pub weight_decay: f64,
    pub schedule: OneCycle,
    pub packaging: PackagingMode,
    pub reader_variant: ReaderVariant,
    pub reader: ReaderShape,
    /// Seeds the fitting streams; shared by every fresh reader on one emitter.
    pub fit_seed: u64,
}

impl FreshReaderConfig {
    pub fn desk(packaging: PackagingMode) -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr_reader: 1e-3,
            weight_decay: 1e-4,
            schedule: OneCycle::default(),
            packaging,
            reader_variant: ReaderVariant::Baseline,
            reader: ReaderShape::default(),
            fit_seed: 7,
        }
    }
}

/// Fitted weights for each split, computed once from a frozen emitter.
#[derive(Debug, Clone)]
pub struct FrozenFits {
    pub train: Vec<Vec<f64>>,
    pub val: Vec<Vec<f64>>,
}

pub fn frozen_fits(emitter: &Model, data: &Dataset, fit_seed: u64) -> Result<FrozenFits> {
    let fit = |samples: &[Sample], split: &str| -> Result<Vec<Vec<f64>>> {
        samples.iter().enumerate().map(|(i, s)| emitter.fit(&s.image, &mut eval_stream(fit_seed, split, i))).collect()
    };
    Ok(FrozenFits { train: fit(&data.train, "train")?, val: fit(&data.val, "val")? })
}

/// Trains a freshly initialized reader on a frozen emitter. The emitter-side
/// parameters sit on the tape only behind `detach`, so their gradients are
/// exactly zero at every step; each step records the largest one.
pub fn fresh_reader_train(
    emitter: &Model,
    fits: &FrozenFits,
    data: &Dataset,
    config: &FreshReaderConfig,
    seed: u64,
) -> Result<(RunRecord, Model)> {
    let mut model = emitter.clone();
    model.packaging = config.packaging;
    model.reader = Reader::init(
        reader_config(config.reader, config.reader_variant, &model.layout, data.num_classes),
        rng::derive_seed(seed, "fresh-reader/init"),
    )?;
    let label = format!("fresh-{}-{}", config.packaging.name(), seed);
    let mut record = RunRecord::new(label, seed, serde_json::to_value(config)?);
    let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let shapes: Vec<[usize; 2]> = model.reader.params.values().iter().map(Tensor::shape).collect();
    let mut opt = AdamW::new(&shapes, config.weight_decay);
    let val_tokens: Vec<AugmentedTokenSet> = fits
        .val
        .iter()
        .map(|f| model.layout.tokenize(&model.package(f)))
        .collect::<Result<_>>()?;
    let val_labels = data.val_labels();
    let mut global = 0;
    let mut best: Option<f64> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &format!("fresh-shuffle/{epoch}")));
        let mut epoch_loss = LossParts::default();
        let (mut c1, mut c5) = (0usize, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let b = batch.len() as f64;
            let mut grads: Vec<Tensor> = shapes.iter().map(|&[r, c]| Tensor::zeros(r, c)).collect();
            let mut emitter_max: f64 = 0.0;
            let mut cls = 0.0;
            for &i in batch {
                let s = &data.train[i];
                let tape = Tape::new();
                let theta = tape.leaf(model.anchor.clone());
                let rates = tape.leaf(model.schedule.rates.clone());
                let beta = tape.leaf(model.coord.beta.clone());
                let lambda = tape.leaf(Tensor::scalar(model.coord.lambda));
                let bound = model.reader.params.bind(&tape);
                let phi = tape.constant(Tensor::row(fits.train[i].clone()));
                let z = coordinate::package_var(phi, theta.detach(), beta.detach(), lambda.detach(), model.packaging);
                let trace = reader::forward_var(
                    &model.reader.config,
                    &bound,
                    model.layout.tokenize_var(z),
                    &model.layout.layer_of_token,
                    &model.layout.neuron_of_token,
                )
                .map_err(|_| Error::Divergence { epoch, step })?;
                let ce = reader::cross_entropy_var(trace.logits, s.label);
                if !ce.item().is_finite() {
                    return Err(Error::Divergence { epoch, step });
                }
                let loss = ce.scale(1.0 / b);
                let mut wrt: Vec<Var> = vec![theta, rates, beta, lambda];
                wrt.extend_from_slice(&bound.vars);
                let g = tape.grad(loss, &wrt);
                for e in &g[..4] {
                    emitter_max = emitter_max.max(e.value().max_abs());
                }
                for (acc, gi) in grads.iter_mut().zip(&g[4..]) {
                    *acc = acc.add(&gi.value());
                }
                cls += ce.item() / b;
                let logits = trace.logits.value();
                c1 += usize::from(reader::classify(&logits) == s.label);
                c5 += usize::from(reader::in_top_k(&logits, s.label, 5));
            }
            let lr = lr_at(global, total, config.lr_reader, &config.schedule)?;
            let parts = LossParts { cls, recon: 0.0, aux: 0.0, total: cls };
            record.steps.push(StepRecord { epoch, step, lr_reader: lr, loss: parts, weighted_sum_error: 0.0, emitter_grad_max: emitter_max });
            let lrs = vec![lr; grads.len()];
            let mut params: Vec<&mut Tensor> = model.reader.params.values_mut().iter_mut().collect();
            opt.step(&mut params, &grads, &lrs);
            epoch_loss.cls += cls / steps_per_epoch as f64;
            epoch_loss.total += cls / steps_per_epoch as f64;
            global += 1;
        }
        let val = accuracy(&model.reader, &val_tokens, &val_labels)?;
        let n = data.train.len() as f64;
        record.epochs.push(EpochRecord {
            epoch,
            train_top1: 100.0 * c1 as f64 / n,
            train_top5: 100.0 * c5 as f64 / n,
            val_top1: val.top1,
            val_top5: val.top5,
            loss: epoch_loss,
        });
        if best.is_none_or(|v| val.top1 > v) {
            best = Some(val.top1);
            record.best_epoch = Some(epoch);
            record.best_val_top1 = Some(val.top1);
        }
    }
    record.finish();
    Ok((record, model))
}

const MAGIC: &[u8; 8] = b"WSCOPE\0\x01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArchDescriptor {
    siren: SirenConfig,
    reader: ReaderConfig,
    packaging: PackagingMode,
    token_scope: TokenScope,
    inner_steps: usize,
    sample_fraction: f64,
    groups: Vec<(String, usize)>,
    reader_params: Vec<(String, [usize; 2])>,
}

/// Writes the model as: magic, version, descriptor length and JSON, then
/// each parameter group as a length-prefixed little-endian f64 array.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let reader_flat = model.reader.params.flatten();
    let mut coord = model.coord.beta.data().to_vec();
    coord.push(model.coord.lambda);
    let groups: Vec<(&str, Vec<f64>)> = vec![
        ("anchor", model.anchor.data().to_vec()),
        ("rates", model.schedule.rates.data().to_vec()),
        ("coord", coord),
        ("reader", reader_flat),
    ];
    let desc = ArchDescriptor {
        siren: model.siren,
        reader: model.reader.config,
        packaging: model.packaging,
        token_scope: model.token_scope,
        inner_steps: model.schedule.steps,
        sample_fraction: model.schedule.sample_fraction,
        groups: groups.iter().map(|(n, v)| (n.to_string(), v.len())).collect(),
        reader_params: model.reader.params.names().iter().cloned().zip(model.reader.params.values().iter().map(Tensor::shape)).collect(),
    };
    let json = serde_json::to_vec(&desc)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, values) in &groups {
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = cur.u64()? as usize;
    let desc: ArchDescriptor = serde_json::from_slice(cur.take(len)?)?;
    let anchor = cur.f64s()?;
    let rates = cur.f64s()?;
    let mut coord = cur.f64s()?;
    let reader_flat = cur.f64s()?;
    let p = desc.siren.param_count();
    if anchor.len() != p || rates.len() != p || coord.len() != p + 1 {
        return Err(Error::Checkpoint("emitter arrays disagree with the SIREN descriptor".into()));
    }
    let lambda = coord.pop().expect("lambda entry");
    let mut reader = Reader::init(desc.reader, 0)?;
    let expected: Vec<(String, [usize; 2])> =
        reader.params.names().iter().cloned().zip(reader.params.values().iter().map(Tensor::shape)).collect();
    if expected != desc.reader_params {
        return Err(Error::Checkpoint("reader parameters disagree with the architecture".into()));
    }
    reader.params.load_flat(&reader_flat).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layout = TokenLayout::new(&desc.siren, desc.token_scope);
    Ok(Model {
        siren: desc.siren,
        anchor: Tensor::row(anchor),
        schedule: InnerLoopSchedule { rates: Tensor::row(rates), steps: desc.inner_steps, sample_fraction: desc.sample_fraction },
        coord: ReaderCoordinateParams { beta: Tensor::row(coord), lambda },
        packaging: desc.packaging,
        layout,
        token_scope: desc.token_scope,
        reader,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_endpoints() {
        let s = OneCycle::default();
        let total = 200;
        let w = s.warmup_steps(total);
        assert_eq!(w, 10);
        assert!((lr_at(0, total, 1.0, &s).unwrap() - 1.0 / 25.0).abs() < 1e-15);
        assert!((lr_at(w, total, 1.0, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!((lr_at(total - 1, total, 1.0, &s).unwrap() - 1e-4).abs() < 1e-9);
        assert!(lr_at(total, total, 1.0, &s).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Tensor::row(vec![1.0, -1.0]);
        let mut opt = AdamW::new(&[[1, 2]], 0.0);
        opt.step(&mut [&mut p], &[Tensor::row(vec![0.5, -3.0])], &[0.1]);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((p.get(0, 1) + 0.9).abs() < 1e-7);
    }
}
