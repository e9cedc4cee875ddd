//! Image-specific weights from a shared anchor: the unrolled inner fitting
//! loop, the residual coordinate, and the auxiliary geometry losses.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::siren::{self, Image, SirenConfig, SirenParams};

/// Learned per-parameter step sizes plus the loop shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopSchedule {
    /// `1 × P`, same layout as the flat SIREN vector.
    pub rates: Tensor,
    pub steps: usize,
    pub sample_fraction: f64,
}

impl InnerLoopSchedule {
    pub fn constant(config: &SirenConfig, rate: f64, steps: usize, sample_fraction: f64) -> Self {
        Self { rates: Tensor::full(1, config.param_count(), rate), steps, sample_fraction }
    }

    pub fn validate(&self, config: &SirenConfig) -> Result<()> {
        if self.rates.shape() != [1, config.param_count()] {
            return Err(Error::shape("inner-loop rates must match the flat SIREN layout"));
        }
        if !self.rates.is_finite() {
            return Err(Error::NonFinite { context: "inner-loop rates".into() });
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::arg("sample fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Pixels drawn per step, `⌈ρ·H·W⌉`.
    pub fn pixels_per_step(&self, num_pixels: usize) -> usize {
        ((self.sample_fraction * num_pixels as f64).ceil() as usize).clamp(1, num_pixels)
    }
}

/// How the outer gradient treats the inner updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradient {
    /// Differentiate through the inner gradients themselves.
    #[default]
    SecondOrder,
    /// Treat each inner gradient as a constant.
    FirstOrder,
}

/// Runs the inner loop on `tape`. `anchor` and `rates` are `1 × P` rows;
/// the result is the fitted flat parameter row, differentiable with respect
/// to both.
#[allow(clippy::too_many_arguments)]
pub fn inner_fit_var<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    config: &SirenConfig,
    anchor: Var<'t>,
    rates: Var<'t>,
    steps: usize,
    sample_fraction: f64,
    image: &Image,
    rng: &mut R,
    order: MetaGradient,
) -> Result<Var<'t>> {
    let n = image.num_pixels();
    let m = ((sample_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut phi = anchor;
    for step in 0..steps {
        let subset = index::sample(rng, n, m).into_vec();
        let (coords, targets) = siren::subset_inputs(tape, image, &subset)?;
        let loss = siren::recon_loss_var(config, phi, coords, targets);
        if !loss.item().is_finite() {
            return Err(Error::Fit { step });
        }
        let mut g = tape.grad(loss, &[phi])[0];
        if order == MetaGradient::FirstOrder {
            g = g.detach();
        }
        phi = phi - rates * g;
    }
    Ok(phi)
}

/// Fits `anchor` to `image` without recording anything for the caller.
/// Produces exactly the values [`inner_fit_var`] would with the same RNG.
pub fn inner_fit<R: Rng + ?Sized>(
    anchor: &SirenParams,
    schedule: &InnerLoopSchedule,
    image: &Image,
    rng: &mut R,
) -> Result<SirenParams> {
    let config = anchor.config;
    schedule.validate(&config)?;
    let tape = Tape::new();
    let theta = tape.leaf(Tensor::row(anchor.flatten()));
    let rates = tape.leaf(schedule.rates.clone());
    let phi = inner_fit_var(
        &tape,
        &config,
        theta,
        rates,
        schedule.steps,
        schedule.sample_fraction,
        image,
        rng,
        MetaGradient::FirstOrder,
    )?;
    SirenParams::from_flat(config, phi.value().data())
}

/// `flat(fitted) − flat(anchor)`.
pub fn residual(fitted: &SirenParams, anchor: &SirenParams) -> Result<Vec<f64>> {
    if fitted.config != anchor.config {
        return Err(Error::shape("residual of networks with different architectures"));
    }
    Ok(fitted.flatten().iter().zip(anchor.flatten()).map(|(f, a)| f - a).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitterKind {
    Anchor,
    Center,
    Contrast,
    Routing,
    BiasRoute,
    StochasticFit,
}

impl EmitterKind {
    pub const ALL: [EmitterKind; 6] = [
        EmitterKind::Anchor,
        EmitterKind::Center,
        EmitterKind::Contrast,
        EmitterKind::Routing,
        EmitterKind::BiasRoute,
        EmitterKind::StochasticFit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmitterKind::Anchor => "anchor",
            EmitterKind::Center => "center",
            EmitterKind::Contrast => "contrast",
            EmitterKind::Routing => "routing",
            EmitterKind::BiasRoute => "bias_route",
            EmitterKind::StochasticFit => "stochastic_fit",
        }
    }

    /// Cluster-pressure configurations add an auxiliary loss on the exposed
    /// residual coordinate; the rest only change the reader or fitting.
    pub fn is_cluster_pressure(self) -> bool {
        matches!(self, EmitterKind::Center | EmitterKind::Contrast)
    }
}

/// One emitter configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterVariant {
    pub kind: EmitterKind,
    pub aux_weight: f64,
    pub temperature: f64,
    pub center_rate: f64,
}

impl EmitterVariant {
    pub fn new(kind: EmitterKind) -> Self {
        Self { kind, aux_weight: 1.0, temperature: 0.1, center_rate: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == EmitterKind::Contrast && !(self.temperature > 0.0) {
            return Err(Error::arg("contrastive temperature must be positive"));
        }
        if !self.aux_weight.is_finite() || self.aux_weight < 0.0 {
            return Err(Error::arg("auxiliary weight must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Per-class centers in residual space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters {
    /// `num_classes × dim`
    pub centers: Tensor,
    pub rate: f64,
}

impl ClassCenters {
    pub fn zeros(num_classes: usize, dim: usize, rate: f64) -> Self {
        Self { centers: Tensor::zeros(num_classes, dim), rate }
    }

    pub fn center(&self, class: usize) -> &[f64] {
        self.centers.row_slice(class)
    }

    /// Moves each class center present in the batch toward the batch mean of
    /// its members: `c ← c + rate·(mean − c)`.
    pub fn updated(&self, residuals: &[Vec<f64>], labels: &[usize]) -> Self {
        let mut next = self.clone();
        let dim = self.centers.cols();
        for class in 0..self.centers.rows() {
            let members: Vec<&Vec<f64>> =
                residuals.iter().zip(labels).filter(|(_, &y)| y == class).map(|(r, _)| r).collect();
            if members.is_empty() {
                continue;
            }
            let row = next.centers.row_slice_mut(class);
            for d in 0..dim {
                let m = members.iter().map(|r| r[d]).sum::<f64>() / members.len() as f64;
                row[d] += self.rate * (m - row[d]);
            }
        }
        next
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("one label per residual required"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::arg(format!("label {bad} outside {classes} classes")));
    }
    Ok(())
}

/// Mean over the batch of each residual's squared distance to its class
/// center, together with the updated centers.
pub fn center_loss(
    residuals: &[Vec<f64>],
    labels: &[usize],
    centers: &ClassCenters,
) -> Result<(f64, ClassCenters)> {
    check_labels(labels, residuals.len(), centers.centers.rows())?;
    if residuals.is_empty() {
        return Err(Error::arg("center loss over an empty batch"));
    }
    if residuals.iter().any(|r| r.len() != centers.centers.cols()) {
        return Err(Error::shape("residual width differs from center width"));
    }
    let total: f64 = residuals
        .iter()
        .zip(labels)
        .map(|(r, &y)| r.iter().zip(centers.center(y)).map(|(a, c)| (a - c).powi(2)).sum::<f64>())
        .sum();
    Ok((total / residuals.len() as f64, centers.updated(residuals, labels)))
}

/// One image's share of [`center_loss`] on a tape: `‖Δ − c‖² / batch`.
pub fn center_term_var<'t>(delta: Var<'t>, center: &[f64], batch: usize) -> Var<'t> {
    let c = delta.tape().constant(Tensor::row(center.to_vec()));
    (delta - c).square().sum().scale(1.0 / batch as f64)
}

/// Fixed random map from residual space to contrastive embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastProjection {
    /// `P × dim`
    pub matrix: Tensor,
}

impl ContrastProjection {
    pub const DIM: usize = 64;

    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (3.0 / Self::DIM as f64).sqrt();
        Self { matrix: Tensor::uniform(input_dim, Self::DIM, bound, &mut rng) }
    }

    pub fn project(&self, delta: &[f64]) -> Tensor {
        Tensor::row(delta.to_vec()).matmul(&self.matrix)
    }

    pub fn project_var<'t>(&self, delta: Var<'t>) -> Var<'t> {
        delta.matmul(delta.tape().constant(self.matrix.clone()))
    }
}

/// Rows scaled to unit length.
pub fn normalize_rows_var(x: Var<'_>) -> Var<'_> {
    let c = x.shape()[1];
    let norms = x.square().sum_cols().add_scalar(1e-24).sqrt();
    x * norms.powf(-1.0).broadcast_cols(c)
}

/// Supervised contrastive loss over `2N` embeddings (views stacked as
/// `[view_a; view_b]`) with cosine similarity scaled by `1/τ`. Anchors
/// without any positive are left out of the mean.
pub fn supcon_var<'t>(embeddings: Var<'t>, labels: &[usize], temperature: f64) -> Var<'t> {
    let tape = embeddings.tape();
    let n = labels.len();
    let z = normalize_rows_var(embeddings);
    let sim = z.matmul(z.t()).scale(1.0 / temperature);
    let mut diag = Tensor::zeros(n, n);
    for i in 0..n {
        diag.set(i, i, -1e9);
    }
    let logp = (sim + tape.constant(diag)).log_softmax_rows();

    let mut weights = Tensor::zeros(n, n);
    let positives: Vec<usize> =
        (0..n).map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count()).collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    for i in 0..n {
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                weights.set(i, j, 1.0 / (positives[i] * anchors) as f64);
            }
        }
    }
    -(logp * tape.constant(weights)).sum()
}

/// [`supcon_var`] on plain tensors.
pub fn supcon_loss(view_a: &Tensor, view_b: &Tensor, labels: &[usize], temperature: f64) -> Result<f64> {
    if view_a.shape() != view_b.shape() {
        return Err(Error::shape("contrastive views must have the same shape"));
    }
    if view_a.rows() != labels.len() {
        return Err(Error::shape("one label per view row required"));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg("contrastive temperature must be positive"));
    }
    let tape = Tape::new();
    let both = tape.constant(Tensor::vstack(&[view_a.clone(), view_b.clone()]));
    let labels2: Vec<usize> = labels.iter().chain(labels).copied().collect();
    Ok(supcon_var(both, &labels2, temperature).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siren::CoordGrid;

    fn tiny() -> SirenConfig {
        SirenConfig { num_hidden_layers: 2, hidden_dim: 4, omega0: 30.0, in_dim: 2, out_dim: 3 }
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Tensor::uniform(16, 3, 0.5, &mut rng).map(|v| v + 0.5);
        Image::new(4, 4, px).unwrap()
    }

    #[test]
    fn zero_steps_return_the_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let anchor = SirenParams::init(tiny(), &mut rng);
        let sched = InnerLoopSchedule::constant(&tiny(), 0.01, 0, 0.5);
        let fitted = inner_fit(&anchor, &sched, &image(1), &mut rng).unwrap();
        assert_eq!(fitted, anchor);
        assert!(residual(&fitted, &anchor).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn one_full_batch_step_matches_hand_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchor = SirenParams::init(tiny(), &mut rng);
        let mut sched = InnerLoopSchedule::constant(&tiny(), 0.0, 1, 1.0);
        sched.rates = Tensor::uniform(1, tiny().param_count(), 0.02, &mut rng).map(f64::abs);
        let img = image(4);
        let fitted = inner_fit(&anchor, &sched, &img, &mut rng).unwrap();

        // Gradient of the full-image loss taken on its own tape.
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::row(anchor.flatten()));
        let coords = tape.constant(CoordGrid::new(4, 4).coords);
        let targets = tape.constant(img.pixels.clone());
        let loss = siren::recon_loss_var(&tiny(), theta, coords, targets);
        let g = tape.grad(loss, &[theta])[0].value();
        let want: Vec<f64> = anchor
            .flatten()
            .iter()
            .zip(g.data())
            .zip(sched.rates.data())
            .map(|((t, g), a)| t - a * g)
            .collect();
        for (a, b) in fitted.flatten().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn fit_is_reproducible() {
        let anchor = SirenParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(9));
        let sched = InnerLoopSchedule::constant(&tiny(), 0.01, 4, 0.3);
        let a = inner_fit(&anchor, &sched, &image(2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = inner_fit(&anchor, &sched, &image(2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_inner_loss_reports_the_step() {
        let anchor = SirenParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(9));
        let sched = InnerLoopSchedule::constant(&tiny(), 1e200, 3, 1.0);
        let err = inner_fit(&anchor, &sched, &image(2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap_err();
        assert!(matches!(err, Error::Fit { step: 1 | 2 }), "{err:?}");
    }

    #[test]
    fn center_loss_at_origin_is_mean_squared_norm() {
        let c = ClassCenters::zeros(2, 2, 0.5);
        let (loss, next) = center_loss(&[vec![3.0, 4.0], vec![1.0, 0.0]], &[0, 0], &c).unwrap();
        assert_eq!(loss, (25.0 + 1.0) / 2.0);
        assert_eq!(next.center(0), &[1.0, 1.0]);
        assert_eq!(next.center(1), &[0.0, 0.0]);
    }

    #[test]
    fn supcon_two_identical_views_is_log_three() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let loss = supcon_loss(&v, &v, &[0, 0], 0.1).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12, "{loss}");
    }
}
