//! Sinusoidal implicit image networks: coordinates in `[-1, 1]²` to RGB.
//!
//! A network with `L` hidden layers has `L` sine layers followed by one
//! linear output layer. Every sine layer computes `sin(ω0 · (x Wᵀ + b))`.
//! Weights are stored `[out, in]`; the flat layout used everywhere else in
//! the crate walks the layers input→output, each as its row-major `W`
//! followed by `b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Returned by [`psnr`] when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirenConfig {
    pub num_hidden_layers: usize,
    pub hidden_dim: usize,
    pub omega0: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Default for SirenConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Where one layer lives inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn weight_index(&self, row: usize, col: usize) -> usize {
        self.weight_offset + row * self.fan_in + col
    }

    pub fn bias_index(&self, row: usize) -> usize {
        self.bias_offset + row
    }
}

impl SirenConfig {
    /// Four hidden layers of width 32 with `ω0 = 30`.
    pub fn desk() -> Self {
        Self { num_hidden_layers: 4, hidden_dim: 32, omega0: 30.0, in_dim: 2, out_dim: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_hidden_layers == 0 {
            return Err(Error::arg("SIREN needs at least one hidden layer of width ≥ 1"));
        }
        if !(self.omega0 > 0.0) {
            return Err(Error::arg("SIREN omega0 must be positive"));
        }
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::arg("SIREN input and output widths must be positive"));
        }
        Ok(())
    }

    /// `num_hidden_layers + 1` layouts; the last one is the linear output.
    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut out = Vec::with_capacity(self.num_hidden_layers + 1);
        let mut offset = 0;
        let mut fan_in = self.in_dim;
        for l in 0..=self.num_hidden_layers {
            let fan_out = if l == self.num_hidden_layers { self.out_dim } else { self.hidden_dim };
            out.push(LayerLayout {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
            fan_in = fan_out;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }
}

/// Weights and biases of one network, ordered input→output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirenParams {
    pub config: SirenConfig,
    /// `[fan_out, fan_in]` per layer.
    pub weights: Vec<Tensor>,
    /// `[1, fan_out]` per layer.
    pub biases: Vec<Tensor>,
}

impl SirenParams {
    /// Standard sinusoidal initialization: first layer `U(±1/in_dim)`, later
    /// layers `U(±sqrt(6/fan_in)/ω0)`, biases from the same ranges.
    pub fn init<R: Rng + ?Sized>(config: SirenConfig, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, layer) in config.layers().iter().enumerate() {
            let bound = if l == 0 {
                1.0 / layer.fan_in as f64
            } else {
                (6.0 / layer.fan_in as f64).sqrt() / config.omega0
            };
            weights.push(Tensor::uniform(layer.fan_out, layer.fan_in, bound, rng));
            biases.push(Tensor::uniform(1, layer.fan_out, bound, rng));
        }
        Self { config, weights, biases }
    }

    pub fn zeros(config: SirenConfig) -> Self {
        let layers = config.layers();
        Self {
            config,
            weights: layers.iter().map(|l| Tensor::zeros(l.fan_out, l.fan_in)).collect(),
            biases: layers.iter().map(|l| Tensor::zeros(1, l.fan_out)).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn from_flat(config: SirenConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.param_count() {
            return Err(Error::shape(format!(
                "flat SIREN vector has {} entries, architecture needs {}",
                flat.len(),
                config.param_count()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in config.layers() {
            let w = &flat[l.weight_offset..l.bias_offset];
            let b = &flat[l.bias_offset..l.bias_offset + l.fan_out];
            weights.push(Tensor::new(l.fan_out, l.fan_in, w.to_vec()));
            biases.push(Tensor::row(b.to_vec()));
        }
        Ok(Self { config, weights, biases })
    }
}

/// Pixel-center coordinates of an `H × W` image, row-major, scaled so the
/// first and last pixel in each direction sit at exactly `-1` and `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    /// `(H·W) × 2`, columns `(x, y)`.
    pub coords: Tensor,
}

fn axis(n: usize, i: usize) -> f64 {
    if n == 1 {
        0.0
    } else if i + 1 == n {
        1.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

impl CoordGrid {
    pub fn new(height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for r in 0..height {
            for c in 0..width {
                data.push(axis(width, c));
                data.push(axis(height, r));
            }
        }
        Self { height, width, coords: Tensor::new(height * width, 2, data) }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, pixels: &[usize]) -> Tensor {
        self.coords.select_rows(pixels)
    }
}

/// An RGB image with values in `[0, 1]`, stored as `(H·W) × 3` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Tensor,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Tensor) -> Result<Self> {
        if pixels.shape() != [height * width, 3] {
            return Err(Error::shape(format!(
                "image {height}x{width} needs {}x3 pixels, got {:?}",
                height * width,
                pixels.shape()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Evaluates the network at each row of `coords` (`n × in_dim`).
pub fn siren_forward(params: &SirenParams, coords: &Tensor) -> Result<Tensor> {
    if params.weights.iter().chain(&params.biases).any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { context: "SIREN parameters".into() });
    }
    if coords.cols() != params.config.in_dim {
        return Err(Error::shape(format!(
            "coordinates have {} columns, SIREN expects {}",
            coords.cols(),
            params.config.in_dim
        )));
    }
    let omega = params.config.omega0;
    let last = params.weights.len() - 1;
    let mut x = coords.clone();
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let mut pre = x.matmul(&w.transpose());
        for r in 0..pre.rows() {
            for (v, bias) in pre.row_slice_mut(r).iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
        x = if l == last { pre } else { pre.map(|v| (omega * v).sin()) };
    }
    Ok(x)
}

/// Tape version of [`siren_forward`] over a `1 × P` flat parameter row.
pub fn forward_var<'t>(config: &SirenConfig, flat: Var<'t>, coords: Var<'t>) -> Var<'t> {
    let layers = config.layers();
    let last = layers.len() - 1;
    let mut x = coords;
    for (l, layer) in layers.iter().enumerate() {
        let w = flat
            .slice_flat(layer.weight_offset, layer.fan_in * layer.fan_out)
            .reshape(layer.fan_out, layer.fan_in);
        let b = flat.slice_flat(layer.bias_offset, layer.fan_out);
        let pre = x.matmul(w.t()).add_row(b);
        x = if l == last { pre } else { pre.scale(config.omega0).sin() };
    }
    x
}

fn check_subset(subset: &[usize], n: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::arg("reconstruction subset is empty"));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= n) {
        return Err(Error::arg(format!("pixel index {bad} outside image of {n} pixels")));
    }
    let mut seen = vec![false; n];
    for &i in subset {
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::arg(format!("pixel index {i} repeated in subset")));
        }
    }
    Ok(())
}

/// Mean squared error over the listed pixels (all three channels).
pub fn recon_loss(params: &SirenParams, image: &Image, subset: &[usize]) -> Result<f64> {
    check_subset(subset, image.num_pixels())?;
    let grid = CoordGrid::new(image.height, image.width);
    let pred = siren_forward(params, &grid.subset(subset))?;
    Ok(mse(&pred, &image.pixels.select_rows(subset)))
}

/// Tape version of [`recon_loss`] given pre-selected coordinates and targets.
pub fn recon_loss_var<'t>(
    config: &SirenConfig,
    flat: Var<'t>,
    coords: Var<'t>,
    targets: Var<'t>,
) -> Var<'t> {
    (forward_var(config, flat, coords) - targets).square().mean()
}

/// Builds the tape inputs for a pixel subset: `(coords, targets)`.
pub fn subset_inputs<'t>(tape: &'t Tape, image: &Image, subset: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
    check_subset(subset, image.num_pixels())?;
    let grid = CoordGrid::new(image.height, image.width);
    Ok((tape.constant(grid.subset(subset)), tape.constant(image.pixels.select_rows(subset))))
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).map(|v| v * v).mean()
}

/// Peak signal-to-noise ratio for unit-range images, `10·log10(1/MSE)`,
/// capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::arg(format!(
            "psnr shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let m = mse(pred, target);
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// PSNR of a fitted network rendered on the full grid of `image`.
pub fn image_psnr(params: &SirenParams, image: &Image) -> Result<f64> {
    let grid = CoordGrid::new(image.height, image.width);
    psnr(&siren_forward(params, &grid.coords)?, &image.pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SirenConfig {
        SirenConfig { num_hidden_layers: 2, hidden_dim: 3, omega0: 30.0, in_dim: 2, out_dim: 3 }
    }

    #[test]
    fn desk_layout_counts() {
        let c = SirenConfig::desk();
        assert_eq!(c.param_count(), (2 * 32 + 32) + 3 * (32 * 32 + 32) + (32 * 3 + 3));
        let layers = c.layers();
        assert_eq!(layers.len(), 5);
        assert_eq!(layers[4].bias_offset + 3, c.param_count());
    }

    #[test]
    fn zero_network_outputs_its_output_bias() {
        let mut p = SirenParams::zeros(tiny());
        p.biases[2] = Tensor::row(vec![0.2, 0.5, 0.9]);
        let out = siren_forward(&p, &CoordGrid::new(4, 4).coords).unwrap();
        for r in 0..out.rows() {
            assert_eq!(out.row_slice(r), &[0.2, 0.5, 0.9]);
        }
    }

    #[test]
    fn single_hidden_unit_matches_closed_form() {
        let cfg = SirenConfig { num_hidden_layers: 1, hidden_dim: 1, omega0: 30.0, in_dim: 2, out_dim: 3 };
        let p = SirenParams {
            config: cfg,
            weights: vec![Tensor::new(1, 2, vec![0.3, -0.2]), Tensor::new(3, 1, vec![1.0, 2.0, -1.0])],
            biases: vec![Tensor::row(vec![0.05]), Tensor::row(vec![0.1, 0.0, 0.3])],
        };
        let (x, y) = (0.4, -0.7);
        let h = (30.0f64 * (0.3 * x - 0.2 * y + 0.05)).sin();
        let out = siren_forward(&p, &Tensor::new(1, 2, vec![x, y])).unwrap();
        let want = [h + 0.1, 2.0 * h, -h + 0.3];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_parameter_is_an_error() {
        let mut p = SirenParams::zeros(tiny());
        p.weights[1].set(0, 0, f64::NAN);
        assert!(matches!(siren_forward(&p, &CoordGrid::new(2, 2).coords), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grid_corners_are_exact() {
        let g = CoordGrid::new(16, 16);
        assert_eq!(g.coords.row_slice(0), &[-1.0, -1.0]);
        assert_eq!(g.coords.row_slice(15), &[1.0, -1.0]);
        assert_eq!(g.coords.row_slice(255), &[1.0, 1.0]);
    }

    #[test]
    fn gray_on_checkerboard_is_a_quarter() {
        let cfg = tiny();
        let mut p = SirenParams::zeros(cfg);
        p.biases[2] = Tensor::row(vec![0.5; 3]);
        let px: Vec<f64> = (0..16).flat_map(|i| vec![((i / 4 + i % 4) % 2) as f64; 3]).collect();
        let img = Image::new(4, 4, Tensor::new(16, 3, px)).unwrap();
        let all: Vec<usize> = (0..16).collect();
        assert_eq!(recon_loss(&p, &img, &all).unwrap(), 0.25);
        assert!(recon_loss(&p, &img, &[]).is_err());
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::zeros(1, 4);
        assert!((psnr(&a, &Tensor::full(1, 4, 0.1)).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn flat_round_trip_and_tape_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SirenParams::init(tiny(), &mut rng);
        let flat = p.flatten();
        assert_eq!(SirenParams::from_flat(tiny(), &flat).unwrap(), p);
        let grid = CoordGrid::new(3, 5);
        let tape = Tape::new();
        let out = forward_var(&tiny(), tape.leaf(Tensor::row(flat)), tape.constant(grid.coords.clone()));
        assert_eq!(*out.value(), siren_forward(&p, &grid.coords).unwrap());
    }
}
