//! A weight-free control reader: classify images from sampled SIREN outputs
//! at fixed query coordinates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, argmax, knn_predict, standardize_rows, standardizer, Split};
use crate::error::{Error, Result};
use crate::numcore::linalg::ridge_r2;
use crate::numcore::{Tape, Tensor, Var};
use crate::rng;
use crate::siren::{siren_forward, CoordGrid, SirenParams};
use crate::trainer::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySet {
    /// `n` points uniform on `[−1, 1]²`, drawn once per seed.
    Random(usize),
    Grid(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSetting {
    pub queries: QuerySet,
    pub w_psnr: f64,
    pub seed: u64,
}

impl ProbeSetting {
    pub fn label(&self) -> String {
        let q = match self.queries {
            QuerySet::Random(n) => format!("random-{n}"),
            QuerySet::Grid(h, w) => format!("grid-{h}x{w}"),
        };
        format!("{q}, w_psnr={}", self.w_psnr)
    }

    /// Query coordinates, `n × 2`.
    pub fn coords(&self) -> Result<Tensor> {
        match self.queries {
            QuerySet::Random(0) | QuerySet::Grid(0, _) | QuerySet::Grid(_, 0) => Err(Error::arg("empty query set")),
            QuerySet::Random(n) => {
                let mut r = rng::stream(self.seed, "funcprobe/queries");
                Ok(Tensor::new(n, 2, (0..2 * n).map(|_| r.random_range(-1.0..=1.0)).collect()))
            }
            QuerySet::Grid(h, w) => Ok(CoordGrid::new(h, w).coords),
        }
    }
}

/// SIREN outputs at the query points, flattened point-major (`3·n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFeatures(pub Vec<f64>);

/// Evaluates an opaque function at the query points. Nothing but the
/// function's outputs reaches the features.
pub fn sample_responses(eval: &dyn Fn(&Tensor) -> Result<Tensor>, coords: &Tensor) -> Result<ResponseFeatures> {
    Ok(ResponseFeatures(eval(coords)?.into_data()))
}

/// Wraps fitted SIREN parameters as an evaluate-at-coordinates callable.
pub fn responder(params: &SirenParams) -> impl Fn(&Tensor) -> Result<Tensor> + '_ {
    move |coords| siren_forward(params, coords)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    Logreg,
    Knn5,
    Mlp64,
    PsnrRidge,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Logreg => "logreg",
            Head::Knn5 => "knn5",
            Head::Mlp64 => "mlp64",
            Head::PsnrRidge => "psnr_ridge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadResult {
    pub head: Head,
    /// Validation Top-1 after each epoch; empty for the ridge head.
    pub per_epoch: Vec<f64>,
    /// Mean of the last five epochs.
    pub final_window_top1: Option<f64>,
    /// Held-out R² onto PSNR, ridge head only.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrReport {
    pub setting: ProbeSetting,
    pub heads: Vec<HeadResult>,
    pub skipped_batches: usize,
}

impl FrReport {
    pub fn head(&self, head: Head) -> Option<&HeadResult> {
        self.heads.iter().find(|h| h.head == head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub ridge_alpha: f64,
}

impl Default for HeadTraining {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, lr: 3e-3, weight_decay: 1e-4, hidden: 64, ridge_alpha: 1.0 }
    }
}

fn final_window(per_epoch: &[f64]) -> Option<f64> {
    let tail = &per_epoch[per_epoch.len().saturating_sub(5)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Mean cross-entropy of `logits` (`B × C`) against `labels`.
fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let [b, c] = logits.shape();
    let idx: Vec<usize> = labels.iter().enumerate().map(|(r, &y)| r * c + y).collect();
    logits.log_softmax_rows().gather(&idx, 1, b).mean().neg()
}

/// Trains one trainable head. Its last output column regresses the
/// standardized PSNR target and is weighted by `w_psnr`.
#[allow(clippy::too_many_arguments)]
fn train_head(
    head: Head,
    x: &Tensor,
    labels: &[usize],
    psnr_z: &[f64],
    split: &Split,
    classes: usize,
    w_psnr: f64,
    cfg: &HeadTraining,
    seed: u64,
    skipped: &mut usize,
) -> Vec<f64> {
    let d = x.cols();
    let out = classes + 1;
    let mut init = rng::stream(seed, &format!("funcprobe/init/{}", head.name()));
    let mut params: Vec<Tensor> = match head {
        Head::Logreg => vec![Tensor::zeros(d, out), Tensor::zeros(1, out)],
        _ => {
            let b1 = (6.0 / (d + cfg.hidden) as f64).sqrt();
            let b2 = (6.0 / (cfg.hidden + out) as f64).sqrt();
            vec![
                Tensor::uniform(d, cfg.hidden, b1, &mut init),
                Tensor::zeros(1, cfg.hidden),
                Tensor::uniform(cfg.hidden, out, b2, &mut init),
                Tensor::zeros(1, out),
            ]
        }
    };
    let shapes: Vec<[usize; 2]> = params.iter().map(Tensor::shape).collect();
    let mut opt = AdamW::new(&shapes, cfg.weight_decay);
    let mut order = split.train.clone();
    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    let mut shuffle = rng::stream(seed, &format!("funcprobe/shuffle/{}", head.name()));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            if ys.iter().all(|&y| y == ys[0]) {
                *skipped += 1;
                continue;
            }
            let tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let xb = tape.constant(x.select_rows(batch));
            let logits_all = logits_of(head, &vars, xb);
            let b = batch.len();
            let class_idx: Vec<usize> = (0..b).flat_map(|r| (0..classes).map(move |c| r * out + c)).collect();
            let logits = logits_all.gather(&class_idx, b, classes);
            let mut loss = cross_entropy(logits, &ys);
            if w_psnr > 0.0 {
                let p_idx: Vec<usize> = (0..b).map(|r| r * out + classes).collect();
                let pred = logits_all.gather(&p_idx, b, 1);
                let target = tape.constant(Tensor::new(b, 1, batch.iter().map(|&i| psnr_z[i]).collect()));
                loss = loss + (pred - target).square().mean().scale(w_psnr);
            }
            let grads: Vec<Tensor> = tape.grad(loss, &vars).iter().map(|g| (*g.value()).clone()).collect();
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            opt.step(&mut refs, &grads, &vec![cfg.lr; grads.len()]);
        }
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let logits = logits_of(head, &vars, tape.constant(x.select_rows(&split.test))).value();
        let hits = split
            .test
            .iter()
            .enumerate()
            .filter(|(r, &i)| argmax(&logits.row_slice(*r)[..classes]) == labels[i])
            .count();
        per_epoch.push(100.0 * hits as f64 / split.test.len() as f64);
    }
    per_epoch
}

fn logits_of<'t>(head: Head, p: &[Var<'t>], x: Var<'t>) -> Var<'t> {
    match head {
        Head::Logreg => x.matmul(p[0]).add_row(p[1]),
        _ => x.matmul(p[0]).add_row(p[1]).relu().matmul(p[2]).add_row(p[3]),
    }
}

/// Trains every head on one feature matrix (`images × features`).
pub fn train_fr_reader(
    features: &Tensor,
    labels: &[usize],
    psnr: &[f64],
    split: &Split,
    setting: &ProbeSetting,
    cfg: &HeadTraining,
) -> Result<FrReport> {
    if labels.len() != features.rows() || psnr.len() != features.rows() {
        return Err(Error::shape("one label and one PSNR target per feature row"));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let (mean, sd) = standardizer(features, &(0..features.rows()).filter(|i| split.train.contains(i)).collect::<Vec<_>>());
    let all: Vec<usize> = (0..features.rows()).collect();
    let x = standardize_rows(features, &all, &mean, &sd);
    let train_psnr: Vec<f64> = split.train.iter().map(|&i| psnr[i]).collect();
    let pm = train_psnr.iter().sum::<f64>() / train_psnr.len() as f64;
    let ps = (train_psnr.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / train_psnr.len() as f64).sqrt().max(1e-12);
    let psnr_z: Vec<f64> = psnr.iter().map(|v| (v - pm) / ps).collect();

    let mut skipped = 0;
    let mut heads = Vec::new();
    for head in [Head::Logreg, Head::Mlp64] {
        let per_epoch = train_head(head, &x, labels, &psnr_z, split, classes, setting.w_psnr, cfg, setting.seed, &mut skipped);
        heads.push(HeadResult { head, final_window_top1: final_window(&per_epoch), per_epoch, r2: None });
    }
    let knn = diagnostics::knn_probe(&x, labels, split, 5)?;
    heads.push(HeadResult { head: Head::Knn5, per_epoch: vec![knn; cfg.epochs], final_window_top1: Some(knn), r2: None });
    let r2 = match ridge_r2(&x, psnr, cfg.ridge_alpha, &split.train, &split.test) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    heads.push(HeadResult { head: Head::PsnrRidge, per_epoch: vec![], final_window_top1: None, r2 });
    Ok(FrReport { setting: *setting, heads, skipped_batches: skipped })
}

/// Prediction of the kNN-5 head for one query row, shared with diagnostics.
pub fn knn5_predict(x: &Tensor, labels: &[usize], train: &[usize], query: &[f64]) -> usize {
    knn_predict(x, labels, train, query, 5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    pub range: f64,
}

impl Range {
    fn of(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max, range: max - min }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadReport {
    pub configs: Vec<String>,
    pub function_reader: Range,
    pub weight_reader: Range,
    /// Function-reader range over weight-reader range; 1 when both are
    /// zero, `None` when only the weight-reader range is zero.
    pub ratio: Option<f64>,
    /// The function reader's spread is narrower than the weight reader's.
    pub narrower: bool,
}

/// Compares final-window Top-1 spreads over the same configuration panel.
pub fn spread_compare(fr: &[(String, f64)], wr: &[(String, f64)]) -> Result<SpreadReport> {
    if fr.is_empty() || fr.len() != wr.len() || fr.iter().zip(wr).any(|(a, b)| a.0 != b.0) {
        return Err(Error::arg("function-reader and weight-reader panels must list the same configurations"));
    }
    let f = Range::of(&fr.iter().map(|p| p.1).collect::<Vec<_>>());
    let w = Range::of(&wr.iter().map(|p| p.1).collect::<Vec<_>>());
    let ratio = match (f.range == 0.0, w.range == 0.0) {
        (true, true) => Some(1.0),
        (false, true) => None,
        _ => Some(f.range / w.range),
    };
    Ok(SpreadReport { configs: fr.iter().map(|p| p.0.clone()).collect(), function_reader: f, weight_reader: w, ratio, narrower: f.range < w.range })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub w_psnr: f64,
    pub head: Head,
    pub final_window_top1: Option<f64>,
    pub r2: Option<f64>,
}

pub fn sweep_table(reports: &[FrReport]) -> Vec<SweepRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.heads.iter().map(move |h| SweepRow {
                setting: r.setting.label(),
                w_psnr: r.setting.w_psnr,
                head: h.head,
                final_window_top1: h.final_window_top1,
                r2: h.r2,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siren::SirenConfig;

    #[test]
    fn grid_features_match_pointwise_calls() {
        let cfg = SirenConfig { num_hidden_layers: 2, hidden_dim: 8, omega0: 30.0, in_dim: 2, out_dim: 3 };
        let p = SirenParams::init(cfg, &mut rng::stream(1, "t"));
        let s = ProbeSetting { queries: QuerySet::Grid(4, 4), w_psnr: 0.0, seed: 0 };
        let coords = s.coords().unwrap();
        let f = sample_responses(&responder(&p), &coords).unwrap();
        assert_eq!(f.0.len(), 48);
        for q in 0..16 {
            let one = siren_forward(&p, &coords.select_rows(&[q])).unwrap();
            assert_eq!(&f.0[3 * q..3 * q + 3], one.data());
        }
    }

    #[test]
    fn random_queries_are_fixed_per_seed() {
        let s = ProbeSetting { queries: QuerySet::Random(256), w_psnr: 0.0, seed: 5 };
        assert_eq!(s.coords().unwrap(), s.coords().unwrap());
        assert!(s.coords().unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn quoted_ranges_flag_narrower_function_reader() {
        let names = ["a", "b"].map(String::from);
        let fr = vec![(names[0].clone(), 50.5), (names[1].clone(), 50.9)];
        let wr = vec![(names[0].clone(), 58.6), (names[1].clone(), 63.2)];
        let r = spread_compare(&fr, &wr).unwrap();
        assert!((r.function_reader.range - 0.4).abs() < 1e-9);
        assert!((r.weight_reader.range - 4.6).abs() < 1e-9);
        assert!(r.narrower);
        assert_eq!(spread_compare(&fr, &fr).unwrap().ratio, Some(1.0));
        assert!(spread_compare(&fr, &wr[..1]).is_err());
    }

    #[test]
    fn one_hot_features_are_separable() {
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rows: Vec<Vec<f64>> = labels.iter().map(|&y| (0..3).map(|c| if c == y { 1.0 } else { 0.0 }).collect()).collect();
        let x = Tensor::from_rows(&rows);
        let psnr: Vec<f64> = (0..n).map(|i| 20.0 + i as f64 * 0.1).collect();
        let split = Split::seeded(n, 0.3, 2).unwrap();
        let s = ProbeSetting { queries: QuerySet::Random(1), w_psnr: 1.0, seed: 0 };
        let r = train_fr_reader(&x, &labels, &psnr, &split, &s, &HeadTraining { epochs: 40, ..Default::default() }).unwrap();
        assert!(r.head(Head::Logreg).unwrap().final_window_top1.unwrap() >= 99.0);
    }
}
