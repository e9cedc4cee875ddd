//! Exposed-geometry and reader-depth metrics: neighbor consistency,
//! centroid and shallow probes, PSNR ridge, token flow and family contrasts.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::linalg::{intrinsic_dimension, pca_fit_project, ridge_r2};
use crate::numcore::stats::{self, WelchT};
use crate::numcore::{pearson, spearman, svd_spectrum, Tensor};
use crate::reader::ReaderTrace;
use crate::rng;

/// Where along the pipeline a representation is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    RawOffset,
    ReaderInput,
    /// Output of reader block `m`, counted from 1.
    Block(usize),
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageId::RawOffset => f.write_str("raw_offset"),
            StageId::ReaderInput => f.write_str("z0"),
            StageId::Block(m) => write!(f, "h{m}"),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest rows of `pool` to `query`, ordered by
/// `(distance, index)`, skipping `exclude`.
fn nearest(pool: &Tensor, rows: &[usize], query: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = rows
        .iter()
        .filter(|&&j| Some(j) != exclude)
        .map(|&j| (squared_distance(query, pool.row_slice(j)), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Percentage of each point's `k` nearest neighbors (self excluded) that
/// share its label, pooled over all points.
pub fn knn_consistency(x: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::shape("one label per row"));
    }
    if k == 0 || n <= k {
        return Err(Error::arg(format!("{n} samples cannot supply {k} neighbors each")));
    }
    let all: Vec<usize> = (0..n).collect();
    let mut hits = 0usize;
    for i in 0..n {
        hits += nearest(x, &all, x.row_slice(i), k, Some(i)).iter().filter(|&&j| labels[j] == labels[i]).count();
    }
    Ok(100.0 * hits as f64 / (n * k) as f64)
}

/// Majority vote over the `k` nearest training rows. Vote ties go to the
/// class whose first member appears earliest in the neighbor order.
pub fn knn_predict(x: &Tensor, labels: &[usize], train: &[usize], query: &[f64], k: usize) -> usize {
    let nn = nearest(x, train, query, k, None);
    let mut counts: Vec<(usize, usize, usize)> = Vec::new(); // (class, votes, first position)
    for (pos, &j) in nn.iter().enumerate() {
        match counts.iter_mut().find(|c| c.0 == labels[j]) {
            Some(c) => c.1 += 1,
            None => counts.push((labels[j], 1, pos)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    counts[0].0
}

/// Disjoint train/test row indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle of `0..n`; the first `⌈test_fraction·n⌉` rows become test.
    pub fn seeded(n: usize, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::arg("test fraction must lie in (0, 1)"));
        }
        let n_test = ((test_fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
        if n_test == 0 {
            return Err(Error::arg("too few samples to split"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, "diagnostics/split"));
        let test = idx[..n_test].to_vec();
        let train = idx[n_test..].to_vec();
        Ok(Self { train, test })
    }

    /// Per-class seeded shuffle: `⌈test_fraction·count⌉` rows of each class
    /// become test, but every class keeps at least one training row.
    pub fn stratified(labels: &[usize], test_fraction: f64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::arg("test fraction must lie in (0, 1)"));
        }
        let mut rng = rng::stream(seed, "diagnostics/stratified-split");
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in classes {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            members.shuffle(&mut rng);
            let n_test = ((test_fraction * members.len() as f64).ceil() as usize).min(members.len() - 1);
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        if test.is_empty() {
            return Err(Error::arg("too few samples per class to split"));
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self { train, test })
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::arg("split has an empty side"));
        }
        if self.train.iter().chain(&self.test).any(|&i| i >= n) {
            return Err(Error::arg("split index out of range"));
        }
        if self.train.iter().any(|i| self.test.contains(i)) {
            return Err(Error::arg("train and test splits overlap"));
        }
        Ok(())
    }
}

fn accuracy(pred: impl Iterator<Item = (usize, usize)>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, y) in pred {
        hit += usize::from(p == y);
        n += 1;
    }
    100.0 * hit as f64 / n.max(1) as f64
}

/// Test Top-1 of the kNN classifier fitted on the train side.
pub fn knn_probe(x: &Tensor, labels: &[usize], split: &Split, k: usize) -> Result<f64> {
    split.check(x.rows())?;
    if split.train.len() < k {
        return Err(Error::arg("fewer training rows than neighbors"));
    }
    Ok(accuracy(split.test.iter().map(|&i| (knn_predict(x, labels, &split.train, x.row_slice(i), k), labels[i]))))
}

/// Class means over the train side, one row per class that appears there.
pub fn class_means(x: &Tensor, labels: &[usize], rows: &[usize]) -> Vec<(usize, Vec<f64>)> {
    let mut classes: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let members: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == c).collect();
            let mut m = vec![0.0; x.cols()];
            for &i in &members {
                for (a, v) in m.iter_mut().zip(x.row_slice(i)) {
                    *a += v;
                }
            }
            m.iter_mut().for_each(|a| *a /= members.len() as f64);
            (c, m)
        })
        .collect()
}

/// Test Top-1 when each test row takes the label of the nearest train
/// class mean (lowest class index on ties).
pub fn nearest_centroid_top1(x: &Tensor, labels: &[usize], split: &Split) -> Result<f64> {
    split.check(x.rows())?;
    let means = class_means(x, labels, &split.train);
    if let Some(&i) = split.test.iter().find(|&&i| !means.iter().any(|(c, _)| *c == labels[i])) {
        return Err(Error::arg(format!("class {} has no training rows", labels[i])));
    }
    Ok(accuracy(split.test.iter().map(|&i| {
        let q = x.row_slice(i);
        let best = means
            .iter()
            .map(|(c, m)| (squared_distance(q, m), *c))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("at least one class");
        (best.1, labels[i])
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeBudget {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeBudget {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.5, l2: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    /// Training loss did not decrease over the budget.
    pub non_convergent: bool,
}

/// Column standardization fitted on `rows`; constant columns are centered only.
pub(crate) fn standardizer(x: &Tensor, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        for (m, v) in mean.iter_mut().zip(x.row_slice(i)) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in rows {
        for ((s, v), m) in sd.iter_mut().zip(x.row_slice(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd = sd.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

pub(crate) fn standardize_rows(x: &Tensor, rows: &[usize], mean: &[f64], sd: &[f64]) -> Tensor {
    let d = x.cols();
    let mut out = Tensor::zeros(rows.len(), d);
    for (r, &i) in rows.iter().enumerate() {
        for (j, v) in x.row_slice(i).iter().enumerate() {
            out.set(r, j, (v - mean[j]) / sd[j]);
        }
    }
    out
}

pub(crate) fn softmax_row(logits: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    logits.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Multinomial logistic regression by full-batch gradient descent from a
/// zero start, on standardized features.
pub fn logreg_probe(x: &Tensor, labels: &[usize], split: &Split, budget: ProbeBudget) -> Result<ProbeResult> {
    split.check(x.rows())?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let (mean, sd) = standardizer(x, &split.train);
    let xt = standardize_rows(x, &split.train, &mean, &sd);
    let yt: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let (n, d) = (xt.rows(), xt.cols());
    let mut w = Tensor::zeros(d, classes);
    let mut b = vec![0.0; classes];
    let loss_of = |w: &Tensor, b: &[f64]| -> (f64, Tensor) {
        let mut p = xt.matmul(w);
        let mut loss = 0.0;
        for r in 0..n {
            let row = p.row_slice_mut(r);
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
            softmax_row(row);
            loss -= row[yt[r]].max(1e-300).ln() / n as f64;
        }
        (loss, p)
    };
    let (first_loss, _) = loss_of(&w, &b);
    for _ in 0..budget.epochs {
        let (_, mut p) = loss_of(&w, &b);
        for (r, &y) in yt.iter().enumerate() {
            p.set(r, y, p.get(r, y) - 1.0);
        }
        let p = p.scale(1.0 / n as f64);
        let gw = xt.transpose().matmul(&p).add(&w.scale(budget.l2));
        let gb = p.sum_rows();
        w = w.sub(&gw.scale(budget.lr));
        for (bj, g) in b.iter_mut().zip(gb.data()) {
            *bj -= budget.lr * g;
        }
    }
    let (last_loss, _) = loss_of(&w, &b);
    let xs = standardize_rows(x, &split.test, &mean, &sd);
    let mut logits = xs.matmul(&w);
    for r in 0..logits.rows() {
        for (v, bj) in logits.row_slice_mut(r).iter_mut().zip(&b) {
            *v += bj;
        }
    }
    let top1 = accuracy(split.test.iter().enumerate().map(|(r, &i)| (argmax(logits.row_slice(r)), labels[i])));
    Ok(ProbeResult { top1, non_convergent: !(last_loss < first_loss) || !last_loss.is_finite() })
}

/// Width used before shallow probes: `min(128, dims − 1, samples − 1)`.
pub fn compression_width(samples: usize, dims: usize) -> usize {
    128.min(dims.saturating_sub(1)).min(samples.saturating_sub(1)).max(1)
}

/// Between-class over within-class variance per bias coordinate: the mean
/// over coordinates and the mean of the 50 largest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasFisher {
    pub mean: f64,
    pub top50_mean: f64,
    /// Coordinates whose within-class variance is zero are left out.
    pub coordinates: usize,
}

pub fn bias_fisher(bias: &Tensor, labels: &[usize]) -> Result<BiasFisher> {
    let n = bias.rows();
    if labels.len() != n || n == 0 {
        return Err(Error::shape("one label per row"));
    }
    let all: Vec<usize> = (0..n).collect();
    let means = class_means(bias, labels, &all);
    let mut ratios = Vec::new();
    for j in 0..bias.cols() {
        let mu = (0..n).map(|i| bias.get(i, j)).sum::<f64>() / n as f64;
        let mut between = 0.0;
        let mut within = 0.0;
        for (c, m) in &means {
            let members = labels.iter().filter(|&&l| l == *c).count() as f64;
            between += members * (m[j] - mu).powi(2);
        }
        for i in 0..n {
            let m = &means.iter().find(|(c, _)| *c == labels[i]).expect("own class").1;
            within += (bias.get(i, j) - m[j]).powi(2);
        }
        if within > 0.0 {
            ratios.push(between / within);
        }
    }
    if ratios.is_empty() {
        return Err(Error::Degenerate("every bias coordinate is constant within classes".into()));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    ratios.sort_by(|a, b| b.total_cmp(a));
    let top = &ratios[..ratios.len().min(50)];
    Ok(BiasFisher { mean, top50_mean: top.iter().sum::<f64>() / top.len() as f64, coordinates: ratios.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub k: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub budget: ProbeBudget,
    pub ridge_alpha: f64,
}

impl Default for StageSettings {
    fn default() -> Self {
        Self { k: 5, test_fraction: 0.3, seed: 0, budget: ProbeBudget::default(), ridge_alpha: 1.0 }
    }
}

/// One row of the diagnostic matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: StageId,
    pub knn_consistency: f64,
    pub centroid_top1: f64,
    pub logreg_top1: f64,
    pub logreg_non_convergent: bool,
    pub knn_probe_top1: f64,
    /// Held-out R² of ridge regression onto per-image PSNR.
    pub psnr_ridge_r2: Option<f64>,
    pub id95: usize,
    pub pca_width: usize,
    pub rank_90: usize,
    pub rank_99: usize,
}

/// Metrics on raw vectors: neighbor consistency on the uncompressed rows,
/// probes and id95 on the PCA-compressed rows.
pub fn stage_metrics(
    stage: StageId,
    x: &Tensor,
    labels: &[usize],
    psnr: Option<&[f64]>,
    settings: &StageSettings,
) -> Result<StageMetrics> {
    let split = Split::stratified(labels, settings.test_fraction, settings.seed)?;
    let width = compression_width(x.rows(), x.cols());
    let pca = pca_fit_project(x, width)?;
    let z = &pca.projected;
    let lr = logreg_probe(z, labels, &split, settings.budget)?;
    let spectrum = svd_spectrum(&x.centered().0)?;
    let psnr_ridge_r2 = match psnr {
        Some(p) => match ridge_r2(z, p, settings.ridge_alpha, &split.train, &split.test) {
            Ok(r) => Some(r),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(StageMetrics {
        stage,
        knn_consistency: knn_consistency(x, labels, settings.k)?,
        centroid_top1: nearest_centroid_top1(z, labels, &split)?,
        logreg_top1: lr.top1,
        logreg_non_convergent: lr.non_convergent,
        knn_probe_top1: knn_probe(z, labels, &split, settings.k)?,
        psnr_ridge_r2,
        id95: intrinsic_dimension(&pca.variances, 0.95),
        pca_width: width,
        rank_90: spectrum.rank_at(0.9),
        rank_99: spectrum.rank_at(0.99),
    })
}

/// Per-image mean token of every reader stage, preceded by the raw offsets.
pub fn stage_vectors(raw_offsets: &[Vec<f64>], traces: &[ReaderTrace]) -> Result<Vec<(StageId, Tensor)>> {
    if raw_offsets.len() != traces.len() || traces.is_empty() {
        return Err(Error::arg("need one trace per raw offset and at least one image"));
    }
    let mean_token = |t: &Tensor| t.column_means().into_data();
    let mut out = vec![
        (StageId::RawOffset, Tensor::from_rows(raw_offsets)),
        (StageId::ReaderInput, Tensor::from_rows(&traces.iter().map(|t| mean_token(&t.z0)).collect::<Vec<_>>())),
    ];
    for m in 0..traces[0].h.len() {
        let rows: Vec<Vec<f64>> = traces.iter().map(|t| mean_token(&t.h[m])).collect();
        out.push((StageId::Block(m + 1), Tensor::from_rows(&rows)));
    }
    Ok(out)
}

/// One trained configuration's stage vectors and Top-1.
#[derive(Debug, Clone)]
pub struct FlowInput {
    pub name: String,
    pub top1: f64,
    pub stages: Vec<(StageId, Tensor)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub config: String,
    pub stage: StageId,
    pub knn_consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCorrelation {
    pub stage: StageId,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFlowReport {
    pub rows: Vec<FlowRow>,
    pub correlations: Vec<StageCorrelation>,
    pub correlations_omitted: Option<String>,
}

impl TokenFlowReport {
    pub fn value(&self, config: &str, stage: StageId) -> Option<f64> {
        self.rows.iter().find(|r| r.config == config && r.stage == stage).map(|r| r.knn_consistency)
    }
}

/// Stage-wise `k`-NN consistency per configuration, and its correlation with
/// Top-1 across configurations.
pub fn token_flow(inputs: &[FlowInput], labels: &[usize], k: usize) -> Result<TokenFlowReport> {
    let mut rows = Vec::new();
    for inp in inputs {
        for (stage, x) in &inp.stages {
            rows.push(FlowRow { config: inp.name.clone(), stage: *stage, knn_consistency: knn_consistency(x, labels, k)? });
        }
    }
    let mut correlations = Vec::new();
    let mut omitted = None;
    if inputs.len() < 2 {
        omitted = Some("correlations need at least two configurations".to_string());
    } else {
        let mut stages: Vec<StageId> = inputs[0].stages.iter().map(|s| s.0).collect();
        stages.retain(|s| inputs.iter().all(|i| i.stages.iter().any(|t| t.0 == *s)));
        let top1: Vec<f64> = inputs.iter().map(|i| i.top1).collect();
        for s in stages {
            let metric: Vec<f64> = inputs
                .iter()
                .map(|i| rows.iter().find(|r| r.config == i.name && r.stage == s).expect("row").knn_consistency)
                .collect();
            correlations.push(StageCorrelation { stage: s, pearson: pearson(&metric, &top1).ok(), spearman: spearman(&metric, &top1).ok() });
        }
    }
    Ok(TokenFlowReport { rows, correlations, correlations_omitted: omitted })
}

/// Cluster-pressure versus other families, over per-configuration values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyContrast {
    pub metric: String,
    pub cluster_values: Vec<f64>,
    pub other_values: Vec<f64>,
    pub cluster_mean: f64,
    pub cluster_sd: Option<f64>,
    pub other_mean: f64,
    pub other_sd: Option<f64>,
    /// `cluster_mean − other_mean`
    pub delta: f64,
    pub welch: Option<WelchT>,
}

pub fn family_contrast(metric: &str, cluster: &[f64], other: &[f64]) -> Result<FamilyContrast> {
    if cluster.is_empty() || other.is_empty() {
        return Err(Error::arg("each family needs at least one configuration"));
    }
    let cm = stats::mean(cluster);
    let om = stats::mean(other);
    Ok(FamilyContrast {
        metric: metric.to_string(),
        cluster_values: cluster.to_vec(),
        other_values: other.to_vec(),
        cluster_mean: cm,
        cluster_sd: stats::sample_sd(cluster),
        other_mean: om,
        other_sd: stats::sample_sd(other),
        delta: cm - om,
        welch: stats::welch_t(cluster, other).ok(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub settings: StageSettings,
    /// Per configuration, one metric row per stage.
    pub configs: Vec<(String, Vec<StageMetrics>)>,
    pub families: Vec<FamilyContrast>,
    pub token_flow: Option<TokenFlowReport>,
    pub bias_fisher: Vec<(String, BiasFisher)>,
    pub notes: Vec<String>,
}

impl DiagnosticsReport {
    /// Largest disagreement between each family's stored Δ and the Δ
    /// recomputed from its own per-configuration values.
    pub fn family_delta_error(&self) -> f64 {
        self.families
            .iter()
            .map(|f| ((stats::mean(&f.cluster_values) - stats::mean(&f.other_values)) - f.delta).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clusters() -> (Tensor, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i / 20;
            rows.push(vec![c as f64 * 100.0 + (i % 20) as f64 * 0.01, (i % 7) as f64 * 0.01]);
            labels.push(c);
        }
        (Tensor::from_rows(&rows), labels)
    }

    #[test]
    fn separated_clusters_are_fully_consistent() {
        let (x, y) = two_clusters();
        assert_eq!(knn_consistency(&x, &y, 5).unwrap(), 100.0);
        let split = Split::seeded(40, 0.25, 3).unwrap();
        assert_eq!(nearest_centroid_top1(&x, &y, &split).unwrap(), 100.0);
        assert!(knn_consistency(&x, &y, 40).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let a = Split::seeded(50, 0.3, 9).unwrap();
        assert_eq!(a, Split::seeded(50, 0.3, 9).unwrap());
        assert_eq!(a.test.len(), 15);
        assert!(a.train.iter().all(|i| !a.test.contains(i)));
    }

    #[test]
    fn separable_logreg() {
        let (x, y) = two_clusters();
        let split = Split::seeded(40, 0.25, 1).unwrap();
        let r = logreg_probe(&x, &y, &split, ProbeBudget::default()).unwrap();
        assert!(r.top1 >= 99.0);
        assert!(!r.non_convergent);
    }

    #[test]
    fn two_point_correlation() {
        let labels = vec![0, 0, 1, 1];
        let x = Tensor::from_rows(&[vec![0.0], vec![0.1], vec![5.0], vec![5.1]]);
        let mk = |name: &str, top1| FlowInput { name: name.into(), top1, stages: vec![(StageId::RawOffset, x.clone())] };
        let single = token_flow(&[mk("a", 60.0)], &labels, 1).unwrap();
        assert!(single.correlations_omitted.is_some());
        assert_eq!(single.value("a", StageId::RawOffset), Some(100.0));
    }

    #[test]
    fn stage_order_and_names() {
        let mut s = vec![StageId::Block(2), StageId::ReaderInput, StageId::Block(1), StageId::RawOffset];
        s.sort();
        let names: Vec<String> = s.iter().map(ToString::to_string).collect();
        assert_eq!(names, ["raw_offset", "z0", "h1", "h2"]);
    }

    #[test]
    fn fisher_of_perfectly_split_coordinate_dominates() {
        let bias = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.1, 2.0], vec![5.0, 1.5], vec![5.1, 1.4]]);
        let f = bias_fisher(&bias, &[0, 0, 1, 1]).unwrap();
        assert_eq!(f.coordinates, 2);
        assert!(f.top50_mean == f.mean);
    }
}
