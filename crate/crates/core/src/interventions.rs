//! Targeted edits of reader-visible token coordinates, evaluated against a
//! frozen reader, and the aggregated intervention ladder.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coordinate::{AugmentedTokenSet, BiasSplit};
use crate::error::{Error, Result};
use crate::numcore::stats::{self, PairedT};
use crate::reader::{self, Reader, ReaderVariant};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InterventionKind {
    BiasNeutralize,
    MatchedWeightNeutralize,
    CrossSampleShuffle,
    WithinClassShuffle,
    GaussianDummy,
    EmpiricalDummy,
    /// Keeps `δ_b`, removes `β_b`.
    KeepDeltaOnly,
    /// Keeps `β_b`, removes `δ_b`.
    KeepBetaOnly,
    /// Bias neutralization restricted to tokens of one hidden layer.
    LayerOnly(usize),
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BiasNeutralize => f.write_str("bias_neutralize"),
            Self::MatchedWeightNeutralize => f.write_str("matched_weight_neutralize"),
            Self::CrossSampleShuffle => f.write_str("cross_sample_shuffle"),
            Self::WithinClassShuffle => f.write_str("within_class_shuffle"),
            Self::GaussianDummy => f.write_str("gaussian_dummy"),
            Self::EmpiricalDummy => f.write_str("empirical_dummy"),
            Self::KeepDeltaOnly => f.write_str("keep_delta_only"),
            Self::KeepBetaOnly => f.write_str("keep_beta_only"),
            Self::LayerOnly(l) => write!(f, "layer_{l}_only"),
        }
    }
}

impl InterventionKind {
    /// The full ladder for a SIREN with `hidden_layers` hidden layers: the
    /// first and last layer-only rows.
    pub fn ladder(hidden_layers: usize) -> Vec<Self> {
        vec![
            Self::BiasNeutralize,
            Self::MatchedWeightNeutralize,
            Self::CrossSampleShuffle,
            Self::WithinClassShuffle,
            Self::GaussianDummy,
            Self::EmpiricalDummy,
            Self::KeepDeltaOnly,
            Self::KeepBetaOnly,
            Self::LayerOnly(0),
            Self::LayerOnly(hidden_layers.saturating_sub(1)),
        ]
    }

    /// Paired control for the targeted edit, when the row has one.
    pub fn control(self, hidden_layers: usize) -> Option<Self> {
        match self {
            Self::BiasNeutralize => Some(Self::MatchedWeightNeutralize),
            Self::CrossSampleShuffle => Some(Self::WithinClassShuffle),
            Self::GaussianDummy => Some(Self::EmpiricalDummy),
            Self::KeepBetaOnly => Some(Self::KeepDeltaOnly),
            Self::LayerOnly(0) if hidden_layers > 1 => Some(Self::LayerOnly(hidden_layers - 1)),
            _ => None,
        }
    }

    /// The explicit bias-route reader feeds the bias column through its own
    /// encoder, so edits defined relative to the projected bias entry do
    /// not apply; the shuffles and layer rows still do.
    pub fn applicable(self, variant: ReaderVariant) -> bool {
        !variant.bias_route() || matches!(self, Self::CrossSampleShuffle | Self::WithinClassShuffle | Self::LayerOnly(_))
    }
}

/// Value that replaces a neutralized entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Neutralize {
    /// Batch mean at the same token position.
    #[default]
    BatchMean,
    Zero,
}

pub struct Context<'a> {
    pub labels: &'a [usize],
    /// Bias split per sample; required by the keep rows.
    pub splits: Option<&'a [BiasSplit]>,
    pub seed: u64,
    pub neutralize: Neutralize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edited {
    pub tokens: Vec<AugmentedTokenSet>,
    /// Column the edit was allowed to touch.
    pub column: usize,
    /// Token rows the edit was allowed to touch.
    pub rows: Vec<usize>,
    pub flags: Vec<String>,
}

fn column(sets: &[AugmentedTokenSet], col: usize) -> Vec<Vec<f64>> {
    sets.iter().map(|s| (0..s.tokens.rows()).map(|t| s.tokens.get(t, col)).collect()).collect()
}

fn position_means(values: &[Vec<f64>]) -> Vec<f64> {
    let n = values.len() as f64;
    (0..values[0].len()).map(|t| values.iter().map(|v| v[t]).sum::<f64>() / n).collect()
}

/// Population variance over every (sample, token) entry of a column.
pub fn column_variance(sets: &[AugmentedTokenSet], col: usize) -> f64 {
    let vals: Vec<f64> = column(sets, col).into_iter().flatten().collect();
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

/// The weight column whose batch variance is closest to the bias column's
/// (lowest index on ties).
pub fn matched_weight_column(sets: &[AugmentedTokenSet]) -> usize {
    let bias_col = sets[0].bias_column;
    let target = column_variance(sets, bias_col);
    (0..bias_col)
        .map(|c| ((column_variance(sets, c) - target).abs(), c))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map_or(0, |(_, c)| c)
}

fn check_batch(sets: &[AugmentedTokenSet], labels: &[usize]) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::arg("empty token batch"));
    }
    if labels.len() != sets.len() {
        return Err(Error::shape("one label per token set"));
    }
    let shape = sets[0].tokens.shape();
    if sets.iter().any(|s| s.tokens.shape() != shape || s.bias_column != sets[0].bias_column) {
        return Err(Error::shape("token sets in a batch must share a layout"));
    }
    Ok(())
}

/// Applies one edit to a batch of token sets. Only the declared column and
/// rows can change; everything else is copied bit for bit.
pub fn apply(sets: &[AugmentedTokenSet], kind: InterventionKind, ctx: &Context<'_>) -> Result<Edited> {
    check_batch(sets, ctx.labels)?;
    let n = sets.len();
    let bias_col = sets[0].bias_column;
    let num_tokens = sets[0].tokens.rows();
    let all_rows: Vec<usize> = (0..num_tokens).collect();
    let mut rng = rng::stream(ctx.seed, &format!("intervention/{kind}"));
    let mut flags = Vec::new();
    let neutral = |values: &[Vec<f64>]| match ctx.neutralize {
        Neutralize::BatchMean => position_means(values),
        Neutralize::Zero => vec![0.0; values[0].len()],
    };

    let (col, rows, new_values): (usize, Vec<usize>, Vec<Vec<f64>>) = match kind {
        InterventionKind::BiasNeutralize | InterventionKind::MatchedWeightNeutralize | InterventionKind::LayerOnly(_) => {
            let col = if kind == InterventionKind::MatchedWeightNeutralize { matched_weight_column(sets) } else { bias_col };
            let rows: Vec<usize> = match kind {
                InterventionKind::LayerOnly(l) => {
                    let r: Vec<usize> = all_rows.iter().copied().filter(|&t| sets[0].layer_of_token[t] == l).collect();
                    if r.is_empty() {
                        return Err(Error::arg(format!("no tokens belong to hidden layer {l}")));
                    }
                    r
                }
                _ => all_rows.clone(),
            };
            let current = column(sets, col);
            let replacement = neutral(&current);
            let edited = current
                .iter()
                .map(|v| v.iter().enumerate().map(|(t, x)| if rows.contains(&t) { replacement[t] } else { *x }).collect())
                .collect();
            (col, rows, edited)
        }
        InterventionKind::CrossSampleShuffle => {
            if n < 2 {
                return Err(Error::arg("shuffles need at least two samples"));
            }
            let current = column(sets, bias_col);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            (bias_col, all_rows, perm.iter().map(|&j| current[j].clone()).collect())
        }
        InterventionKind::WithinClassShuffle => {
            if n < 2 {
                return Err(Error::arg("shuffles need at least two samples"));
            }
            let current = column(sets, bias_col);
            let mut out = current.clone();
            let mut classes: Vec<usize> = ctx.labels.to_vec();
            classes.sort_unstable();
            classes.dedup();
            for c in classes {
                let members: Vec<usize> = (0..n).filter(|&i| ctx.labels[i] == c).collect();
                if members.len() < 2 {
                    flags.push(format!("class {c} has a single sample and was left unedited"));
                    continue;
                }
                let mut perm = members.clone();
                perm.shuffle(&mut rng);
                for (&dst, &src) in members.iter().zip(&perm) {
                    out[dst] = current[src].clone();
                }
            }
            (bias_col, all_rows, out)
        }
        InterventionKind::GaussianDummy => {
            let current = column(sets, bias_col);
            let means = position_means(&current);
            let sds: Vec<f64> = (0..num_tokens)
                .map(|t| (current.iter().map(|v| (v[t] - means[t]).powi(2)).sum::<f64>() / n as f64).sqrt())
                .collect();
            let dists: Vec<Normal<f64>> = means
                .iter()
                .zip(&sds)
                .map(|(&m, &s)| Normal::new(m, s).map_err(|e| Error::arg(e.to_string())))
                .collect::<Result<_>>()?;
            let out = (0..n).map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect()).collect();
            (bias_col, all_rows, out)
        }
        InterventionKind::EmpiricalDummy => {
            let current = column(sets, bias_col);
            let out = (0..n)
                .map(|_| (0..num_tokens).map(|t| current[rng.random_range(0..n)][t]).collect())
                .collect();
            (bias_col, all_rows, out)
        }
        InterventionKind::KeepDeltaOnly | InterventionKind::KeepBetaOnly => {
            let splits = ctx
                .splits
                .ok_or_else(|| Error::Mode(format!("{kind} needs the residual-shift bias split")))?;
            if splits.len() != n || splits.iter().any(|s| s.delta_b.len() != num_tokens) {
                return Err(Error::shape("one bias split per sample, one entry per token"));
            }
            let out = splits.iter().map(|s| keep(s, kind).recombine()).collect();
            (bias_col, all_rows, out)
        }
    };

    let mut tokens = sets.to_vec();
    for (set, vals) in tokens.iter_mut().zip(&new_values) {
        for &t in &rows {
            set.tokens.set(t, col, vals[t]);
        }
    }
    Ok(Edited { tokens, column: col, rows, flags })
}

/// The keep rows as an edit of the split itself, so they compose.
pub fn keep(split: &BiasSplit, kind: InterventionKind) -> BiasSplit {
    let mut s = split.clone();
    match kind {
        InterventionKind::KeepDeltaOnly => s.beta_b.iter_mut().for_each(|v| *v = 0.0),
        InterventionKind::KeepBetaOnly => s.delta_b.iter_mut().for_each(|v| *v = 0.0),
        _ => {}
    }
    s
}

/// Every `(sample, token, column)` whose bits differ between two batches.
pub fn edit_mask(before: &[AugmentedTokenSet], after: &[AugmentedTokenSet]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, (a, b)) in before.iter().zip(after).enumerate() {
        for t in 0..a.tokens.rows() {
            for c in 0..a.tokens.cols() {
                if a.tokens.get(t, c).to_bits() != b.tokens.get(t, c).to_bits() {
                    out.push((i, t, c));
                }
            }
        }
    }
    out
}

/// Validation tokens, labels and optional bias splits for one frozen reader.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub tokens: Vec<AugmentedTokenSet>,
    pub labels: Vec<usize>,
    pub splits: Option<Vec<BiasSplit>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    /// `None` is the identity edit.
    pub kind: Option<InterventionKind>,
    pub applicable: bool,
    pub reason: Option<String>,
    pub baseline_top1: f64,
    pub top1: f64,
    /// Percentage points, intervened minus baseline.
    pub delta: f64,
    pub control: Option<InterventionKind>,
    pub control_delta: Option<f64>,
    /// `delta − control_delta`
    pub paired_gap: Option<f64>,
    /// Descriptive paired test over per-image correctness.
    pub paired_p: Option<f64>,
    pub flags: Vec<String>,
}

fn correctness(reader: &Reader, tokens: &[AugmentedTokenSet], labels: &[usize]) -> Result<Vec<f64>> {
    tokens
        .iter()
        .zip(labels)
        .map(|(t, &y)| Ok(if reader::classify(&reader.forward(t)?.logits) == y { 1.0 } else { 0.0 }))
        .collect()
}

fn top1(correct: &[f64]) -> f64 {
    100.0 * correct.iter().sum::<f64>() / correct.len().max(1) as f64
}

/// Top-1 change of one edit against the untouched baseline on the same
/// images and the same reader. The reader is only read.
pub fn evaluate(
    reader: &Reader,
    set: &EvalSet,
    kind: Option<InterventionKind>,
    seed: u64,
    neutralize: Neutralize,
    hidden_layers: usize,
) -> Result<InterventionOutcome> {
    let base = correctness(reader, &set.tokens, &set.labels)?;
    let baseline_top1 = top1(&base);
    let variant = reader.config.variant;
    let mut outcome = InterventionOutcome {
        kind,
        applicable: true,
        reason: None,
        baseline_top1,
        top1: baseline_top1,
        delta: 0.0,
        control: None,
        control_delta: None,
        paired_gap: None,
        paired_p: None,
        flags: vec![],
    };
    let Some(kind) = kind else { return Ok(outcome) };
    if !kind.applicable(variant) {
        outcome.applicable = false;
        outcome.reason = Some(format!("{kind} does not apply to the {} reader", variant.name()));
        return Ok(outcome);
    }
    let ctx = Context { labels: &set.labels, splits: set.splits.as_deref(), seed, neutralize };
    let run = |k: InterventionKind| -> Result<(Vec<f64>, Vec<String>)> {
        let edited = apply(&set.tokens, k, &ctx)?;
        Ok((correctness(reader, &edited.tokens, &set.labels)?, edited.flags))
    };
    let (after, flags) = run(kind)?;
    outcome.top1 = top1(&after);
    outcome.delta = outcome.top1 - baseline_top1;
    outcome.flags = flags;
    outcome.paired_p = match stats::paired_t(&after, &base) {
        Ok(PairedT::Test { p, .. }) => Some(p),
        _ => None,
    };
    if let Some(ctrl) = kind.control(hidden_layers).filter(|c| c.applicable(variant)) {
        let (c, _) = run(ctrl)?;
        let cd = top1(&c) - baseline_top1;
        outcome.control = Some(ctrl);
        outcome.control_delta = Some(cd);
        outcome.paired_gap = Some(outcome.delta - cd);
    }
    Ok(outcome)
}

/// Every ladder row for one reader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderOutcomes {
    pub reader: String,
    pub outcomes: Vec<InterventionOutcome>,
}

pub fn run_ladder(
    name: &str,
    reader: &Reader,
    set: &EvalSet,
    kinds: &[InterventionKind],
    seed: u64,
    neutralize: Neutralize,
    hidden_layers: usize,
) -> Result<ReaderOutcomes> {
    let outcomes = kinds
        .iter()
        .map(|&k| evaluate(reader, set, Some(k), seed, neutralize, hidden_layers))
        .collect::<Result<_>>()?;
    Ok(ReaderOutcomes { reader: name.to_string(), outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub kind: InterventionKind,
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    pub min: f64,
    pub max: f64,
    pub control: Option<InterventionKind>,
    pub control_mean: Option<f64>,
    pub gap_mean: Option<f64>,
    /// Descriptive paired test of `Δ_b` against `Δ_ctrl` over readers.
    pub paired: Option<PairedT>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub rows: Vec<LadderRow>,
    pub omitted: Vec<(InterventionKind, String)>,
    /// Reader names and kinds labelling the heatmap axes.
    pub readers: Vec<String>,
    pub kinds: Vec<InterventionKind>,
    /// `heatmap[r][k]`, `None` for N/A cells.
    pub heatmap: Vec<Vec<Option<f64>>>,
    pub metadata: Vec<String>,
}

fn lookup(c: &ReaderOutcomes, k: InterventionKind) -> Option<&InterventionOutcome> {
    c.outcomes.iter().find(|o| o.kind == Some(k) && o.applicable)
}

/// Aggregates per-reader outcomes into rows over applicable readers.
pub fn ladder_report(cells: &[ReaderOutcomes], kinds: &[InterventionKind]) -> LadderReport {
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for &k in kinds {
        let cells_k: Vec<&InterventionOutcome> = cells.iter().filter_map(|c| lookup(c, k)).collect();
        if cells_k.is_empty() {
            omitted.push((k, "no applicable reader".to_string()));
            continue;
        }
        let deltas: Vec<f64> = cells_k.iter().map(|o| o.delta).collect();
        let paired_cells: Vec<(f64, f64)> = cells_k.iter().filter_map(|o| o.control_delta.map(|c| (o.delta, c))).collect();
        let control = cells_k.iter().find_map(|o| o.control);
        let (a, b): (Vec<f64>, Vec<f64>) = paired_cells.iter().copied().unzip();
        rows.push(LadderRow {
            kind: k,
            n: deltas.len(),
            mean: stats::mean(&deltas),
            sd: stats::sample_sd(&deltas),
            min: deltas.iter().copied().fold(f64::INFINITY, f64::min),
            max: deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            control,
            control_mean: (!b.is_empty()).then(|| stats::mean(&b)),
            gap_mean: (!a.is_empty()).then(|| stats::mean(&a) - stats::mean(&b)),
            paired: stats::paired_t(&a, &b).ok(),
        });
    }
    let heatmap = cells
        .iter()
        .map(|c| kinds.iter().map(|&k| lookup(c, k).map(|o| o.delta)).collect())
        .collect();
    LadderReport {
        rows,
        omitted,
        readers: cells.iter().map(|c| c.reader.clone()).collect(),
        kinds: kinds.to_vec(),
        heatmap,
        metadata: vec![
            "neutralize replaces entries with the per-position batch mean unless configured otherwise".into(),
            "gaussian dummy fits mean and s.d. per token position".into(),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn batch() -> (Vec<AugmentedTokenSet>, Vec<usize>) {
        let sets = (0..6)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..4).map(|t| vec![i as f64 + t as f64, (i * t) as f64 * 0.5, 0.1 * i as f64 - t as f64]).collect();
                AugmentedTokenSet { tokens: Tensor::from_rows(&rows), layer_of_token: vec![0, 0, 1, 1], neuron_of_token: vec![0, 1, 0, 1], bias_column: 2 }
            })
            .collect();
        (sets, vec![0, 0, 1, 1, 2, 3])
    }

    #[test]
    fn neutralize_touches_only_bias_column() {
        let (sets, labels) = batch();
        let ctx = Context { labels: &labels, splits: None, seed: 1, neutralize: Neutralize::BatchMean };
        let e = apply(&sets, InterventionKind::BiasNeutralize, &ctx).unwrap();
        assert!(edit_mask(&sets, &e.tokens).iter().all(|&(_, _, c)| c == 2));
        let l = apply(&sets, InterventionKind::LayerOnly(1), &ctx).unwrap();
        assert!(edit_mask(&sets, &l.tokens).iter().all(|&(_, t, c)| c == 2 && t >= 2));
    }

    #[test]
    fn singleton_classes_are_flagged() {
        let (sets, labels) = batch();
        let ctx = Context { labels: &labels, splits: None, seed: 1, neutralize: Neutralize::BatchMean };
        let e = apply(&sets, InterventionKind::WithinClassShuffle, &ctx).unwrap();
        assert_eq!(e.flags.len(), 2);
        for i in 4..6 {
            assert_eq!(e.tokens[i], sets[i]);
        }
    }

    #[test]
    fn keep_rows_compose_to_zero() {
        let s = BiasSplit { delta_b: vec![0.3, -0.2], beta_b: vec![1.0, 2.0], lambda: 100.0 };
        let both = keep(&keep(&s, InterventionKind::KeepDeltaOnly), InterventionKind::KeepBetaOnly);
        assert!(both.recombine().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_route_applicability() {
        assert!(!InterventionKind::BiasNeutralize.applicable(ReaderVariant::BiasRoute));
        assert!(InterventionKind::CrossSampleShuffle.applicable(ReaderVariant::BiasRoute));
        assert!(InterventionKind::KeepBetaOnly.applicable(ReaderVariant::Baseline));
    }
}
