//! Post-training analyses shared by the CLI and the plan runner.

use serde::{Deserialize, Serialize};

use crate::coordinate::{split_bias, BiasSplit, PackagingMode};
use crate::diagnostics::{
    self, bias_fisher, family_contrast, stage_metrics, stage_vectors, token_flow, DiagnosticsReport, FlowInput,
    StageId, StageSettings, TokenFlowReport,
};
use crate::emitter::EmitterKind;
use crate::error::{Error, Result};
use crate::funcprobe::{self, FrReport, HeadTraining, ProbeSetting, QuerySet, SpreadReport, SweepRow};
use crate::harness::dataset::{Dataset, Sample};
use crate::interventions::{self, EvalSet, InterventionKind, InterventionOutcome, LadderReport, Neutralize, ReaderOutcomes};
use crate::numcore::linalg::SpectrumSummary;
use crate::numcore::stats;
use crate::numcore::{svd_spectrum, Tensor};
use crate::reader::ReaderTrace;
use crate::siren::{image_psnr, SirenParams};
use crate::trainer::{self, fresh_reader_train, frozen_fits, FreshReaderConfig, Model, RunRecord};

/// A model's view of one split: fits, tokens, traces and PSNR per image.
pub struct Prepared {
    pub labels: Vec<usize>,
    pub fitted: Vec<Vec<f64>>,
    pub raw_offsets: Vec<Vec<f64>>,
    pub eval: EvalSet,
    pub traces: Vec<ReaderTrace>,
    pub psnr: Vec<f64>,
}

/// Fits every sample with the evaluation streams of `seed` and runs the reader.
pub fn prepare(model: &Model, samples: &[Sample], seed: u64, split: &str) -> Result<Prepared> {
    let embedded = trainer::embed_all(model, samples, seed, split)?;
    let anchor = model.anchor.data();
    let mut traces = Vec::with_capacity(samples.len());
    let mut psnr = Vec::with_capacity(samples.len());
    for (e, s) in embedded.iter().zip(samples) {
        traces.push(model.trace(&e.tokens)?);
        psnr.push(image_psnr(&SirenParams::from_flat(model.siren, &e.fitted)?, &s.image)?);
    }
    let splits: Option<Vec<BiasSplit>> = (model.packaging == PackagingMode::ResidualShift)
        .then(|| embedded.iter().map(|e| split_bias(&model.layout, &e.fitted, anchor, &model.coord, model.packaging)).collect())
        .transpose()?;
    Ok(Prepared {
        labels: samples.iter().map(|s| s.label).collect(),
        raw_offsets: embedded.iter().map(|e| e.fitted.iter().zip(anchor).map(|(f, a)| f - a).collect()).collect(),
        fitted: embedded.iter().map(|e| e.fitted.clone()).collect(),
        eval: EvalSet { tokens: embedded.into_iter().map(|e| e.tokens).collect(), labels: samples.iter().map(|s| s.label).collect(), splits },
        traces,
        psnr,
    })
}

/// The directional checks of the routed account on one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedAccount {
    pub token_flow: TokenFlowReport,
    pub raw_offset_knn: f64,
    pub last_block_knn: f64,
    pub bias_neutralize: InterventionOutcome,
    pub matched_weight_neutralize: InterventionOutcome,
    pub keep_delta_only: InterventionOutcome,
    pub keep_beta_only: InterventionOutcome,
    /// Last block 5-NN exceeds raw-offset 5-NN by at least 10 points.
    pub flow_rises: bool,
    /// `|Δ bias| ≥ 3·|Δ matched weight|`
    pub bias_specific: bool,
    /// `|Δ keep β| > |Δ keep δ|`
    pub shift_dominates: bool,
}

pub fn routed_account(name: &str, model: &Model, prepared: &Prepared, top1: f64, seed: u64) -> Result<RoutedAccount> {
    let stages = stage_vectors(&prepared.raw_offsets, &prepared.traces)?;
    let last = stages.last().map(|s| s.0).expect("stages");
    let flow = token_flow(&[FlowInput { name: name.to_string(), top1, stages }], &prepared.labels, 5)?;
    let raw = flow.value(name, StageId::RawOffset).expect("raw stage");
    let block = flow.value(name, last).expect("last stage");
    let layers = model.siren.num_hidden_layers;
    let eval = |k| interventions::evaluate(&model.reader, &prepared.eval, Some(k), seed, Neutralize::BatchMean, layers);
    let bn = eval(InterventionKind::BiasNeutralize)?;
    let mw = eval(InterventionKind::MatchedWeightNeutralize)?;
    let kd = eval(InterventionKind::KeepDeltaOnly)?;
    let kb = eval(InterventionKind::KeepBetaOnly)?;
    Ok(RoutedAccount {
        flow_rises: block >= raw + 10.0,
        bias_specific: bn.delta.abs() >= 3.0 * mw.delta.abs(),
        shift_dominates: kb.delta.abs() > kd.delta.abs(),
        token_flow: flow,
        raw_offset_knn: raw,
        last_block_knn: block,
        bias_neutralize: bn,
        matched_weight_neutralize: mw,
        keep_delta_only: kd,
        keep_beta_only: kb,
    })
}

/// One trained configuration handed to the multi-model analyses.
pub struct Trained<'a> {
    pub name: String,
    pub kind: EmitterKind,
    pub model: &'a Model,
    pub record: &'a RunRecord,
}

impl Trained<'_> {
    fn top1(&self) -> f64 {
        self.record.best_val_top1.unwrap_or(0.0)
    }
}

/// Stage metrics per configuration, family contrasts, token flow and
/// bias Fisher ratios on the validation split.
pub fn diagnose(models: &[Trained<'_>], data: &Dataset, settings: &StageSettings) -> Result<DiagnosticsReport> {
    let mut configs = Vec::new();
    let mut flows = Vec::new();
    let mut fishers = Vec::new();
    let mut raw_knn = Vec::new();
    for t in models {
        let p = prepare(t.model, &data.val, t.record.seed, "val")?;
        let stages = stage_vectors(&p.raw_offsets, &p.traces)?;
        let mut rows = Vec::new();
        for (stage, x) in &stages {
            let psnr = (*stage == StageId::RawOffset).then_some(p.psnr.as_slice());
            rows.push(stage_metrics(*stage, x, &p.labels, psnr, settings)?);
        }
        raw_knn.push((t.kind.is_cluster_pressure(), [rows[0].knn_consistency, rows[0].centroid_top1, rows[0].logreg_top1]));
        let sources = t.model.layout.bias_sources();
        let bias = Tensor::from_rows(&p.raw_offsets.iter().map(|r| sources.iter().map(|&s| r[s]).collect()).collect::<Vec<_>>());
        match bias_fisher(&bias, &p.labels) {
            Ok(f) => fishers.push((t.name.clone(), f)),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
        flows.push(FlowInput { name: t.name.clone(), top1: t.top1(), stages });
        configs.push((t.name.clone(), rows));
    }
    let family = |cluster: bool, i: usize| -> Vec<f64> { raw_knn.iter().filter(|r| r.0 == cluster).map(|r| r.1[i]).collect() };
    let mut notes = vec![format!("shallow probes run on PCA-min(128, dims-1, samples-1) compressions")];
    let families = if family(true, 0).is_empty() || family(false, 0).is_empty() {
        notes.push("family contrast needs both cluster-pressure and other configurations".into());
        vec![]
    } else {
        ["raw_offset_knn5", "raw_offset_centroid", "raw_offset_logreg"]
            .iter()
            .enumerate()
            .map(|(i, m)| family_contrast(m, &family(true, i), &family(false, i)))
            .collect::<Result<_>>()?
    };
    Ok(DiagnosticsReport {
        settings: *settings,
        configs,
        families,
        token_flow: Some(token_flow(&flows, &data.val_labels(), settings.k)?),
        bias_fisher: fishers,
        notes,
    })
}

/// Runs the full ladder on each model and aggregates it.
pub fn ladder(models: &[Trained<'_>], data: &Dataset, seed: u64) -> Result<(Vec<ReaderOutcomes>, LadderReport)> {
    let layers = models.first().map_or(1, |t| t.model.siren.num_hidden_layers);
    let kinds = InterventionKind::ladder(layers);
    let mut cells = Vec::new();
    for t in models {
        let p = prepare(t.model, &data.val, t.record.seed, "val")?;
        cells.push(interventions::run_ladder(&t.name, &t.model.reader, &p.eval, &kinds, seed, Neutralize::BatchMean, layers)?);
    }
    let report = interventions::ladder_report(&cells, &kinds);
    Ok((cells, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderRankAudit {
    pub width: usize,
    pub samples: usize,
    pub rank_90: usize,
    pub rank_99: usize,
    pub spectrum: SpectrumSummary,
    /// Full-scale reference ranks at width 16, reported alongside.
    pub reference: (usize, usize),
    pub ordered: bool,
}

/// Singular spectrum of the bias encoder's recorded activations
/// (`images × K`) on the validation split.
pub fn encoder_rank(model: &Model, data: &Dataset, seed: u64) -> Result<EncoderRankAudit> {
    if !model.reader.config.variant.bias_route() {
        return Err(Error::Variant(format!("{} reader has no bias encoder", model.reader.config.variant.name())));
    }
    let p = prepare(model, &data.val, seed, "val")?;
    let acts: Vec<Vec<f64>> = p.traces.iter().map(|t| t.bias_encoding.as_ref().expect("bias-route trace").data().to_vec()).collect();
    let spectrum = svd_spectrum(&Tensor::from_rows(&acts))?;
    let width = model.reader.config.bias_encoder_width;
    let (r90, r99) = (spectrum.rank_at(0.9), spectrum.rank_at(0.99));
    Ok(EncoderRankAudit { width, samples: acts.len(), rank_90: r90, rank_99: r99, spectrum, reference: (2, 5), ordered: r90 <= r99 && r99 <= width })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: PackagingMode,
    pub seeds: Vec<u64>,
    pub final_window: Vec<f64>,
    pub best: Vec<f64>,
    pub mean: f64,
    pub sample_sd: Option<f64>,
    pub population_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deficit {
    /// Per-seed `residual_shift − residual_only` final-window Top-1.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sample_sd: Option<f64>,
    pub population_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageAblation {
    pub emitter: String,
    pub rows: Vec<AblationRow>,
    pub residual_only_deficit: Option<Deficit>,
    pub records: Vec<RunRecord>,
    /// Largest emitter-side gradient entry seen at any fresh-reader step.
    pub max_emitter_grad: f64,
}

/// Fresh readers on one frozen emitter for each packaging mode and seed.
pub fn package_ablation(
    name: &str,
    emitter: &Model,
    data: &Dataset,
    config: &FreshReaderConfig,
    modes: &[PackagingMode],
    seeds: &[u64],
) -> Result<PackageAblation> {
    let fits = frozen_fits(emitter, data, config.fit_seed)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut max_grad: f64 = 0.0;
    for &mode in modes {
        let cfg = FreshReaderConfig { packaging: mode, ..config.clone() };
        let mut finals = Vec::new();
        let mut best = Vec::new();
        for &seed in seeds {
            let (record, _) = fresh_reader_train(emitter, &fits, data, &cfg, seed)?;
            max_grad = record.steps.iter().map(|s| s.emitter_grad_max).fold(max_grad, f64::max);
            finals.push(record.final_window_mean.unwrap_or(0.0));
            best.push(record.best_val_top1.unwrap_or(0.0));
            records.push(record);
        }
        rows.push(AblationRow {
            mode,
            seeds: seeds.to_vec(),
            mean: stats::mean(&finals),
            sample_sd: stats::sample_sd(&finals),
            population_sd: stats::population_sd(&finals),
            final_window: finals,
            best,
        });
    }
    let find = |m: PackagingMode| rows.iter().find(|r| r.mode == m);
    let residual_only_deficit = match (find(PackagingMode::ResidualShift), find(PackagingMode::ResidualOnly)) {
        (Some(a), Some(b)) => {
            let d: Vec<f64> = a.final_window.iter().zip(&b.final_window).map(|(x, y)| x - y).collect();
            Some(Deficit { mean: stats::mean(&d), sample_sd: stats::sample_sd(&d), population_sd: stats::population_sd(&d), per_seed: d })
        }
        _ => None,
    };
    Ok(PackageAblation { emitter: name.to_string(), rows, residual_only_deficit, records, max_emitter_grad: max_grad })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrPanel {
    /// Per configuration, the report under the panel's base setting.
    pub configs: Vec<(String, FrReport)>,
    pub spread: SpreadReport,
    pub sweep: Vec<SweepRow>,
    pub sweep_config: String,
}

/// Function-response features of every image (train rows then val rows)
/// and the matching PSNR targets.
pub fn response_features(model: &Model, data: &Dataset, seed: u64, coords: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let mut rows = Vec::new();
    let mut psnr = Vec::new();
    for (split, samples) in [("train", &data.train), ("val", &data.val)] {
        for (i, s) in samples.iter().enumerate() {
            let fitted = model.fit(&s.image, &mut trainer::eval_stream(seed, split, i))?;
            let params = SirenParams::from_flat(model.siren, &fitted)?;
            rows.push(funcprobe::sample_responses(&funcprobe::responder(&params), coords)?.0);
            psnr.push(image_psnr(&params, &s.image)?);
        }
    }
    Ok((Tensor::from_rows(&rows), psnr))
}

/// Function-response readers for every configuration, their spread against
/// the weight readers, and the probe-setting sweep on the first one.
pub fn frprobe_panel(models: &[Trained<'_>], data: &Dataset, base: ProbeSetting, w_sweep: &[f64], training: &HeadTraining) -> Result<FrPanel> {
    if models.is_empty() {
        return Err(Error::arg("function-response panel needs at least one configuration"));
    }
    let ntr = data.train.len();
    let split = diagnostics::Split { train: (0..ntr).collect(), test: (ntr..ntr + data.val.len()).collect() };
    let labels: Vec<usize> = data.train_labels().into_iter().chain(data.val_labels()).collect();
    let coords = base.coords()?;
    let mut configs = Vec::new();
    let mut fr = Vec::new();
    let mut wr = Vec::new();
    let mut first_features = None;
    for t in models {
        let (x, psnr) = response_features(t.model, data, t.record.seed, &coords)?;
        let rep = funcprobe::train_fr_reader(&x, &labels, &psnr, &split, &base, training)?;
        let v = rep.head(funcprobe::Head::Mlp64).and_then(|h| h.final_window_top1).unwrap_or(0.0);
        fr.push((t.name.clone(), v));
        wr.push((t.name.clone(), t.record.final_window_mean.unwrap_or(0.0)));
        if first_features.is_none() {
            first_features = Some((x, psnr));
        }
        configs.push((t.name.clone(), rep));
    }
    let spread = funcprobe::spread_compare(&fr, &wr)?;
    let (x, psnr) = first_features.expect("one configuration");
    let mut sweep_reports = Vec::new();
    for &w in w_sweep {
        let s = ProbeSetting { w_psnr: w, ..base };
        sweep_reports.push(if w == base.w_psnr { configs[0].1.clone() } else { funcprobe::train_fr_reader(&x, &labels, &psnr, &split, &s, training)? });
    }
    let side = data.height.min(data.width);
    let grid = ProbeSetting { queries: QuerySet::Grid(side, side), w_psnr: 0.0, seed: base.seed };
    let (gx, gp) = response_features(models[0].model, data, models[0].record.seed, &grid.coords()?)?;
    sweep_reports.push(funcprobe::train_fr_reader(&gx, &labels, &gp, &split, &grid, training)?);
    Ok(FrPanel { configs, spread, sweep: funcprobe::sweep_table(&sweep_reports), sweep_config: models[0].name.clone() })
}

/// Baseline, component gains and the stacked system, with the modular null
/// `baseline + Σ gains` and the stack's shortfall against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionAudit {
    pub baseline: f64,
    pub gains: Vec<(String, f64)>,
    pub stacked: f64,
    pub modular_null: f64,
    pub shortfall: f64,
}

impl CompositionAudit {
    pub fn new(baseline: f64, gains: Vec<(String, f64)>, stacked: f64) -> Self {
        let modular_null = baseline + gains.iter().map(|g| g.1).sum::<f64>();
        Self { baseline, gains, stacked, modular_null, shortfall: stacked - modular_null }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_arithmetic() {
        let a = CompositionAudit::new(60.0, vec![("g1".into(), 2.0), ("g2".into(), 1.0)], 62.0);
        assert_eq!(a.modular_null, 63.0);
        assert_eq!(a.shortfall, -1.0);
    }
}
