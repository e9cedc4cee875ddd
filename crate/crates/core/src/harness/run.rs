//! Executing a plan: training cells, lane aggregation and the requested
//! analyses, each written as a JSON artifact under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coordinate::PackagingMode;
use crate::diagnostics::StageSettings;
use crate::emitter::EmitterKind;
use crate::error::{Error, Result};
use crate::funcprobe::ProbeSetting;
use crate::harness::analysis::{self, CompositionAudit, Trained};
use crate::harness::dataset::{ingest, Dataset};
use crate::harness::plan::{ExperimentPlan, FrProbeSpec, ReportKind};
use crate::harness::report;
use crate::harness::write_atomic;
use crate::numcore::stats;
use crate::trainer::{self, FreshReaderConfig, Model, RunRecord};

/// One (variant, seed) training cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: EmitterKind,
    pub seed: u64,
    pub label: String,
    pub record: Option<RunRecord>,
    pub checkpoint: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRow {
    pub variant: EmitterKind,
    pub seeds: Vec<u64>,
    /// Checkpoint-best validation Top-1 per successful seed.
    pub best: Vec<f64>,
    pub final_window: Vec<f64>,
    pub best_mean: Option<f64>,
    pub best_sd: Option<f64>,
    pub final_mean: Option<f64>,
    pub final_sd: Option<f64>,
    /// Row best mean minus the baseline row's best mean.
    pub delta_vs_baseline: Option<f64>,
    pub failed: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneTable {
    pub lane: String,
    pub baseline: EmitterKind,
    pub rows: Vec<LaneRow>,
}

impl LaneTable {
    pub fn row(&self, kind: EmitterKind) -> Option<&LaneRow> {
        self.rows.iter().find(|r| r.variant == kind)
    }
}

pub fn lane_table(plan: &ExperimentPlan, cells: &[Cell]) -> LaneTable {
    let mut rows: Vec<LaneRow> = plan
        .variants
        .iter()
        .map(|&v| {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.variant == v).collect();
            let ok: Vec<&RunRecord> = mine.iter().filter_map(|c| c.record.as_ref()).collect();
            let best: Vec<f64> = ok.iter().filter_map(|r| r.best_val_top1).collect();
            let fin: Vec<f64> = ok.iter().filter_map(|r| r.final_window_mean).collect();
            LaneRow {
                variant: v,
                seeds: ok.iter().map(|r| r.seed).collect(),
                best_mean: (!best.is_empty()).then(|| stats::mean(&best)),
                best_sd: stats::sample_sd(&best),
                final_mean: (!fin.is_empty()).then(|| stats::mean(&fin)),
                final_sd: stats::sample_sd(&fin),
                best,
                final_window: fin,
                delta_vs_baseline: None,
                failed: mine.iter().filter_map(|c| c.error.clone().map(|e| (c.seed, e))).collect(),
            }
        })
        .collect();
    let base = rows.first().and_then(|r| r.best_mean);
    for r in &mut rows {
        r.delta_vs_baseline = match (r.best_mean, base) {
            (Some(m), Some(b)) => Some(m - b),
            _ => None,
        };
    }
    LaneTable { lane: plan.lane.clone(), baseline: plan.variants[0], rows }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Trains every cell of the plan. A failing cell is recorded and the
/// others continue.
pub fn train_cells(plan: &ExperimentPlan, data: &Dataset, out: &Path) -> Result<Vec<Cell>> {
    let ckpt_dir = out.join("checkpoints");
    let mut cells = Vec::new();
    for &variant in &plan.variants {
        for &seed in &plan.seeds {
            let config = plan.train_config(variant, seed);
            let label = format!("{}-{seed}", variant.name());
            let cell = match trainer::train(&config, data, Some(&ckpt_dir)) {
                Ok(outcome) => {
                    outcome.record.write_jsonl(&out.join("runs").join(format!("{label}.jsonl")))?;
                    Cell {
                        variant,
                        seed,
                        label,
                        checkpoint: outcome.record.checkpoints.last().cloned(),
                        record: Some(outcome.record),
                        error: None,
                    }
                }
                Err(e) => Cell { variant, seed, label, record: None, checkpoint: None, error: Some(e.to_string()) },
            };
            cells.push(cell);
        }
    }
    write_json(&out.join("cells.json"), &cells)?;
    Ok(cells)
}

/// Successful cells with their checkpoint-best models loaded.
pub fn load_trained(cells: &[Cell]) -> Result<Vec<(Cell, Model)>> {
    cells
        .iter()
        .filter(|c| c.record.is_some() && c.checkpoint.is_some())
        .map(|c| Ok((c.clone(), trainer::load_checkpoint(c.checkpoint.as_ref().expect("checkpoint"))?)))
        .collect()
}

fn trained<'a>(loaded: &'a [(Cell, Model)], seed: Option<u64>) -> Vec<Trained<'a>> {
    loaded
        .iter()
        .filter(|(c, _)| seed.is_none_or(|s| c.seed == s))
        .map(|(c, m)| Trained { name: c.label.clone(), kind: c.variant, model: m, record: c.record.as_ref().expect("record") })
        .collect()
}

/// Files written by one analysis step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Written {
    pub files: Vec<PathBuf>,
    pub skipped: Vec<(ReportKind, String)>,
}

/// Runs one analysis over already-trained cells and stores its JSON.
pub fn analyze(plan: &ExperimentPlan, data: &Dataset, cells: &[Cell], kind: ReportKind, out: &Path) -> Result<Written> {
    let loaded = load_trained(cells)?;
    let mut w = Written::default();
    let first_seed = plan.seeds[0];
    let per_seed = trained(&loaded, Some(first_seed));
    let path = |name: &str| out.join(format!("{name}.json"));
    if loaded.is_empty() && kind != ReportKind::Lane {
        w.skipped.push((kind, "no successfully trained cell".into()));
        return Ok(w);
    }
    match kind {
        ReportKind::Lane => {
            write_json(&path("lane"), &lane_table(plan, cells))?;
            w.files.push(path("lane"));
        }
        ReportKind::Diagnostics | ReportKind::TokenFlow => {
            let settings = StageSettings { seed: plan.analysis_seed, ..StageSettings::default() };
            let rep = analysis::diagnose(&per_seed, data, &settings)?;
            write_json(&path("diagnostics"), &rep)?;
            w.files.push(path("diagnostics"));
        }
        ReportKind::Interventions => {
            let (cells, rep) = analysis::ladder(&per_seed, data, plan.analysis_seed)?;
            write_json(&path("ladder_cells"), &cells)?;
            write_json(&path("ladder"), &rep)?;
            w.files.extend([path("ladder_cells"), path("ladder")]);
        }
        ReportKind::FrProbe => {
            let spec = plan.frprobe.clone().unwrap_or_default();
            let base = ProbeSetting { queries: spec.queries, w_psnr: 0.0, seed: spec.seed };
            let panel = analysis::frprobe_panel(&per_seed, data, base, &spec.w_sweep, &spec.training)?;
            write_json(&path("frprobe"), &panel)?;
            w.files.push(path("frprobe"));
        }
        ReportKind::PackageAblation => {
            let Some(t) = per_seed.first() else {
                w.skipped.push((kind, "no emitter trained on the first seed".into()));
                return Ok(w);
            };
            let cfg = plan.fresh_reader.clone().unwrap_or_else(|| FreshReaderConfig::desk(PackagingMode::ResidualShift));
            let rep = analysis::package_ablation(&t.name, t.model, data, &cfg, &PackagingMode::ALL, &plan.seeds)?;
            write_json(&path("package_ablation"), &rep)?;
            w.files.push(path("package_ablation"));
        }
        ReportKind::EncoderRank => {
            let audits: Vec<(String, analysis::EncoderRankAudit)> = per_seed
                .iter()
                .filter(|t| t.model.reader.config.variant.bias_route())
                .map(|t| Ok((t.name.clone(), analysis::encoder_rank(t.model, data, t.record.seed)?)))
                .collect::<Result<_>>()?;
            if audits.is_empty() {
                w.skipped.push((kind, "no bias-route reader in the plan".into()));
            } else {
                write_json(&path("encoder_rank"), &audits)?;
                w.files.push(path("encoder_rank"));
            }
        }
        ReportKind::Composition => {
            let Some(spec) = &plan.composition else {
                w.skipped.push((kind, "plan has no composition section".into()));
                return Ok(w);
            };
            let lane = lane_table(plan, cells);
            let mean = |k: EmitterKind| {
                lane.row(k).and_then(|r| r.best_mean).ok_or_else(|| Error::arg(format!("no successful {} cell", k.name())))
            };
            let b = mean(spec.baseline)?;
            let gains = spec.components.iter().map(|&k| Ok((k.name().to_string(), mean(k)? - b))).collect::<Result<_>>()?;
            let audit = CompositionAudit::new(b, gains, mean(spec.stacked)?);
            write_json(&path("composition"), &audit)?;
            w.files.push(path("composition"));
        }
    }
    Ok(w)
}

/// Summary of a full plan run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub out: PathBuf,
    pub cells: usize,
    pub failed: usize,
    pub written: Written,
}

/// Trains every cell, runs every requested analysis and renders tables
/// and figures.
pub fn run_plan(plan: &ExperimentPlan, out: &Path) -> Result<PlanSummary> {
    plan.validate()?;
    fs::create_dir_all(out)?;
    write_json(&out.join("plan.json"), plan)?;
    let data = ingest(&plan.dataset)?;
    let cells = train_cells(plan, &data, out)?;
    let mut written = Written::default();
    let mut kinds = vec![ReportKind::Lane];
    kinds.extend(plan.reports.iter().copied().filter(|k| *k != ReportKind::Lane));
    for kind in kinds {
        let w = analyze(plan, &data, &cells, kind, out)?;
        written.files.extend(w.files);
        written.skipped.extend(w.skipped);
    }
    let rendered = report::render(out)?;
    written.files.extend(rendered.written);
    Ok(PlanSummary { out: out.to_path_buf(), cells: cells.len(), failed: cells.iter().filter(|c| c.error.is_some()).count(), written })
}

/// Default function-response settings when a plan does not give any.
pub fn frprobe_spec(plan: &ExperimentPlan) -> FrProbeSpec {
    plan.frprobe.clone().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(variant: EmitterKind, seed: u64, best: f64) -> Cell {
        let mut r: RunRecord = serde_json::from_value(serde_json::json!({
            "label": "x", "seed": seed, "config": null, "epochs": [], "steps": [],
            "best_epoch": 0, "best_val_top1": best, "final_window_mean": best - 1.0, "checkpoints": []
        }))
        .unwrap();
        r.seed = seed;
        Cell { variant, seed, label: format!("{}-{seed}", variant.name()), record: Some(r), checkpoint: None, error: None }
    }

    #[test]
    fn lane_delta_is_row_mean_minus_baseline_mean() {
        let mut plan = ExperimentPlan::desk("t");
        plan.variants = vec![EmitterKind::Anchor, EmitterKind::Center];
        plan.seeds = vec![1, 2];
        let mut cells = vec![cell(EmitterKind::Anchor, 1, 40.0), cell(EmitterKind::Anchor, 2, 44.0), cell(EmitterKind::Center, 1, 50.0)];
        cells.push(Cell { error: Some("diverged".into()), record: None, ..cell(EmitterKind::Center, 2, 0.0) });
        let t = lane_table(&plan, &cells);
        assert_eq!(t.rows[0].best_mean, Some(42.0));
        assert_eq!(t.rows[1].delta_vs_baseline, Some(8.0));
        assert_eq!(t.rows[1].failed.len(), 1);
        assert_eq!(t.rows[1].best_sd, None);
    }
}
