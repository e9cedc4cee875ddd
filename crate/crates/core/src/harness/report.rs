//! Turns the JSON artifacts of a run directory into CSV tables and SVG
//! figures. Floats are written with round-trip precision.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{DiagnosticsReport, StageId};
use crate::error::Result;
use crate::harness::analysis::{CompositionAudit, EncoderRankAudit, FrPanel, PackageAblation};
use crate::harness::run::{read_json, LaneTable};
use crate::harness::svg::{self, BarPanel};
use crate::harness::write_atomic;
use crate::interventions::LadderReport;
use crate::numcore::PairedT;

/// A rectangular table of already-formatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| Ok(rec?.iter().map(String::from).collect())).collect::<Result<_>>()?;
    Ok(Table { header, rows })
}

/// `{}` formatting of an f64 parses back to the identical value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn joined(v: &[f64]) -> String {
    v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";")
}

/// What `render` produced and which artifacts were absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rendered {
    pub written: Vec<PathBuf>,
    pub missing: Vec<String>,
}

struct Sink {
    tables: PathBuf,
    figures: PathBuf,
    done: Rendered,
}

impl Sink {
    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        let p = self.tables.join(format!("{name}.csv"));
        t.write(&p)?;
        self.done.written.push(p);
        Ok(())
    }

    fn figure(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.figures.join(format!("{name}.svg"));
        write_atomic(&p, body.as_bytes())?;
        self.done.written.push(p);
        Ok(())
    }
}

fn load<T: for<'de> Deserialize<'de>>(out: &Path, name: &str, sink: &mut Sink) -> Result<Option<T>> {
    let p = out.join(format!("{name}.json"));
    if p.exists() {
        read_json(&p).map(Some)
    } else {
        sink.done.missing.push(name.to_string());
        Ok(None)
    }
}

/// Renders every table and figure whose source artifact exists in `out`.
pub fn render(out: &Path) -> Result<Rendered> {
    let mut sink = Sink { tables: out.join("tables"), figures: out.join("figures"), done: Rendered::default() };
    fs::create_dir_all(&sink.tables)?;
    fs::create_dir_all(&sink.figures)?;
    if let Some(lane) = load::<LaneTable>(out, "lane", &mut sink)? {
        sink.table("lane", &lane_rows(&lane))?;
    }
    if let Some(d) = load::<DiagnosticsReport>(out, "diagnostics", &mut sink)? {
        render_diagnostics(&d, &mut sink)?;
    }
    if let Some(l) = load::<LadderReport>(out, "ladder", &mut sink)? {
        sink.table("ladder", &ladder_rows(&l))?;
        let cols: Vec<String> = l.kinds.iter().map(|k| k.to_string()).collect();
        sink.figure("ladder_heatmap", &svg::heatmap("Top-1 change under each edit (pp)", &l.readers, &cols, &l.heatmap))?;
    }
    if let Some(p) = load::<PackageAblation>(out, "package_ablation", &mut sink)? {
        render_ablation(&p, &mut sink)?;
    }
    if let Some(f) = load::<FrPanel>(out, "frprobe", &mut sink)? {
        render_frprobe(&f, &mut sink)?;
    }
    if let Some(a) = load::<Vec<(String, EncoderRankAudit)>>(out, "encoder_rank", &mut sink)? {
        let mut t = Table::new(&["config", "width", "samples", "rank_90", "rank_99", "reference_90", "reference_99", "ordered"]);
        for (name, e) in &a {
            t.push(vec![
                name.clone(),
                e.width.to_string(),
                e.samples.to_string(),
                e.rank_90.to_string(),
                e.rank_99.to_string(),
                e.reference.0.to_string(),
                e.reference.1.to_string(),
                e.ordered.to_string(),
            ]);
        }
        sink.table("encoder_rank", &t)?;
        let x: Vec<String> = (1..=a.first().map_or(0, |e| e.1.spectrum.cumulative_energy.len())).map(|i| i.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = a.iter().map(|(n, e)| (n.clone(), e.spectrum.cumulative_energy.clone())).collect();
        sink.figure("encoder_spectrum", &svg::line_chart("Cumulative spectral energy", &x, &series, "energy"))?;
    }
    if let Some(c) = load::<CompositionAudit>(out, "composition", &mut sink)? {
        let mut t = Table::new(&["term", "value"]);
        t.push(vec!["baseline".into(), num(c.baseline)]);
        for (name, g) in &c.gains {
            t.push(vec![format!("gain_{name}"), num(*g)]);
        }
        t.push(vec!["modular_null".into(), num(c.modular_null)]);
        t.push(vec!["stacked".into(), num(c.stacked)]);
        t.push(vec!["shortfall".into(), num(c.shortfall)]);
        sink.table("composition", &t)?;
    }
    Ok(sink.done)
}

pub fn lane_rows(lane: &LaneTable) -> Table {
    let mut t = Table::new(&["variant", "n", "best_mean", "best_sd", "final_mean", "final_sd", "delta_vs_baseline", "best_per_seed", "failed"]);
    for r in &lane.rows {
        t.push(vec![
            r.variant.name().to_string(),
            r.best.len().to_string(),
            opt(r.best_mean),
            opt(r.best_sd),
            opt(r.final_mean),
            opt(r.final_sd),
            opt(r.delta_vs_baseline),
            joined(&r.best),
            r.failed.iter().map(|(s, e)| format!("{s}: {e}")).collect::<Vec<_>>().join("; "),
        ]);
    }
    t
}

fn render_diagnostics(d: &DiagnosticsReport, sink: &mut Sink) -> Result<()> {
    let mut t = Table::new(&[
        "config", "stage", "knn5", "centroid", "logreg", "logreg_non_convergent", "knn_probe", "psnr_ridge_r2", "id95", "pca_width", "rank_90",
        "rank_99",
    ]);
    for (name, rows) in &d.configs {
        for m in rows {
            t.push(vec![
                name.clone(),
                m.stage.to_string(),
                num(m.knn_consistency),
                num(m.centroid_top1),
                num(m.logreg_top1),
                m.logreg_non_convergent.to_string(),
                num(m.knn_probe_top1),
                opt(m.psnr_ridge_r2),
                m.id95.to_string(),
                m.pca_width.to_string(),
                m.rank_90.to_string(),
                m.rank_99.to_string(),
            ]);
        }
    }
    sink.table("stage_metrics", &t)?;

    let mut f = Table::new(&["metric", "cluster_n", "cluster_mean", "cluster_sd", "other_n", "other_mean", "other_sd", "delta", "welch_t", "welch_df"]);
    for c in &d.families {
        f.push(vec![
            c.metric.clone(),
            c.cluster_values.len().to_string(),
            num(c.cluster_mean),
            opt(c.cluster_sd),
            c.other_values.len().to_string(),
            num(c.other_mean),
            opt(c.other_sd),
            num(c.delta),
            opt(c.welch.map(|w| w.t)),
            opt(c.welch.map(|w| w.df)),
        ]);
    }
    sink.table("family_contrast", &f)?;
    if !d.families.is_empty() {
        let panels: Vec<BarPanel> = d
            .families
            .iter()
            .map(|c| BarPanel {
                title: c.metric.clone(),
                bars: vec![("cluster".into(), c.cluster_mean), ("other".into(), c.other_mean)],
                annotation: Some(format!("Δ = {:+.2}", c.delta)),
            })
            .collect();
        sink.figure("geometry_gap", &svg::bar_panels("Raw-offset geometry by emitter family", &panels))?;
    }

    let mut b = Table::new(&["config", "coordinates", "mean", "top50_mean"]);
    for (name, x) in &d.bias_fisher {
        b.push(vec![name.clone(), x.coordinates.to_string(), num(x.mean), num(x.top50_mean)]);
    }
    sink.table("bias_fisher", &b)?;

    if let Some(flow) = &d.token_flow {
        let mut ft = Table::new(&["config", "stage", "knn5"]);
        for r in &flow.rows {
            ft.push(vec![r.config.clone(), r.stage.to_string(), num(r.knn_consistency)]);
        }
        sink.table("token_flow", &ft)?;
        let mut ct = Table::new(&["stage", "pearson", "spearman"]);
        for c in &flow.correlations {
            ct.push(vec![c.stage.to_string(), opt(c.pearson), opt(c.spearman)]);
        }
        sink.table("token_flow_correlations", &ct)?;
        let mut stages: Vec<StageId> = flow.rows.iter().map(|r| r.stage).collect();
        stages.sort();
        stages.dedup();
        let mut configs: Vec<&String> = flow.rows.iter().map(|r| &r.config).collect();
        configs.dedup();
        let series: Vec<(String, Vec<f64>)> =
            configs.iter().map(|c| ((*c).clone(), stages.iter().map(|s| flow.value(c, *s).unwrap_or(f64::NAN)).collect())).collect();
        let x: Vec<String> = stages.iter().map(|s| s.to_string()).collect();
        sink.figure("token_flow", &svg::line_chart("5-NN label consistency through the reader", &x, &series, "5-NN (%)"))?;
    }
    Ok(())
}

pub fn ladder_rows(l: &LadderReport) -> Table {
    let mut t =
        Table::new(&["intervention", "n", "mean", "sd", "min", "max", "control", "control_mean", "gap_mean", "paired_t", "paired_df", "paired_p"]);
    for r in &l.rows {
        let (pt, pdf, pp) = match r.paired {
            Some(PairedT::Test { t, df, p }) => (Some(t), Some(df), Some(p)),
            _ => (None, None, None),
        };
        t.push(vec![
            r.kind.to_string(),
            r.n.to_string(),
            num(r.mean),
            opt(r.sd),
            num(r.min),
            num(r.max),
            r.control.map(|c| c.to_string()).unwrap_or_default(),
            opt(r.control_mean),
            opt(r.gap_mean),
            opt(pt),
            opt(pdf),
            opt(pp),
        ]);
    }
    t
}

fn render_ablation(p: &PackageAblation, sink: &mut Sink) -> Result<()> {
    let mut t = Table::new(&["mode", "n", "mean", "sample_sd", "population_sd", "final_window_per_seed"]);
    for r in &p.rows {
        t.push(vec![
            r.mode.name().to_string(),
            r.final_window.len().to_string(),
            num(r.mean),
            opt(r.sample_sd),
            num(r.population_sd),
            joined(&r.final_window),
        ]);
    }
    if let Some(d) = &p.residual_only_deficit {
        t.push(vec![
            "residual_shift_minus_residual_only".into(),
            d.per_seed.len().to_string(),
            num(d.mean),
            opt(d.sample_sd),
            num(d.population_sd),
            joined(&d.per_seed),
        ]);
    }
    sink.table("package_ablation", &t)?;
    let panel = BarPanel {
        title: p.emitter.clone(),
        bars: p.rows.iter().map(|r| (r.mode.name().to_string(), r.mean)).collect(),
        annotation: p.residual_only_deficit.as_ref().map(|d| format!("residual-only deficit = {:.2}", d.mean)),
    };
    sink.figure("package_ablation", &svg::bar_panels("Fresh-reader Top-1 by packaging", &[panel]))
}

fn render_frprobe(f: &FrPanel, sink: &mut Sink) -> Result<()> {
    let mut t = Table::new(&["config", "setting", "head", "final_window_top1", "r2", "skipped_batches"]);
    for (name, r) in &f.configs {
        for h in &r.heads {
            t.push(vec![
                name.clone(),
                r.setting.label(),
                h.head.name().to_string(),
                opt(h.final_window_top1),
                opt(h.r2),
                r.skipped_batches.to_string(),
            ]);
        }
    }
    sink.table("frprobe", &t)?;
    let mut s = Table::new(&["reader", "min", "max", "range"]);
    for (name, r) in [("function", &f.spread.function_reader), ("weight", &f.spread.weight_reader)] {
        s.push(vec![name.into(), num(r.min), num(r.max), num(r.range)]);
    }
    s.push(vec!["ratio".into(), String::new(), String::new(), opt(f.spread.ratio)]);
    sink.table("frprobe_spread", &s)?;
    let mut w = Table::new(&["config", "setting", "w_psnr", "head", "final_window_top1", "r2"]);
    for r in &f.sweep {
        w.push(vec![f.sweep_config.clone(), r.setting.clone(), num(r.w_psnr), r.head.name().to_string(), opt(r.final_window_top1), opt(r.r2)]);
    }
    sink.table("frprobe_sweep", &w)
}
