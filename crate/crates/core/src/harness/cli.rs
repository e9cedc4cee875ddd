//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::dataset::ingest;
use crate::harness::plan::{ExperimentPlan, ReportKind};
use crate::harness::report;
use crate::harness::run::{self, read_json, write_json, Cell};

#[derive(Debug, Parser)]
#[command(name = "weightscope", version, about = "Train SIREN weight-space classifiers and probe what their readers use")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment plan (JSON).
    #[arg(long)]
    pub plan: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict the plan to this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, analyse and render everything the plan asks for.
    Run(Common),
    /// Train every (variant, seed) cell and write the lane table.
    Train(Common),
    /// Stage metrics, family contrasts and bias Fisher ratios.
    Diagnose(Common),
    /// The intervention ladder with matched controls.
    Intervene(Common),
    /// 5-NN label consistency through the reader blocks.
    Tokenflow(Common),
    /// Function-response probes, spread comparison and PSNR-weight sweep.
    Frprobe(Common),
    /// Fresh readers on a frozen emitter under each packaging mode.
    PackageAblate(Common),
    /// Render CSV tables and SVG figures from the JSON artifacts in a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic plan to start from.
    ExamplePlan {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        lane: String,
    },
}

fn load_plan(c: &Common) -> Result<ExperimentPlan> {
    let mut plan = ExperimentPlan::load(&c.plan)?;
    if let Some(s) = c.seed {
        plan.seeds = vec![s];
    }
    if let Some(e) = c.epochs {
        plan.overrides.epochs = Some(e);
    }
    plan.validate()?;
    Ok(plan)
}

fn cells_in(out: &Path) -> Result<Vec<Cell>> {
    let p = out.join("cells.json");
    if !p.exists() {
        return Err(Error::arg(format!("{} not found; run `train` first", p.display())));
    }
    read_json(&p)
}

fn analysis_only(c: &Common, kind: ReportKind) -> Result<()> {
    let plan = load_plan(c)?;
    let data = ingest(&plan.dataset)?;
    let cells: Vec<Cell> = cells_in(&c.out)?.into_iter().filter(|cell| plan.seeds.contains(&cell.seed)).collect();
    let w = run::analyze(&plan, &data, &cells, kind, &c.out)?;
    for f in &w.files {
        println!("wrote {}", f.display());
    }
    for (k, why) in &w.skipped {
        eprintln!("skipped {k:?}: {why}");
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let plan = load_plan(&c)?;
            let s = run::run_plan(&plan, &c.out)?;
            println!("{} cells, {} failed, {} files written under {}", s.cells, s.failed, s.written.files.len(), s.out.display());
            for (k, why) in &s.written.skipped {
                eprintln!("skipped {k:?}: {why}");
            }
        }
        Command::Train(c) => {
            let plan = load_plan(&c)?;
            let data = ingest(&plan.dataset)?;
            write_json(&c.out.join("plan.json"), &plan)?;
            let cells = run::train_cells(&plan, &data, &c.out)?;
            run::analyze(&plan, &data, &cells, ReportKind::Lane, &c.out)?;
            for cell in &cells {
                match (&cell.record, &cell.error) {
                    (Some(r), _) => println!("{}: best val Top-1 {:?}", cell.label, r.best_val_top1),
                    (_, Some(e)) => println!("{}: failed: {e}", cell.label),
                    _ => {}
                }
            }
        }
        Command::Diagnose(c) => analysis_only(&c, ReportKind::Diagnostics)?,
        Command::Intervene(c) => analysis_only(&c, ReportKind::Interventions)?,
        Command::Tokenflow(c) => analysis_only(&c, ReportKind::TokenFlow)?,
        Command::Frprobe(c) => analysis_only(&c, ReportKind::FrProbe)?,
        Command::PackageAblate(c) => analysis_only(&c, ReportKind::PackageAblation)?,
        Command::Report { out } => {
            let r = report::render(&out)?;
            for f in &r.written {
                println!("wrote {}", f.display());
            }
            if !r.missing.is_empty() {
                eprintln!("no artifact for: {}", r.missing.join(", "));
            }
        }
        Command::ExamplePlan { out, lane } => {
            let mut plan = ExperimentPlan::desk(&lane);
            plan.reports = ReportKind::ALL.to_vec();
            plan.composition = None;
            write_json(&out, &plan)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
