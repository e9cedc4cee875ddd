//! The JSON experiment plan.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coordinate::PackagingMode;
use crate::emitter::{EmitterKind, MetaGradient};
use crate::error::{Error, Result};
use crate::funcprobe::{HeadTraining, QuerySet};
use crate::harness::dataset::DatasetSpec;
use crate::trainer::{FreshReaderConfig, TrainConfig};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Seed order used for matched-seed comparisons.
pub const MATCHED_SEEDS: [u64; 3] = [42, 123, 2026];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    FullScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Lane,
    Diagnostics,
    Interventions,
    TokenFlow,
    FrProbe,
    PackageAblation,
    EncoderRank,
    Composition,
}

impl ReportKind {
    pub const ALL: [ReportKind; 8] = [
        ReportKind::Lane,
        ReportKind::Diagnostics,
        ReportKind::Interventions,
        ReportKind::TokenFlow,
        ReportKind::FrProbe,
        ReportKind::PackageAblation,
        ReportKind::EncoderRank,
        ReportKind::Composition,
    ];
}

/// Optional per-plan changes to the preset's training configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_siren: Option<f64>,
    pub lr_meta_rates: Option<f64>,
    pub lr_coord: Option<f64>,
    pub lr_reader: Option<f64>,
    pub inner_steps: Option<usize>,
    pub aux_weight: Option<f64>,
    pub cls_weight: Option<f64>,
    pub recon_weight: Option<f64>,
    pub meta_gradient: Option<MetaGradient>,
    pub packaging: Option<PackagingMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub baseline: EmitterKind,
    pub components: Vec<EmitterKind>,
    pub stacked: EmitterKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrProbeSpec {
    pub queries: QuerySet,
    pub seed: u64,
    pub w_sweep: Vec<f64>,
    pub training: HeadTraining,
}

impl Default for FrProbeSpec {
    fn default() -> Self {
        Self { queries: QuerySet::Random(256), seed: 0, w_sweep: vec![0.0, 1.0, 10.0], training: HeadTraining::default() }
    }
}

fn schema() -> u32 {
    PLAN_SCHEMA_VERSION
}

fn default_seeds() -> Vec<u64> {
    MATCHED_SEEDS.to_vec()
}

fn default_variants() -> Vec<EmitterKind> {
    vec![EmitterKind::Anchor]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub lane: String,
    pub dataset: DatasetSpec,
    #[serde(default = "default_variants")]
    pub variants: Vec<EmitterKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub overrides: TrainOverrides,
    #[serde(default)]
    pub reports: Vec<ReportKind>,
    #[serde(default)]
    pub composition: Option<CompositionSpec>,
    #[serde(default)]
    pub fresh_reader: Option<FreshReaderConfig>,
    #[serde(default)]
    pub frprobe: Option<FrProbeSpec>,
    /// Root seed for intervention and probe randomness.
    #[serde(default)]
    pub analysis_seed: u64,
}

impl ExperimentPlan {
    /// A small synthetic lane: anchor only, matched seeds, lane table.
    pub fn desk(lane: &str) -> Self {
        Self {
            schema_version: PLAN_SCHEMA_VERSION,
            lane: lane.to_string(),
            dataset: DatasetSpec::synthetic_desk(200, 100, 1),
            variants: default_variants(),
            seeds: default_seeds(),
            preset: Preset::Desk,
            overrides: TrainOverrides::default(),
            reports: vec![ReportKind::Lane],
            composition: None,
            fresh_reader: None,
            frprobe: None,
            analysis_seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: Self = serde_json::from_slice(&fs::read(path)?)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::arg(format!(
                "plan schema version {} is not supported (expected {PLAN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.lane.is_empty() || self.lane.contains(['/', '\\']) {
            return Err(Error::arg("lane id must be a non-empty file-name-safe string"));
        }
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::arg("plan needs at least one variant and one seed"));
        }
        if self.variants.iter().enumerate().any(|(i, a)| self.variants[..i].contains(a)) {
            return Err(Error::arg("variants must be distinct"));
        }
        if self.seeds.iter().enumerate().any(|(i, s)| self.seeds[..i].contains(s)) {
            return Err(Error::arg("seeds must be distinct"));
        }
        if let Some(c) = &self.composition {
            for k in c.components.iter().chain([&c.baseline, &c.stacked]) {
                if !self.variants.contains(k) {
                    return Err(Error::arg(format!("composition refers to {} which the plan does not train", k.name())));
                }
            }
        }
        self.train_config(self.variants[0], self.seeds[0]).validate()
    }

    /// Fully resolved training configuration of one cell.
    pub fn train_config(&self, kind: EmitterKind, seed: u64) -> TrainConfig {
        let mut c = match self.preset {
            Preset::Desk => TrainConfig::desk(kind),
            Preset::FullScale => TrainConfig::full_scale(kind),
        };
        c.seed = seed;
        let o = &self.overrides;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = o.$field { $target = v; })*
            };
        }
        set!(
            epochs => c.epochs,
            batch_size => c.batch_size,
            lr_siren => c.lr_siren,
            lr_meta_rates => c.lr_meta_rates,
            lr_coord => c.lr_coord,
            lr_reader => c.lr_reader,
            inner_steps => c.inner_steps,
            aux_weight => c.emitter.aux_weight,
            cls_weight => c.cls_weight,
            recon_weight => c.recon_weight,
            meta_gradient => c.meta_gradient,
            packaging => c.packaging,
        );
        c
    }

    pub fn wants(&self, report: ReportKind) -> bool {
        self.reports.contains(&report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_fills_defaults() {
        let json = r#"{"lane": "desk", "dataset": {"source": {"kind": "synthetic", "classes": 10, "height": 16, "width": 16, "seed": 1}, "train_size": 20, "val_size": 10}}"#;
        let plan: ExperimentPlan = serde_json::from_str(json).unwrap();
        assert_eq!(plan.seeds, vec![42, 123, 2026]);
        assert_eq!(plan.variants, vec![EmitterKind::Anchor]);
        plan.validate().unwrap();
    }

    #[test]
    fn overrides_reach_the_config() {
        let mut plan = ExperimentPlan::desk("x");
        plan.overrides.epochs = Some(3);
        plan.overrides.aux_weight = Some(0.0);
        let c = plan.train_config(EmitterKind::Center, 7);
        assert_eq!((c.epochs, c.seed, c.emitter.aux_weight), (3, 7, 0.0));
    }

    #[test]
    fn rejects_bad_plans() {
        let mut plan = ExperimentPlan::desk("x");
        plan.seeds = vec![1, 1];
        assert!(plan.validate().is_err());
        let mut plan = ExperimentPlan::desk("x");
        plan.schema_version = 99;
        assert!(plan.validate().is_err());
    }
}
