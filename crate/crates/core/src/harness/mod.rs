//! Experiment orchestration: datasets, plans, runs and reports.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::Result;

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod plan;
pub mod report;
pub mod run;
pub mod svg;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}
