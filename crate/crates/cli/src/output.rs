use std::fs;
use std::path::Path;

use dopq_core::pipeline::RunReport;
use serde::Serialize;

use crate::error::Result;

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| crate::CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `rows` under `header`; every row must have the header's width.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const BLOCKS_HEADER: [&str; 8] = [
    "stage",
    "block",
    "initial_loss",
    "final_loss",
    "accepted",
    "evaluations",
    "passes",
    "nonincreasing",
];

pub fn block_rows(report: &RunReport) -> Vec<Vec<String>> {
    let stages = [(1, &report.stage1), (3, &report.stage3)];
    stages
        .iter()
        .flat_map(|(stage, blocks)| {
            blocks.iter().map(move |b| {
                vec![
                    stage.to_string(),
                    b.block.to_string(),
                    b.initial_loss.to_string(),
                    b.final_loss.to_string(),
                    b.accepted.to_string(),
                    b.evaluations.to_string(),
                    b.passes.to_string(),
                    b.nonincreasing.to_string(),
                ]
            })
        })
        .collect()
}

pub const MAD_HEADER: [&str; 5] = ["block", "site", "statistic", "candidate", "mad"];

/// One row per candidate statistic of every reparameterized site.
pub fn mad_rows(report: &RunReport) -> Vec<Vec<String>> {
    report
        .stage2
        .iter()
        .flat_map(|s| {
            s.mad.rows.iter().map(move |r| {
                vec![
                    s.block.to_string(),
                    s.site.name().to_string(),
                    r.statistic.name().to_string(),
                    r.center.to_string(),
                    r.mad.to_string(),
                ]
            })
        })
        .collect()
}
