//! Evaluation report CSV: `subject_id,class,dice,mhd,flags`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ClassMetrics;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject_id: String,
    pub class: String,
    pub dice: Option<f64>,
    pub mhd: Option<f64>,
    /// Space-separated; empty when the class was evaluated fully.
    pub flags: String,
}

impl ReportRow {
    pub fn from_metrics(subject_id: &str, m: &ClassMetrics) -> Self {
        Self {
            subject_id: subject_id.to_string(),
            class: m.name.clone(),
            dice: m.dice,
            mhd: m.mhd,
            flags: m
                .missing
                .map(|f| f.as_str().to_string())
                .unwrap_or_default(),
        }
    }

    /// A subject that could not be evaluated at all.
    pub fn failed(subject_id: &str, reason: &str) -> Self {
        Self {
            subject_id: subject_id.to_string(),
            class: String::new(),
            dice: None,
            mhd: None,
            flags: format!("error:{}", reason.replace([',', '\n'], ";")),
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Manifest(format!("{}: {e}", path.display()))
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Per-class means over the subjects where each metric is defined.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSummary {
    pub class: String,
    pub mean_dice: Option<f64>,
    pub mean_mhd: Option<f64>,
    pub dice_count: usize,
    pub mhd_count: usize,
}

pub fn summarize(rows: &[ReportRow]) -> Vec<ClassSummary> {
    let mut classes: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| !r.class.is_empty()) {
        if !classes.contains(&r.class.as_str()) {
            classes.push(&r.class);
        }
    }
    let mean =
        |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    classes
        .into_iter()
        .map(|class| {
            let of = |f: fn(&ReportRow) -> Option<f64>| -> Vec<f64> {
                rows.iter()
                    .filter(|r| r.class == class)
                    .filter_map(f)
                    .collect()
            };
            let (d, m) = (of(|r| r.dice), of(|r| r.mhd));
            ClassSummary {
                class: class.to_string(),
                dice_count: d.len(),
                mhd_count: m.len(),
                mean_dice: mean(d),
                mean_mhd: mean(m),
            }
        })
        .collect()
}
