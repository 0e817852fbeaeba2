use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CohortSummary, Group, Measure, SubjectVolumes};
use crate::error::{Error, Result};

/// Integer part of `v` (rounded) with comma thousands separators.
///
/// ```
/// assert_eq!(hdan::assessment::format_thousands(1_344_275.0), "1,344,275");
/// assert_eq!(hdan::assessment::format_thousands(999.4), "999");
/// ```
pub fn format_thousands(v: f64) -> String {
    let rounded = v.round();
    let digits = format!("{}", rounded.abs() as u64);
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    if rounded < 0.0 {
        out.insert(0, '-');
    }
    out
}

/// Significance bucket as printed in the table.
pub fn format_p_threshold(p: f64) -> &'static str {
    if p < 0.01 {
        "< 0.01"
    } else if p < 0.05 {
        "< 0.05"
    } else {
        "> 0.05"
    }
}

fn format_p_raw(p: f64) -> String {
    if p == 0.0 || p >= 1e-3 {
        format!("{p:.4}")
    } else {
        format!("{p:.2e}")
    }
}

fn cell(summary: &CohortSummary, g: Group, m: Measure) -> String {
    let v = summary.group(g).mean(m);
    match m {
        Measure::WmRatio => format!("{:.2}%", v * 100.0),
        _ => format_thousands(v),
    }
}

/// Group means per measure, a significance row and the raw p-values.
pub fn render_table(summary: &CohortSummary) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["".to_string(), "N".to_string()];
    header.extend(Measure::ALL.iter().map(|m| m.header().to_string()));
    rows.push(header);
    for g in Group::ALL {
        let mut row = vec![g.label().to_string(), summary.group(g).n.to_string()];
        row.extend(Measure::ALL.iter().map(|&m| cell(summary, g, m)));
        rows.push(row);
    }
    let mut thresholds = vec!["p-value".to_string(), String::new()];
    thresholds.extend(
        Measure::ALL
            .iter()
            .map(|&m| format_p_threshold(summary.test(m).p).to_string()),
    );
    rows.push(thresholds);
    let mut raw = vec!["p (raw)".to_string(), String::new()];
    raw.extend(
        Measure::ALL
            .iter()
            .map(|&m| format_p_raw(summary.test(m).p)),
    );
    rows.push(raw);

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, text) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{text:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "  {text:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// One row of a cohort manifest: `subject_id,group,path`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub subject_id: String,
    pub group: Group,
    pub path: PathBuf,
}

#[derive(Deserialize)]
struct RawEntry {
    subject_id: String,
    group: String,
    path: String,
}

pub fn read_cohort_manifest(path: &Path) -> Result<Vec<CohortEntry>> {
    let err = |e: &dyn std::fmt::Display| Error::Manifest(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(&e))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: RawEntry = row.map_err(|e| err(&e))?;
        out.push(CohortEntry {
            subject_id: row.subject_id,
            group: row.group.parse()?,
            path: row.path.into(),
        });
    }
    if out.is_empty() {
        return Err(err(&"no subjects"));
    }
    Ok(out)
}

#[derive(Serialize)]
struct SubjectRow<'a> {
    subject_id: &'a str,
    group: &'a str,
    wm_mm3: f64,
    gm_mm3: f64,
    csf_mm3: f64,
    brain_mm3: f64,
    wm_ratio: Option<f64>,
}

/// Per-subject volumes followed by one `mean` row per group.
pub fn write_subject_csv(
    path: &Path,
    subjects: &[SubjectVolumes],
    summary: &CohortSummary,
) -> Result<()> {
    let err = |e: csv::Error| Error::Manifest(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for s in subjects {
        let v = &s.volumes;
        w.serialize(SubjectRow {
            subject_id: &s.subject_id,
            group: s.group.as_str(),
            wm_mm3: v.wm_mm3,
            gm_mm3: v.gm_mm3,
            csf_mm3: v.csf_mm3,
            brain_mm3: v.brain_mm3,
            wm_ratio: v.wm_ratio,
        })
        .map_err(err)?;
    }
    for g in Group::ALL {
        let m = summary.group(g);
        w.serialize(SubjectRow {
            subject_id: "mean",
            group: g.as_str(),
            wm_mm3: m.mean_wm_mm3,
            gm_mm3: m.mean_gm_mm3,
            csf_mm3: m.mean_csf_mm3,
            brain_mm3: m.mean_brain_mm3,
            wm_ratio: Some(m.mean_wm_ratio),
        })
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
