use std::collections::BTreeMap;
use std::path::PathBuf;

use hdan::metrics::{evaluate_subject, summarize, write_report, ReportRow};
use hdan::volume_io::{load_labels, subject_stem};

use super::{label_options, list_volumes};
use crate::args::EvaluateArgs;
use crate::Failure;

#[derive(serde::Serialize)]
struct SummaryRow<'a> {
    class: &'a str,
    mean_dice: Option<f64>,
    mean_mhd: Option<f64>,
    dice_subjects: usize,
    mhd_subjects: usize,
}

fn by_stem(paths: Vec<PathBuf>) -> BTreeMap<String, PathBuf> {
    paths.into_iter().map(|p| (subject_stem(&p), p)).collect()
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let options = label_options(&a.labels)?;
    let preds = by_stem(list_volumes(&a.pred)?);
    let truths = by_stem(list_volumes(&a.truth)?);
    if preds.is_empty() {
        return Err(Failure::usage(format!(
            "no label maps in {}",
            a.pred.display()
        )));
    }
    let mut rows = Vec::new();
    let mut failed = 0;
    let mut subjects: Vec<&String> = preds.keys().chain(truths.keys()).collect();
    subjects.sort();
    subjects.dedup();
    for id in subjects {
        let outcome = match (preds.get(id), truths.get(id)) {
            (Some(p), Some(t)) => load_labels(p, &options)
                .and_then(|pred| Ok((pred, load_labels(t, &options)?)))
                .and_then(|(pred, truth)| evaluate_subject(&pred, &truth))
                .map_err(|e| e.to_string()),
            (Some(_), None) => Err("no ground truth".to_string()),
            _ => Err("no prediction".to_string()),
        };
        match outcome {
            Ok(metrics) => rows.extend(metrics.iter().map(|m| ReportRow::from_metrics(id, m))),
            Err(reason) => {
                log::warn!("{id}: {reason}");
                failed += 1;
                rows.push(ReportRow::failed(id, &reason));
            }
        }
    }
    write_report(&a.out, &rows)?;
    let summary = summarize(&rows);
    for s in &summary {
        println!(
            "{}: dice {}  mhd {}",
            s.class,
            fmt(s.mean_dice),
            fmt(s.mean_mhd)
        );
    }
    if let Some(path) = &a.summary {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        for s in &summary {
            w.serialize(SummaryRow {
                class: &s.class,
                mean_dice: s.mean_dice,
                mean_mhd: s.mean_mhd,
                dice_subjects: s.dice_count,
                mhd_subjects: s.mhd_count,
            })
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Failure::io(path, e))?;
    }
    if failed > 0 {
        log::warn!(
            "{failed} subject(s) could not be evaluated; see {}",
            a.out.display()
        );
    }
    println!("report: {}", a.out.display());
    Ok(())
}
