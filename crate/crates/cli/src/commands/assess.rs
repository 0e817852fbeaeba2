use hdan::assessment::{
    assess_manifest, cohort_compare, read_cohort_manifest, render_table, write_subject_csv,
};
use hdan::volume_io::load_labels;

use super::label_options;
use crate::args::AssessArgs;
use crate::Failure;

pub fn assess(a: &AssessArgs) -> Result<(), Failure> {
    let options = label_options(&a.labels)?;
    let entries = read_cohort_manifest(&a.manifest)?;
    let subjects = assess_manifest(&entries, &a.pred, |p| load_labels(p, &options))?;
    let summary = cohort_compare(&subjects)?;
    let table = render_table(&summary);
    std::fs::write(&a.out, &table).map_err(|e| Failure::io(&a.out, e))?;
    let csv = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_subject_csv(&csv, &subjects, &summary)?;
    print!("{table}");
    println!("table: {}  volumes: {}", a.out.display(), csv.display());
    Ok(())
}
