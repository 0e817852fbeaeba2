//! Dataset manifests: one CSV row per subject with its image files and
//! optional label file.
//!
//! ```text
//! subject_id,images,labels
//! s01,s01_t1.nii.gz;s01_t2.nii.gz,s01_seg.nii.gz
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{
    load_labels, load_pair, normalize, LabelMap, LabelOptions, MultiModalVolume,
};

const IMAGE_SEPARATOR: char = ';';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub images: Vec<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    subject_id: String,
    images: String,
    #[serde(default)]
    labels: String,
}

/// A normalized training or evaluation subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: MultiModalVolume,
    pub labels: LabelMap,
}

fn manifest_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Manifest(format!("{}: {msg}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(path).map_err(|e| manifest_err(path, e))?;
    let mut entries = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row.map_err(|e| manifest_err(path, e))?;
        let images: Vec<PathBuf> = row
            .images
            .split(IMAGE_SEPARATOR)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| base.join(s))
            .collect();
        if images.is_empty() {
            return Err(manifest_err(
                path,
                format!("subject {} lists no images", row.subject_id),
            ));
        }
        let labels = (!row.labels.trim().is_empty()).then(|| base.join(row.labels.trim()));
        entries.push(ManifestEntry {
            subject_id: row.subject_id,
            images,
            labels,
        });
    }
    if entries.is_empty() {
        return Err(manifest_err(path, "no subjects"));
    }
    Ok(entries)
}

/// Write entries with their paths as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| manifest_err(path, e))?;
    for e in entries {
        let images: Vec<String> = e.images.iter().map(|p| p.display().to_string()).collect();
        w.serialize(Row {
            subject_id: e.subject_id.clone(),
            images: images.join(&IMAGE_SEPARATOR.to_string()),
            labels: e
                .labels
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        })
        .map_err(|e| manifest_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load, normalize and pair every labelled subject.
pub fn load_dataset(entries: &[ManifestEntry], options: &LabelOptions) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            let label_path = e.labels.as_ref().ok_or_else(|| {
                Error::Manifest(format!("subject {} has no label file", e.subject_id))
            })?;
            let paths: Vec<&Path> = e.images.iter().map(PathBuf::as_path).collect();
            let mut volume = normalize(&load_pair(&paths)?)?;
            volume.subject_id = e.subject_id.clone();
            let labels = load_labels(label_path, options)?;
            if labels.dims != volume.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "subject {}: labels {:?} vs image {:?}",
                    e.subject_id,
                    labels.dims,
                    volume.dims()
                )));
            }
            Ok(Sample { volume, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                subject_id: "a".into(),
                images: vec!["a_t1.meta".into(), "a_t2.meta".into()],
                labels: Some("a_seg.meta".into()),
            },
            ManifestEntry {
                subject_id: "b".into(),
                images: vec!["b.meta".into()],
                labels: None,
            },
        ];
        let path = dir.path().join("m.csv");
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[0].images[1], dir.path().join("a_t2.meta"));
        assert_eq!(back[0].labels, Some(dir.path().join("a_seg.meta")));
        assert_eq!(back[1].labels, None);
    }

    #[test]
    fn empty_or_malformed_manifests_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "subject_id,images,labels\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest(_))));
        std::fs::write(&path, "subject_id,images,labels\ns,,x\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest(_))));
        std::fs::write(&path, "who,what\n1,2\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest(_))));
        assert!(read_manifest(&dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn unlabelled_subjects_cannot_train() {
        let e = ManifestEntry {
            subject_id: "x".into(),
            images: vec!["x.meta".into()],
            labels: None,
        };
        assert!(matches!(
            load_dataset(&[e], &LabelOptions::default()),
            Err(Error::Manifest(_))
        ));
    }
}
