//! Volumetric image and label-map I/O, intensity normalization, and synthetic
//! phantoms.
//!
//! Axis convention: tensors are `[modality, D, H, W]` with `W` contiguous. For
//! NIfTI and Analyze files `W` is the header's first dimension (x), so
//! `D, H, W = nz, ny, nx`, and `spacing` lists edge lengths in the same
//! `[D, H, W]` order.

mod nifti;
mod normalize;
mod phantom;
mod raw;

use std::path::Path;

use hdan_tensor::Tensor;

use crate::error::{Error, Result};

pub use nifti::{NiftiDtype, NiftiFlavor};
pub use normalize::normalize;
pub use phantom::{generate_phantom, PhantomSpec, PHANTOM_DYNAMIC_RANGE};
pub use raw::RawDtype;

/// Voxel edge lengths in mm along `[D, H, W]`.
pub type Spacing = [f64; 3];

/// Names of the four tissue classes, by class index.
pub const DEFAULT_CLASS_NAMES: [&str; 4] = ["BG", "CSF", "GM", "WM"];

/// Co-registered multi-modal intensities (T1 then T2 for network input).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    /// `[M, D, H, W]`
    pub data: Tensor,
    pub spacing: Spacing,
    pub subject_id: String,
    /// Foreground mask fixed by the first normalization, laid out like `data`.
    pub foreground: Option<Vec<bool>>,
}

impl MultiModalVolume {
    pub fn new(data: Tensor, spacing: Spacing, subject_id: impl Into<String>) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::BadInputShape {
                shape: data.shape().to_vec(),
                reason: "volume must be [modality, D, H, W]".into(),
            });
        }
        check_spacing(spacing)?;
        Ok(Self {
            data,
            spacing,
            subject_id: subject_id.into(),
            foreground: None,
        })
    }

    pub fn modalities(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Stack single-modality volumes (e.g. T1 and T2) into one.
    pub fn stack(parts: &[MultiModalVolume]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("no modalities to stack".into()))?;
        let mut data = Vec::new();
        let mut modalities = 0;
        for p in parts {
            if p.dims() != first.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "modality dims {:?} vs {:?}",
                    p.dims(),
                    first.dims()
                )));
            }
            if p.spacing != first.spacing {
                return Err(Error::ShapeMismatch(format!(
                    "modality spacing {:?} vs {:?}",
                    p.spacing, first.spacing
                )));
            }
            data.extend_from_slice(p.data.data());
            modalities += p.modalities();
        }
        let [d, h, w] = first.dims();
        let data = Tensor::from_vec(&[modalities, d, h, w], data)?;
        Self::new(data, first.spacing, first.subject_id.clone())
    }
}

/// Per-voxel tissue classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    /// Class index per voxel, `D x H x W` with `W` contiguous.
    pub labels: Vec<u8>,
    pub dims: [usize; 3],
    pub class_names: Vec<String>,
    pub spacing: Spacing,
}

impl LabelMap {
    pub fn new(
        labels: Vec<u8>,
        dims: [usize; 3],
        class_names: Vec<String>,
        spacing: Spacing,
    ) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        if class_names.len() < 2 || class_names.len() > 256 {
            return Err(Error::InvalidConfig(format!(
                "label maps need 2..=256 classes, got {}",
                class_names.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} outside {} classes",
                class_names.len()
            )));
        }
        check_spacing(spacing)?;
        Ok(Self {
            labels,
            dims,
            class_names,
            spacing,
        })
    }

    /// A label map with the default BG/CSF/GM/WM class names.
    pub fn with_default_classes(
        labels: Vec<u8>,
        dims: [usize; 3],
        spacing: Spacing,
    ) -> Result<Self> {
        let names = DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        Self::new(labels, dims, names, spacing)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.num_classes()];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Ordered stored-value to class table; class `c` is stored as `entries[c].0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMapping {
    pub entries: Vec<(i64, String)>,
}

impl LabelMapping {
    /// `{0: BG, 10: CSF, 150: GM, 250: WM}`, the usual iSeg distribution codes.
    pub fn iseg() -> Self {
        Self::from_pairs(&[(0, "BG"), (10, "CSF"), (150, "GM"), (250, "WM")])
    }

    /// Class indices stored as themselves.
    pub fn identity(class_names: &[String]) -> Self {
        Self {
            entries: class_names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as i64, n.clone()))
                .collect(),
        }
    }

    pub fn from_pairs(pairs: &[(i64, &str)]) -> Self {
        Self {
            entries: pairs.iter().map(|&(v, n)| (v, n.to_string())).collect(),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.entries.iter().map(|(_, n)| n.clone()).collect()
    }

    pub fn class_of(&self, value: f64) -> Option<u8> {
        if value.fract() != 0.0 {
            return None;
        }
        self.entries
            .iter()
            .position(|&(v, _)| v as f64 == value)
            .map(|c| c as u8)
    }

    pub fn value_of(&self, class: u8) -> Option<i64> {
        self.entries.get(class as usize).map(|e| e.0)
    }

    /// Parse `value:name` pairs separated by whitespace or commas.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for token in text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
        {
            let (value, name) = token.split_once(':').ok_or_else(|| {
                Error::InvalidConfig(format!("label mapping entry `{token}` is not value:name"))
            })?;
            let value = value.parse().map_err(|_| {
                Error::InvalidConfig(format!("label value `{value}` is not an integer"))
            })?;
            entries.push((value, name.to_string()));
        }
        if entries.len() < 2 {
            return Err(Error::InvalidConfig(
                "label mapping needs at least two classes".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(v, n)| format!("{v}:{n}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for LabelMapping {
    fn default() -> Self {
        Self::iseg()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    T1,
    T2,
    Label,
}

/// Result of [`load_volume`].
#[derive(Clone, Debug, PartialEq)]
pub enum Loaded {
    Intensity(MultiModalVolume),
    Labels(LabelMap),
}

/// How voxel intensities absent from the label mapping are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UnmappedPolicy {
    #[default]
    Strict,
    Background,
}

/// Options for reading label files.
#[derive(Clone, Debug, Default)]
pub struct LabelOptions {
    /// Used for NIfTI/Analyze files; internal files carry their own table.
    pub mapping: LabelMapping,
    pub unmapped: UnmappedPolicy,
}

/// Output container for label maps and scalar volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    /// `.meta` sidecar plus `.raw` little-endian voxels.
    Internal,
    Nifti,
    NiftiGz,
    Analyze,
}

impl VolumeFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::Internal => "meta",
            Self::Nifti => "nii",
            Self::NiftiGz => "nii.gz",
            Self::Analyze => "hdr",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "internal" | "raw" | "meta" => Some(Self::Internal),
            "nifti" | "nii" => Some(Self::Nifti),
            "nifti-gz" | "nii.gz" => Some(Self::NiftiGz),
            "analyze" | "hdr" => Some(Self::Analyze),
            _ => None,
        }
    }
}

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "spacing {spacing:?} must be positive"
        )))
    }
}

/// Voxels from any supported container, before interpretation.
pub(crate) struct RawVolume {
    /// `[M, D, H, W]`
    pub dims: [usize; 4],
    pub spacing: Spacing,
    pub values: Vec<f64>,
    /// Present only for internal files written with a table.
    pub mapping: Option<LabelMapping>,
    pub subject_id: Option<String>,
}

fn file_kind(path: &Path) -> &'static str {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        "nifti"
    } else if name.ends_with(".hdr") || name.ends_with(".img") || name.ends_with(".img.gz") {
        "pair"
    } else if name.ends_with(".meta") || name.ends_with(".raw") {
        "internal"
    } else {
        "unknown"
    }
}

pub(crate) fn read_any(path: &Path) -> Result<RawVolume> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    match file_kind(path) {
        "nifti" => nifti::read_single(path),
        "pair" => nifti::read_pair(path),
        "internal" => raw::read(path),
        _ => Err(Error::unreadable(
            path,
            "expected .nii, .nii.gz, .hdr/.img or .meta/.raw",
        )),
    }
}

/// Default subject id: file name without volume extensions.
pub fn subject_stem(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("volume");
    for ext in [
        ".nii.gz", ".img.gz", ".nii", ".hdr", ".img", ".meta", ".raw",
    ] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name.to_string()
}

/// Load an intensity image (all frames become modalities).
pub fn load_intensity(path: &Path) -> Result<MultiModalVolume> {
    let raw = read_any(path)?;
    let [m, d, h, w] = raw.dims;
    let id = raw.subject_id.unwrap_or_else(|| subject_stem(path));
    let data = Tensor::from_vec(&[m, d, h, w], raw.values)?;
    MultiModalVolume::new(data, raw.spacing, id)
}

/// Load a label map, translating stored values through the mapping.
pub fn load_labels(path: &Path, options: &LabelOptions) -> Result<LabelMap> {
    let raw = read_any(path)?;
    let [m, d, h, w] = raw.dims;
    if m != 1 {
        return Err(Error::unreadable(
            path,
            format!("label volume has {m} frames"),
        ));
    }
    let mapping = raw.mapping.as_ref().unwrap_or(&options.mapping);
    let mut labels = Vec::with_capacity(raw.values.len());
    for &v in &raw.values {
        match (mapping.class_of(v), options.unmapped) {
            (Some(c), _) => labels.push(c),
            (None, UnmappedPolicy::Background) => labels.push(0),
            (None, UnmappedPolicy::Strict) => {
                return Err(Error::UnmappedLabelValue {
                    path: path.to_path_buf(),
                    value: v,
                })
            }
        }
    }
    LabelMap::new(labels, [d, h, w], mapping.class_names(), raw.spacing)
}

pub fn load_volume(path: &Path, modality: Modality, options: &LabelOptions) -> Result<Loaded> {
    match modality {
        Modality::T1 | Modality::T2 => load_intensity(path).map(Loaded::Intensity),
        Modality::Label => load_labels(path, options).map(Loaded::Labels),
    }
}

/// Load T1 and T2 from separate files, or one two-frame file.
pub fn load_pair(paths: &[&Path]) -> Result<MultiModalVolume> {
    let parts: Vec<MultiModalVolume> = paths
        .iter()
        .map(|p| load_intensity(p))
        .collect::<Result<_>>()?;
    let vol = MultiModalVolume::stack(&parts)?;
    if vol.modalities() != 2 {
        return Err(Error::BadInputShape {
            shape: vol.data.shape().to_vec(),
            reason: "network input needs exactly T1 and T2".into(),
        });
    }
    Ok(vol)
}

/// Append the format's extension to `stem`.
pub fn path_with_format(stem: &Path, format: VolumeFormat) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(format.extension());
    s.into()
}

/// Write a label map. NIfTI and Analyze store `mapping` values (class indices
/// when `None`); the internal format stores class indices plus the table.
pub fn save_labelmap(
    lm: &LabelMap,
    path: &Path,
    format: VolumeFormat,
    mapping: Option<&LabelMapping>,
) -> Result<()> {
    let identity = LabelMapping::identity(&lm.class_names);
    let mapping = mapping.unwrap_or(&identity);
    if mapping.entries.len() != lm.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "mapping has {} entries for {} classes",
            mapping.entries.len(),
            lm.num_classes()
        )));
    }
    let values: Vec<f64> = lm
        .labels
        .iter()
        .map(|&c| mapping.value_of(c).unwrap_or(0) as f64)
        .collect();
    let [d, h, w] = lm.dims;
    let dims = [1, d, h, w];
    match format {
        VolumeFormat::Internal => {
            let max = mapping.entries.iter().map(|e| e.0).max().unwrap_or(0);
            let min = mapping.entries.iter().map(|e| e.0).min().unwrap_or(0);
            let dtype = if min >= 0 && max <= 255 {
                RawDtype::U8
            } else {
                RawDtype::I16
            };
            raw::write(path, dims, lm.spacing, dtype, &values, Some(mapping), None)
        }
        VolumeFormat::Nifti | VolumeFormat::NiftiGz | VolumeFormat::Analyze => {
            let max = mapping.entries.iter().map(|e| e.0).max().unwrap_or(0);
            let dtype = if max <= 255 {
                NiftiDtype::U8
            } else {
                NiftiDtype::I16
            };
            nifti::write(path, format, dims, lm.spacing, dtype, &values)
        }
    }
}

/// Write a scalar or multi-modal float volume.
pub fn save_volume(vol: &MultiModalVolume, path: &Path, format: VolumeFormat) -> Result<()> {
    let s = vol.data.shape();
    let dims = [s[0], s[1], s[2], s[3]];
    match format {
        VolumeFormat::Internal => raw::write(
            path,
            dims,
            vol.spacing,
            RawDtype::F32,
            vol.data.data(),
            None,
            Some(&vol.subject_id),
        ),
        _ => nifti::write(
            path,
            format,
            dims,
            vol.spacing,
            NiftiDtype::F32,
            vol.data.data(),
        ),
    }
}
