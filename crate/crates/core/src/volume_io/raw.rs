//! Internal format: a plain-text `.meta` sidecar next to a `.raw` block of
//! little-endian voxels.
//!
//! ```text
//! dims = 1 64 64 64
//! spacing_mm = 1 1 1
//! dtype = u8
//! labels = 0:BG 1:CSF 2:GM 3:WM
//! subject_id = phantom_000
//! ```
//!
//! `dims` lists `[M,] D H W`; `labels` and `subject_id` are optional.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{LabelMapping, RawVolume, Spacing};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawDtype {
    U8,
    I16,
    F32,
}

impl RawDtype {
    fn name(self) -> &'static str {
        match self {
            Self::U8 => "u8",
            Self::I16 => "i16",
            Self::F32 => "f32",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "u8" => Some(Self::U8),
            "i16" => Some(Self::I16),
            "f32" => Some(Self::F32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::F32 => 4,
        }
    }
}

pub(crate) fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = path.with_extension("");
    (stem.with_extension("meta"), stem.with_extension("raw"))
}

pub(crate) fn read(path: &Path) -> Result<RawVolume> {
    let (meta_path, raw_path) = sidecar_paths(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut keys = BTreeMap::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::unreadable(&meta_path, format!("line `{line}` is not key = value"))
        })?;
        keys.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        keys.get(k)
            .ok_or_else(|| Error::unreadable(&meta_path, format!("missing `{k}`")))
    };
    let dims: Vec<usize> = get("dims")?
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::unreadable(&meta_path, format!("bad dim `{t}`")))
        })
        .collect::<Result<_>>()?;
    let dims = match dims[..] {
        [d, h, w] => [1, d, h, w],
        [m, d, h, w] => [m, d, h, w],
        _ => {
            return Err(Error::unreadable(
                &meta_path,
                "dims must list 3 or 4 extents",
            ))
        }
    };
    let spacing_text = keys
        .get("spacing_mm")
        .ok_or_else(|| Error::SpacingMissing {
            path: meta_path.clone(),
        })?;
    let spacing: Vec<f64> = spacing_text
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::SpacingMissing {
                path: meta_path.clone(),
            })
        })
        .collect::<Result<_>>()?;
    if spacing.len() != 3 || spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::SpacingMissing { path: meta_path });
    }
    let dtype = RawDtype::parse(get("dtype")?)
        .ok_or_else(|| Error::unreadable(&meta_path, "dtype must be u8, i16 or f32"))?;
    let mapping = keys
        .get("labels")
        .map(|t| LabelMapping::parse(t))
        .transpose()?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let count: usize = dims.iter().product();
    if bytes.len() != count * dtype.width() {
        return Err(Error::unreadable(
            &raw_path,
            format!(
                "{} bytes, sidecar needs {}",
                bytes.len(),
                count * dtype.width()
            ),
        ));
    }
    let values = bytes
        .chunks_exact(dtype.width())
        .map(|b| match dtype {
            RawDtype::U8 => b[0] as f64,
            RawDtype::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            RawDtype::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        })
        .collect();
    Ok(RawVolume {
        dims,
        spacing: [spacing[0], spacing[1], spacing[2]],
        values,
        mapping,
        subject_id: keys.get("subject_id").cloned(),
    })
}

pub(crate) fn write(
    path: &Path,
    dims: [usize; 4],
    spacing: Spacing,
    dtype: RawDtype,
    values: &[f64],
    mapping: Option<&LabelMapping>,
    subject_id: Option<&str>,
) -> Result<()> {
    let (meta_path, raw_path) = sidecar_paths(path);
    let mut meta = String::from("# hdan raw volume\n");
    let dims_text = if dims[0] == 1 {
        format!("{} {} {}", dims[1], dims[2], dims[3])
    } else {
        format!("{} {} {} {}", dims[0], dims[1], dims[2], dims[3])
    };
    meta.push_str(&format!("dims = {dims_text}\n"));
    meta.push_str(&format!(
        "spacing_mm = {} {} {}\n",
        spacing[0], spacing[1], spacing[2]
    ));
    meta.push_str(&format!("dtype = {}\n", dtype.name()));
    if let Some(m) = mapping {
        meta.push_str(&format!("labels = {}\n", m.render()));
    }
    if let Some(id) = subject_id {
        meta.push_str(&format!("subject_id = {id}\n"));
    }
    let mut bytes = Vec::with_capacity(values.len() * dtype.width());
    for &v in values {
        match dtype {
            RawDtype::U8 => bytes.push(v.round().clamp(0.0, 255.0) as u8),
            RawDtype::I16 => bytes.extend((v.round() as i16).to_le_bytes()),
            RawDtype::F32 => bytes.extend((v as f32).to_le_bytes()),
        }
    }
    let put = |p: &Path, b: &[u8]| -> Result<()> {
        let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
        f.write_all(b).map_err(|e| Error::io(p, e))
    };
    put(&raw_path, &bytes)?;
    put(&meta_path, meta.as_bytes())
}
