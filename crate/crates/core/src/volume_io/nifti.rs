//! NIfTI-1 (single file, optionally gzipped, or .hdr/.img pair) and
//! Analyze 7.5 headers.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{RawVolume, Spacing, VolumeFormat};
use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const SINGLE_FILE_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiFlavor {
    /// `n+1`: header and voxels in one file.
    Single,
    /// `ni1`: NIfTI header in a `.hdr` next to an `.img`.
    Pair,
    /// No magic: plain Analyze 7.5.
    Analyze,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl NiftiDtype {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            256 => Self::I8,
            512 => Self::U16,
            768 => Self::U32,
            _ => return None,
        })
    }

    fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
            Self::F64 => 64,
            Self::I8 => 256,
            Self::U16 => 512,
            Self::U32 => 768,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, bytes: &[u8], big_endian: bool) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let arr = bytes.try_into().expect("element width");
                if big_endian {
                    <$t>::from_be_bytes(arr) as f64
                } else {
                    <$t>::from_le_bytes(arr) as f64
                }
            }};
        }
        match self {
            Self::U8 => bytes[0] as f64,
            Self::I8 => bytes[0] as i8 as f64,
            Self::I16 => num!(i16),
            Self::U16 => num!(u16),
            Self::I32 => num!(i32),
            Self::U32 => num!(u32),
            Self::F32 => num!(f32),
            Self::F64 => num!(f64),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            Self::I8 => out.push(v.round().clamp(-128.0, 127.0) as i8 as u8),
            Self::I16 => out.extend((v.round() as i16).to_le_bytes()),
            Self::U16 => out.extend((v.round() as u16).to_le_bytes()),
            Self::I32 => out.extend((v.round() as i32).to_le_bytes()),
            Self::U32 => out.extend((v.round() as u32).to_le_bytes()),
            Self::F32 => out.extend((v as f32).to_le_bytes()),
            Self::F64 => out.extend(v.to_le_bytes()),
        }
    }
}

/// Fields of the 348-byte header this crate uses.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Header {
    pub flavor: NiftiFlavor,
    pub big_endian: bool,
    pub dim: [i16; 8],
    pub dtype: NiftiDtype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

struct Fields<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, at: usize) -> i32 {
        let b = self.bytes[at..at + 4].try_into().expect("4 bytes");
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }
}

pub(crate) fn parse_header(path: &Path, bytes: &[u8], expect: &[NiftiFlavor]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::unreadable(path, "shorter than a 348-byte header"));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let be = i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(Error::unreadable(
                path,
                format!("sizeof_hdr is {le}, not 348"),
            ))
        }
    };
    let flavor = match &bytes[344..348] {
        b"n+1\0" => NiftiFlavor::Single,
        b"ni1\0" => NiftiFlavor::Pair,
        _ => NiftiFlavor::Analyze,
    };
    if !expect.contains(&flavor) {
        let magic = String::from_utf8_lossy(&bytes[344..347]).into_owned();
        return Err(Error::unreadable(
            path,
            format!("magic `{magic}` does not match {expect:?}"),
        ));
    }
    let f = Fields { bytes, big_endian };
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = f.i16(40 + 2 * i);
    }
    let code = f.i16(70);
    let dtype = NiftiDtype::from_code(code)
        .ok_or_else(|| Error::unreadable(path, format!("unsupported datatype code {code}")))?;
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = f.f32(76 + 4 * i);
    }
    let (scl_slope, scl_inter) = if flavor == NiftiFlavor::Analyze {
        (0.0, 0.0)
    } else {
        (f.f32(112), f.f32(116))
    };
    Ok(Header {
        flavor,
        big_endian,
        dim,
        dtype,
        pixdim,
        vox_offset: f.f32(108),
        scl_slope,
        scl_inter,
    })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::unreadable(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn decode(path: &Path, header: &Header, voxels: &[u8]) -> Result<RawVolume> {
    let ndim = header.dim[0];
    if !(3..=7).contains(&ndim) {
        return Err(Error::unreadable(
            path,
            format!("dim[0] = {ndim}; need a 3D volume"),
        ));
    }
    let extent = |i: usize| -> usize {
        if (i as i16) <= ndim {
            header.dim[i].max(1) as usize
        } else {
            1
        }
    };
    if header.dim[1..=3].iter().any(|&d| d < 1) {
        return Err(Error::unreadable(
            path,
            format!("non-positive dims {:?}", &header.dim[1..4]),
        ));
    }
    let (nx, ny, nz) = (extent(1), extent(2), extent(3));
    let frames: usize = (4..=7).map(extent).product();
    let spacing_xyz = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    if spacing_xyz.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(Error::SpacingMissing {
            path: path.to_path_buf(),
        });
    }
    let count = nx * ny * nz * frames;
    let width = header.dtype.size();
    if voxels.len() < count * width {
        return Err(Error::unreadable(
            path,
            format!(
                "{} voxel bytes, header needs {}",
                voxels.len(),
                count * width
            ),
        ));
    }
    let scale = header.scl_slope != 0.0 && !(header.scl_slope == 1.0 && header.scl_inter == 0.0);
    let values = voxels[..count * width]
        .chunks_exact(width)
        .map(|b| {
            let v = header.dtype.decode(b, header.big_endian);
            if scale {
                v * header.scl_slope as f64 + header.scl_inter as f64
            } else {
                v
            }
        })
        .collect();
    let spacing: Spacing = [
        spacing_xyz[2] as f64,
        spacing_xyz[1] as f64,
        spacing_xyz[0] as f64,
    ];
    Ok(RawVolume {
        dims: [frames, nz, ny, nx],
        spacing,
        values,
        mapping: None,
        subject_id: None,
    })
}

pub(crate) fn read_single(path: &Path) -> Result<RawVolume> {
    let bytes = read_maybe_gz(path)?;
    let header = parse_header(path, &bytes, &[NiftiFlavor::Single])?;
    let offset = (header.vox_offset as usize).max(HEADER_LEN);
    if offset > bytes.len() {
        return Err(Error::unreadable(path, "vox_offset beyond end of file"));
    }
    decode(path, &header, &bytes[offset..])
}

fn companion(path: &Path, from: &str, to: &str) -> PathBuf {
    let s = path.to_string_lossy();
    let lower = s.to_ascii_lowercase();
    let cut = lower.rfind(from).unwrap_or(s.len());
    PathBuf::from(format!("{}{to}", &s[..cut]))
}

pub(crate) fn read_pair(path: &Path) -> Result<RawVolume> {
    let lower = path.to_string_lossy().to_ascii_lowercase();
    let (hdr, img) = if lower.ends_with(".hdr") {
        let img = companion(path, ".hdr", ".img");
        let gz = companion(path, ".hdr", ".img.gz");
        (
            path.to_path_buf(),
            if img.exists() || !gz.exists() {
                img
            } else {
                gz
            },
        )
    } else {
        (companion(path, ".img", ".hdr"), path.to_path_buf())
    };
    let header_bytes = read_maybe_gz(&hdr)?;
    let header = parse_header(
        &hdr,
        &header_bytes,
        &[NiftiFlavor::Pair, NiftiFlavor::Analyze],
    )?;
    let voxels = read_maybe_gz(&img)?;
    let offset = header.vox_offset.max(0.0) as usize;
    if offset > voxels.len() {
        return Err(Error::unreadable(
            &img,
            "vox_offset beyond end of image file",
        ));
    }
    decode(&hdr, &header, &voxels[offset..])
}

fn header_bytes(
    flavor: NiftiFlavor,
    dims: [usize; 4],
    spacing: Spacing,
    dtype: NiftiDtype,
) -> Result<Vec<u8>> {
    let [m, d, h, w] = dims;
    let mut b = vec![0u8; HEADER_LEN];
    b[0..4].copy_from_slice(&348i32.to_le_bytes());
    if flavor == NiftiFlavor::Analyze {
        b[32..36].copy_from_slice(&16384i32.to_le_bytes());
        b[38] = b'r';
    }
    let four_d = m > 1;
    let mut dim = [0i16; 8];
    dim[0] = if four_d { 4 } else { 3 };
    for (i, extent) in [w, h, d, m].into_iter().enumerate() {
        dim[i + 1] = i16::try_from(extent).map_err(|_| {
            Error::InvalidConfig(format!("extent {extent} exceeds the NIfTI-1 limit"))
        })?;
    }
    for v in dim[5..].iter_mut() {
        *v = 1;
    }
    for (i, v) in dim.iter().enumerate() {
        b[40 + 2 * i..42 + 2 * i].copy_from_slice(&v.to_le_bytes());
    }
    b[70..72].copy_from_slice(&dtype.code().to_le_bytes());
    b[72..74].copy_from_slice(&((dtype.size() * 8) as i16).to_le_bytes());
    let pixdim = [
        1.0f32,
        spacing[2] as f32,
        spacing[1] as f32,
        spacing[0] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, v) in pixdim.iter().enumerate() {
        b[76 + 4 * i..80 + 4 * i].copy_from_slice(&v.to_le_bytes());
    }
    let offset = if flavor == NiftiFlavor::Single {
        SINGLE_FILE_OFFSET as f32
    } else {
        0.0
    };
    b[108..112].copy_from_slice(&offset.to_le_bytes());
    if flavor != NiftiFlavor::Analyze {
        b[112..116].copy_from_slice(&1.0f32.to_le_bytes());
        b[123] = 2; // mm
        b[344..348].copy_from_slice(if flavor == NiftiFlavor::Single {
            b"n+1\0"
        } else {
            b"ni1\0"
        });
    }
    Ok(b)
}

fn write_file(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let file = fs::File::create(path)?;
        if gzip {
            let mut enc = GzEncoder::new(file, Compression::default());
            enc.write_all(bytes)?;
            enc.finish()?;
        } else {
            let mut file = std::io::BufWriter::new(file);
            file.write_all(bytes)?;
            file.flush()?;
        }
        Ok(())
    };
    write().map_err(|e| Error::io(path, e))
}

/// Write little-endian voxels; `path` is the `.nii`, `.nii.gz` or `.hdr` file.
pub(crate) fn write(
    path: &Path,
    format: VolumeFormat,
    dims: [usize; 4],
    spacing: Spacing,
    dtype: NiftiDtype,
    values: &[f64],
) -> Result<()> {
    let mut voxels = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        dtype.encode(v, &mut voxels);
    }
    match format {
        VolumeFormat::Nifti | VolumeFormat::NiftiGz => {
            let mut bytes = header_bytes(NiftiFlavor::Single, dims, spacing, dtype)?;
            bytes.extend_from_slice(&[0; SINGLE_FILE_OFFSET - HEADER_LEN]);
            bytes.extend_from_slice(&voxels);
            write_file(path, &bytes, format == VolumeFormat::NiftiGz)
        }
        VolumeFormat::Analyze => {
            let header = header_bytes(NiftiFlavor::Analyze, dims, spacing, dtype)?;
            write_file(path, &header, false)?;
            write_file(&companion(path, ".hdr", ".img"), &voxels, false)
        }
        VolumeFormat::Internal => Err(Error::InvalidConfig(
            "internal format is not a NIfTI flavor".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_for(dims: [usize; 4]) -> Vec<u8> {
        header_bytes(NiftiFlavor::Single, dims, [1.0, 2.0, 3.0], NiftiDtype::I16).unwrap()
    }

    #[test]
    fn written_header_parses_back() {
        let bytes = header_for([1, 4, 5, 6]);
        let h = parse_header(Path::new("x.nii"), &bytes, &[NiftiFlavor::Single]).unwrap();
        assert_eq!(&h.dim[..4], &[3, 6, 5, 4]);
        assert_eq!(h.dtype, NiftiDtype::I16);
        assert_eq!(&h.pixdim[1..4], &[3.0, 2.0, 1.0]);
        assert_eq!(h.vox_offset, 352.0);
    }

    #[test]
    fn magic_mismatch_is_unreadable() {
        let mut bytes = header_for([1, 2, 2, 2]);
        bytes[344..348].copy_from_slice(b"xyz\0");
        let err = parse_header(Path::new("x.nii"), &bytes, &[NiftiFlavor::Single]).unwrap_err();
        assert!(matches!(err, Error::UnreadableFormat { .. }));
        let mut bytes = header_for([1, 2, 2, 2]);
        bytes[0] = 7;
        assert!(parse_header(Path::new("x.nii"), &bytes, &[NiftiFlavor::Single]).is_err());
    }

    #[test]
    fn big_endian_headers_are_understood() {
        let mut b = vec![0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, v) in [3i16, 2, 2, 2, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&v.to_be_bytes());
        }
        b[70..72].copy_from_slice(&4i16.to_be_bytes());
        b[80..84].copy_from_slice(&1.5f32.to_be_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        let h = parse_header(Path::new("x.nii"), &b, &[NiftiFlavor::Single]).unwrap();
        assert!(h.big_endian);
        assert_eq!(h.pixdim[1], 1.5);
    }
}
