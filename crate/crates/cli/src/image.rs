//! Slice rendering with a fixed blue-to-red colormap.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::args::SliceSpec;
use crate::Failure;

const AXIS_NAMES: [&str; 3] = ["z", "y", "x"];

/// Jet colormap: blue at 0, through cyan, green and yellow, to red at 1.
pub fn jet(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let channel = |centre: f64| (1.5 - (4.0 * t - centre).abs()).clamp(0.0, 1.0);
    let [r, g, b] = [channel(3.0), channel(2.0), channel(1.0)];
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Rows and columns of a slice orthogonal to `axis`.
fn slice_pixels(data: &[f64], dims: [usize; 3], s: SliceSpec) -> (usize, usize, Vec<f64>) {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x];
    match s.axis {
        0 => (
            h,
            w,
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .map(|(y, x)| at(s.index, y, x))
                .collect(),
        ),
        1 => (
            d,
            w,
            (0..d)
                .flat_map(|z| (0..w).map(move |x| (z, x)))
                .map(|(z, x)| at(z, s.index, x))
                .collect(),
        ),
        _ => (
            d,
            h,
            (0..d)
                .flat_map(|z| (0..h).map(move |y| (z, y)))
                .map(|(z, y)| at(z, y, s.index))
                .collect(),
        ),
    }
}

/// Every slice along z when `requested` is empty.
pub fn resolve_slices(
    requested: &[SliceSpec],
    dims: [usize; 3],
) -> Result<Vec<SliceSpec>, Failure> {
    if requested.is_empty() {
        return Ok((0..dims[0])
            .map(|index| SliceSpec { axis: 0, index })
            .collect());
    }
    for s in requested {
        if s.index >= dims[s.axis] {
            return Err(Failure::usage(format!(
                "slice {}:{} is outside a volume of {dims:?}",
                AXIS_NAMES[s.axis], s.index
            )));
        }
    }
    Ok(requested.to_vec())
}

/// Write one RGB PNG per slice into `dir`, mapping `[low, high]` onto the
/// colormap. Returns the written paths.
pub fn render_slices(
    data: &[f64],
    dims: [usize; 3],
    slices: &[SliceSpec],
    low: f64,
    high: f64,
    dir: &Path,
) -> Result<Vec<PathBuf>, Failure> {
    if high.partial_cmp(&low) != Some(std::cmp::Ordering::Greater) {
        return Err(Failure::usage(format!(
            "colormap range [{low}, {high}] is empty"
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let mut written = Vec::with_capacity(slices.len());
    for &s in slices {
        let (rows, cols, pixels) = slice_pixels(data, dims, s);
        let rgb: Vec<u8> = pixels
            .iter()
            .flat_map(|&v| jet((v - low) / (high - low)))
            .collect();
        let path = dir.join(format!("{}_{:03}.png", AXIS_NAMES[s.axis], s.index));
        let file = File::create(&path).map_err(|e| Failure::io(&path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Failure::runtime(format!("{}: {e}", path.display()));
        let mut writer = encoder.write_header().map_err(fail)?;
        writer.write_image_data(&rgb).map_err(fail)?;
        writer.finish().map_err(fail)?;
        written.push(path);
    }
    Ok(written)
}
