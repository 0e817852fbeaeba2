mod assess;
mod evaluate;
mod phantom;
mod predict;
mod train;

use std::path::{Path, PathBuf};

use hdan::volume_io::{LabelMapping, LabelOptions, UnmappedPolicy};

use crate::args::{LabelArgs, VizArgs};
use crate::image::{render_slices, resolve_slices};
use crate::Failure;

pub use assess::assess;
pub use evaluate::evaluate;
pub use phantom::phantom;
pub use predict::predict;
pub use train::train;

const VOLUME_SUFFIXES: [&str; 4] = [".meta", ".nii", ".nii.gz", ".hdr"];

fn label_options(a: &LabelArgs) -> Result<LabelOptions, Failure> {
    let mapping = match &a.label_map {
        Some(text) => LabelMapping::parse(text)?,
        None => LabelMapping::default(),
    };
    let unmapped = if a.lenient_labels {
        UnmappedPolicy::Background
    } else {
        UnmappedPolicy::Strict
    };
    Ok(LabelOptions { mapping, unmapped })
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

/// Volume files directly inside `dir`, sorted by name.
fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| VOLUME_SUFFIXES.iter().any(|s| n.ends_with(s)))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn viz_attention(a: &VizArgs) -> Result<(), Failure> {
    let vol = hdan::volume_io::load_intensity(&a.volume)?;
    if a.frame >= vol.modalities() {
        return Err(Failure::usage(format!(
            "frame {} requested from a volume with {} frame(s)",
            a.frame,
            vol.modalities()
        )));
    }
    let dims = vol.dims();
    let n: usize = dims.iter().product();
    let data = &vol.data.data()[a.frame * n..(a.frame + 1) * n];
    let slices = resolve_slices(&a.slice, dims)?;
    let written = render_slices(data, dims, &slices, a.low, a.high, &a.out)?;
    println!(
        "wrote {} slice image(s) to {}",
        written.len(),
        a.out.display()
    );
    Ok(())
}
