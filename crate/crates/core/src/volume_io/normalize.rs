use super::MultiModalVolume;
use crate::error::{Error, Result};

/// Per-modality z-score over the foreground mask; background stays 0.
///
/// The mask is the set of nonzero voxels on first use and is stored on the
/// returned volume, so normalizing again reuses it (a z-scored foreground
/// voxel may legitimately be exactly 0).
///
/// ```
/// # use hdan::volume_io::{normalize, MultiModalVolume};
/// # use hdan_tensor::Tensor;
/// let data = Tensor::from_vec(&[1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
/// let vol = normalize(&MultiModalVolume::new(data, [1.0; 3], "s").unwrap()).unwrap();
/// let v = vol.data.data();
/// assert_eq!(v[0], 0.0);
/// assert!((v[1] + 1.224745).abs() < 1e-6 && v[2].abs() < 1e-12);
/// ```
pub fn normalize(vol: &MultiModalVolume) -> Result<MultiModalVolume> {
    let per = vol.dims().iter().product::<usize>();
    let mask = vol
        .foreground
        .clone()
        .unwrap_or_else(|| vol.data.data().iter().map(|&v| v != 0.0).collect());
    let mut out = vol.data.clone();
    for m in 0..vol.modalities() {
        let values = &mut out.data_mut()[m * per..(m + 1) * per];
        let fg = &mask[m * per..(m + 1) * per];
        let count = fg.iter().filter(|&&f| f).count();
        if count == 0 {
            return Err(Error::EmptyForeground { modality: m });
        }
        let n = count as f64;
        let mean = values
            .iter()
            .zip(fg)
            .filter(|p| *p.1)
            .map(|p| *p.0)
            .sum::<f64>()
            / n;
        let var = values
            .iter()
            .zip(fg)
            .filter(|p| *p.1)
            .map(|p| (p.0 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std == 0.0 || !std.is_finite() {
            return Err(Error::DegenerateIntensity { modality: m });
        }
        for (v, &f) in values.iter_mut().zip(fg) {
            *v = if f { (*v - mean) / std } else { 0.0 };
        }
    }
    Ok(MultiModalVolume {
        data: out,
        spacing: vol.spacing,
        subject_id: vol.subject_id.clone(),
        foreground: Some(mask),
    })
}
