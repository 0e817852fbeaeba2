//! Frequency-weighted cross-entropy.

use hdan_tensor::Tensor;

use crate::error::{Error, Result};
use crate::network::{softmax, ProbabilityMap};
use crate::volume_io::LabelMap;

/// Probabilities are clamped to at least this before the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub source_histogram: Vec<u64>,
}

/// `w_c = N / (C' * N_c)` with `C'` the number of classes present; absent
/// classes get weight zero.
///
/// ```
/// let cw = hdan::loss::compute_class_weights(&[700, 100, 100, 100]).unwrap();
/// assert!((cw.w[0] - 1000.0 / 2800.0).abs() < 1e-12);
/// assert_eq!(cw.w[1], 2.5);
/// ```
pub fn compute_class_weights(hist: &[u64]) -> Result<ClassWeights> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let present = hist.iter().filter(|&&n| n > 0).count() as f64;
    let w = hist
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                total as f64 / (present * n as f64)
            }
        })
        .collect();
    Ok(ClassWeights {
        w,
        source_histogram: hist.to_vec(),
    })
}

/// `ln max(p, LOG_CLAMP)` that keeps NaN visible.
fn clamped_ln(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(LOG_CLAMP).ln()
    }
}

fn check_classes(classes: usize, cw: &ClassWeights) -> Result<()> {
    if cw.w.len() != classes {
        return Err(Error::ShapeMismatch(format!(
            "{} class weights for {classes} classes",
            cw.w.len()
        )));
    }
    Ok(())
}

fn label_index(label: u8, classes: usize) -> Result<usize> {
    let y = label as usize;
    if y >= classes {
        return Err(Error::ShapeMismatch(format!(
            "label {y} outside {classes} classes"
        )));
    }
    Ok(y)
}

/// Mean over voxels of `w_y * -ln P_y`.
pub fn weighted_cross_entropy(p: &ProbabilityMap, y: &LabelMap, cw: &ClassWeights) -> Result<f64> {
    if p.dims() != y.dims {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs labels {:?}",
            p.dims(),
            y.dims
        )));
    }
    let c = p.num_classes();
    check_classes(c, cw)?;
    let n = y.labels.len();
    let probs = p.probs.data();
    let mut total = 0.0;
    for (i, &label) in y.labels.iter().enumerate() {
        let k = label_index(label, c)?;
        total += cw.w[k] * -clamped_ln(probs[k * n + i]);
    }
    Ok(total / n as f64)
}

/// Loss and its gradient w.r.t. `[N, C, ...]` logits for labels laid out
/// sample-major (`N * voxels`).
///
/// The gradient is `w_y (softmax - onehot) / (N * voxels)`, and zero at
/// voxels whose true-class probability sits below the clamp.
pub fn weighted_cross_entropy_logits(
    logits: &Tensor,
    labels: &[u8],
    cw: &ClassWeights,
) -> Result<(f64, Tensor)> {
    if logits.rank() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "logits of shape {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    check_classes(c, cw)?;
    let s = logits.len() / (n * c).max(1);
    if labels.len() != n * s {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} voxels",
            labels.len(),
            n * s
        )));
    }
    let mut grad = softmax(logits);
    let scale = 1.0 / (n * s) as f64;
    let mut total = 0.0;
    let g = grad.data_mut();
    for b in 0..n {
        let sample = &mut g[b * c * s..(b + 1) * c * s];
        for v in 0..s {
            let y = label_index(labels[b * s + v], c)?;
            let p_true = sample[y * s + v];
            total += cw.w[y] * -clamped_ln(p_true);
            let factor = if p_true < LOG_CLAMP {
                0.0
            } else {
                cw.w[y] * scale
            };
            for k in 0..c {
                let p = &mut sample[k * s + v];
                *p = factor * (*p - if k == y { 1.0 } else { 0.0 });
            }
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_degenerate_histograms() {
        assert_eq!(compute_class_weights(&[250; 4]).unwrap().w, vec![1.0; 4]);
        assert_eq!(
            compute_class_weights(&[1000, 0, 0, 0]).unwrap().w,
            vec![1.0, 0.0, 0.0, 0.0]
        );
        assert!(matches!(
            compute_class_weights(&[0, 0]),
            Err(Error::EmptyHistogram)
        ));
    }

    #[test]
    fn single_voxel_hand_value() {
        let p = ProbabilityMap::new(
            Tensor::from_vec(&[2, 1, 1, 1], vec![0.5, 0.5]).unwrap(),
            [1.0; 3],
        )
        .unwrap();
        let y = LabelMap::new(vec![1], [1, 1, 1], vec!["a".into(), "b".into()], [1.0; 3]).unwrap();
        let cw = ClassWeights {
            w: vec![1.0, 2.0],
            source_histogram: vec![1, 1],
        };
        let loss = weighted_cross_entropy(&p, &y, &cw).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_is_near_zero() {
        let p = ProbabilityMap::new(
            Tensor::from_vec(&[2, 1, 1, 2], vec![1.0 - 1e-12, 1e-12, 1e-12, 1.0 - 1e-12]).unwrap(),
            [1.0; 3],
        )
        .unwrap();
        let y = LabelMap::new(
            vec![0, 1],
            [1, 1, 2],
            vec!["a".into(), "b".into()],
            [1.0; 3],
        )
        .unwrap();
        let cw = compute_class_weights(&[1, 1]).unwrap();
        assert!(weighted_cross_entropy(&p, &y, &cw).unwrap() <= 1e-11);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let logits = Tensor::from_vec(&[1, 2, 1], vec![0.0, 1000.0]).unwrap();
        let cw = compute_class_weights(&[1, 1]).unwrap();
        let (loss, grad) = weighted_cross_entropy_logits(&logits, &[0], &cw).unwrap();
        assert!((loss - -LOG_CLAMP.ln()).abs() < 1e-9);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_errors() {
        let cw = compute_class_weights(&[1, 1, 1]).unwrap();
        let logits = Tensor::zeros(&[1, 2, 4]);
        assert!(matches!(
            weighted_cross_entropy_logits(&logits, &[0; 4], &cw),
            Err(Error::ShapeMismatch(_))
        ));
        let cw = compute_class_weights(&[1, 1]).unwrap();
        assert!(weighted_cross_entropy_logits(&logits, &[0; 3], &cw).is_err());
        assert!(weighted_cross_entropy_logits(&logits, &[0, 0, 0, 2], &cw).is_err());
    }
}
