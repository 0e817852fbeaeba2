//! Overlap and surface-distance metrics per tissue class.
//!
//! Boundaries are the 6-connected surface voxels of a mask, with voxels
//! outside the volume counted as background. Distances are in millimetres
//! between voxel centres.

mod kdtree;
mod report;

pub use report::{read_report, summarize, write_report, ClassSummary, ReportRow};

use crate::error::{Error, Result};
use crate::volume_io::{LabelMap, Spacing};
use kdtree::KdTree;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub voxels: Vec<bool>,
    pub dims: [usize; 3],
    pub spacing: Spacing,
}

impl BinaryMask {
    pub fn new(voxels: Vec<bool>, dims: [usize; 3], spacing: Spacing) -> Result<Self> {
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        Ok(Self {
            voxels,
            dims,
            spacing,
        })
    }

    pub fn from_labels(lm: &LabelMap, class: u8) -> Self {
        Self {
            voxels: lm.labels.iter().map(|&l| l == class).collect(),
            dims: lm.dims,
            spacing: lm.spacing,
        }
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySet {
    pub points: Vec<[f64; 3]>,
}

fn same_shape(a: &BinaryMask, g: &BinaryMask) -> Result<()> {
    if a.dims != g.dims {
        return Err(Error::ShapeMismatch(format!(
            "masks {:?} vs {:?}",
            a.dims, g.dims
        )));
    }
    Ok(())
}

/// `2|A ∩ G| / (|A| + |G|)`.
///
/// ```
/// use hdan::metrics::{dice, BinaryMask};
/// let a = BinaryMask::new(vec![true, true, false, false], [1, 2, 2], [1.0; 3]).unwrap();
/// let g = BinaryMask::new(vec![true, false, true, false], [1, 2, 2], [1.0; 3]).unwrap();
/// assert_eq!(dice(&a, &g).unwrap(), 0.5);
/// ```
pub fn dice(a: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    same_shape(a, g)?;
    let (mut both, mut na, mut ng) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels.iter().zip(&g.voxels) {
        na += x as usize;
        ng += y as usize;
        both += (x && y) as usize;
    }
    if na + ng == 0 {
        return Err(Error::BothEmpty);
    }
    Ok(2.0 * both as f64 / (na + ng) as f64)
}

pub fn extract_boundary(m: &BinaryMask) -> Result<BoundarySet> {
    let [d, h, w] = m.dims;
    let at = |z: usize, y: usize, x: usize| m.voxels[(z * h + y) * w + x];
    let mut points = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let surface = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d
                    || y + 1 == h
                    || x + 1 == w
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if surface {
                    let s = m.spacing;
                    points.push([z as f64 * s[0], y as f64 * s[1], x as f64 * s[2]]);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(BoundarySet { points })
}

fn directed_mean(from: &[[f64; 3]], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest2(p).sqrt()).sum::<f64>() / from.len() as f64
}

/// Modified Hausdorff distance: the larger of the two directed mean
/// nearest-neighbour distances.
pub fn mhd(a: &BoundarySet, g: &BoundarySet) -> Result<f64> {
    if a.points.is_empty() || g.points.is_empty() {
        return Err(Error::EmptySet);
    }
    let (ta, tg) = (KdTree::new(&a.points), KdTree::new(&g.points));
    Ok(directed_mean(&a.points, &tg).max(directed_mean(&g.points, &ta)))
}

/// Why a class has no complete (dice, mhd) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissingClass {
    /// Absent from both prediction and truth.
    Both,
    Prediction,
    Truth,
}

impl MissingClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Both => "missing_both",
            Self::Prediction => "missing_pred",
            Self::Truth => "missing_truth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Both, Self::Prediction, Self::Truth]
            .into_iter()
            .find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub name: String,
    pub dice: Option<f64>,
    pub mhd: Option<f64>,
    pub missing: Option<MissingClass>,
}

/// Dice and MHD for every class except background (index 0).
pub fn evaluate_subject(pred: &LabelMap, truth: &LabelMap) -> Result<Vec<ClassMetrics>> {
    if pred.dims != truth.dims {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims, truth.dims
        )));
    }
    if pred.spacing != truth.spacing {
        return Err(Error::ShapeMismatch(format!(
            "prediction spacing {:?} vs truth {:?}",
            pred.spacing, truth.spacing
        )));
    }
    let classes = truth.num_classes().max(pred.num_classes());
    let mut out = Vec::with_capacity(classes.saturating_sub(1));
    for class in 1..classes as u8 {
        let (a, g) = (
            BinaryMask::from_labels(pred, class),
            BinaryMask::from_labels(truth, class),
        );
        let name = truth
            .class_names
            .get(class as usize)
            .or_else(|| pred.class_names.get(class as usize))
            .cloned()
            .unwrap_or_else(|| class.to_string());
        let mut m = ClassMetrics {
            class,
            name,
            dice: None,
            mhd: None,
            missing: None,
        };
        match dice(&a, &g) {
            Ok(d) => m.dice = Some(d),
            Err(Error::BothEmpty) => {
                m.missing = Some(MissingClass::Both);
                out.push(m);
                continue;
            }
            Err(e) => return Err(e),
        }
        match (extract_boundary(&a), extract_boundary(&g)) {
            (Ok(ba), Ok(bg)) => m.mhd = Some(mhd(&ba, &bg)?),
            (Err(_), _) => m.missing = Some(MissingClass::Prediction),
            (_, Err(_)) => m.missing = Some(MissingClass::Truth),
        }
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: [usize; 3], lo: usize, hi: usize) -> BinaryMask {
        let [d, h, w] = dims;
        let mut v = vec![false; d * h * w];
        for z in lo..hi {
            for y in lo..hi {
                for x in lo..hi {
                    v[(z * h + y) * w + x] = true;
                }
            }
        }
        BinaryMask::new(v, dims, [1.0; 3]).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = cube([6; 3], 1, 3);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &cube([6; 3], 4, 6)).unwrap(), 0.0);
        let empty = cube([6; 3], 0, 0);
        assert!(matches!(dice(&empty, &empty), Err(Error::BothEmpty)));
        assert!(matches!(
            dice(&a, &cube([5; 3], 0, 1)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn counted_overlap() {
        let dims = [1, 1, 8];
        let a = BinaryMask::new(
            [1, 1, 1, 1, 0, 0, 0, 0].map(|v| v == 1).to_vec(),
            dims,
            [1.0; 3],
        )
        .unwrap();
        let g = BinaryMask::new(
            [0, 1, 1, 1, 1, 1, 1, 0].map(|v| v == 1).to_vec(),
            dims,
            [1.0; 3],
        )
        .unwrap();
        assert!((dice(&a, &g).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn boundary_cases() {
        assert_eq!(
            extract_boundary(&cube([5; 3], 2, 3)).unwrap().points,
            vec![[2.0; 3]]
        );
        assert_eq!(
            extract_boundary(&cube([7; 3], 2, 5)).unwrap().points.len(),
            26
        );
        let full = extract_boundary(&cube([4; 3], 0, 4)).unwrap();
        assert_eq!(full.points.len(), 64 - 8);
        assert!(matches!(
            extract_boundary(&cube([4; 3], 0, 0)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn boundary_scales_with_spacing() {
        let mut m = cube([5; 3], 2, 3);
        m.spacing = [2.0, 0.5, 1.0];
        assert_eq!(extract_boundary(&m).unwrap().points, vec![[4.0, 1.0, 2.0]]);
    }

    #[test]
    fn mhd_cases() {
        let set = |p: &[[f64; 3]]| BoundarySet { points: p.to_vec() };
        let a = set(&[[0.0; 3]]);
        assert_eq!(mhd(&a, &a).unwrap(), 0.0);
        assert_eq!(mhd(&a, &set(&[[0.0, 0.0, 3.0]])).unwrap(), 3.0);
        assert_eq!(mhd(&a, &set(&[[0.0; 3], [0.0, 0.0, 4.0]])).unwrap(), 2.0);
        assert!(matches!(mhd(&a, &set(&[])), Err(Error::EmptySet)));
    }

    fn labels(v: Vec<u8>, dims: [usize; 3]) -> LabelMap {
        LabelMap::with_default_classes(v, dims, [1.0; 3]).unwrap()
    }

    #[test]
    fn subject_evaluation_isolates_missing_classes() {
        let truth: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
        let t = labels(truth.clone(), [4; 3]);
        let perfect = evaluate_subject(&t, &t).unwrap();
        assert_eq!(perfect.len(), 3);
        assert_eq!(perfect[0].dice, Some(1.0));
        assert_eq!(perfect[1].mhd, Some(0.0));
        assert_eq!(perfect[2].missing, Some(MissingClass::Both));

        let mut pred = truth;
        pred[0] = 3;
        let r = evaluate_subject(&labels(pred, [4; 3]), &t).unwrap();
        assert_eq!(r[2].missing, Some(MissingClass::Truth));
        assert_eq!(r[2].dice, Some(0.0));
        assert_eq!(r[0].dice, Some(1.0));
    }

    #[test]
    fn subject_shape_checks() {
        let a = labels(vec![0; 8], [2; 3]);
        let b = labels(vec![0; 27], [3; 3]);
        assert!(evaluate_subject(&a, &b).is_err());
    }
}
