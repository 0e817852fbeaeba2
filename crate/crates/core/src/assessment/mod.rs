//! Tissue volumetry from segmentations and preterm/term cohort comparison.

mod table;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::volume_io::LabelMap;

pub use table::{
    format_p_threshold, format_thousands, read_cohort_manifest, render_table, write_subject_csv,
    CohortEntry,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Preterm,
    Term,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Preterm, Group::Term];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Preterm => "preterm",
            Self::Term => "term",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Preterm => "Preterm",
            Self::Term => "Term",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "preterm" => Ok(Self::Preterm),
            "term" => Ok(Self::Term),
            other => Err(Error::Manifest(format!(
                "unknown group {other:?}, expected preterm or term"
            ))),
        }
    }
}

/// Physical tissue volumes of one segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueVolumes {
    pub wm_mm3: f64,
    pub gm_mm3: f64,
    pub csf_mm3: f64,
    /// WM + GM; CSF is not counted as brain tissue.
    pub brain_mm3: f64,
    /// `wm / brain`, undefined for an empty brain.
    pub wm_ratio: Option<f64>,
}

impl TissueVolumes {
    pub fn from_mm3(wm_mm3: f64, gm_mm3: f64, csf_mm3: f64) -> Self {
        let brain_mm3 = wm_mm3 + gm_mm3;
        Self {
            wm_mm3,
            gm_mm3,
            csf_mm3,
            brain_mm3,
            wm_ratio: (brain_mm3 > 0.0).then(|| wm_mm3 / brain_mm3),
        }
    }

    pub fn measure(&self, m: Measure) -> Option<f64> {
        match m {
            Measure::Wm => Some(self.wm_mm3),
            Measure::Gm => Some(self.gm_mm3),
            Measure::Csf => Some(self.csf_mm3),
            Measure::Brain => Some(self.brain_mm3),
            Measure::WmRatio => self.wm_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectVolumes {
    pub subject_id: String,
    pub group: Group,
    pub volumes: TissueVolumes,
}

/// Voxel count times voxel volume for the WM, GM and CSF classes.
///
/// ```
/// use hdan::assessment::tissue_volumes;
/// use hdan::volume_io::LabelMap;
/// let lm = LabelMap::with_default_classes(vec![3, 3, 2, 1, 0, 0, 0, 0], [2, 2, 2], [2.0; 3]).unwrap();
/// let v = tissue_volumes(&lm).unwrap();
/// assert_eq!((v.wm_mm3, v.gm_mm3, v.csf_mm3, v.brain_mm3), (16.0, 8.0, 8.0, 24.0));
/// assert_eq!(v.wm_ratio, Some(16.0 / 24.0));
/// ```
pub fn tissue_volumes(lm: &LabelMap) -> Result<TissueVolumes> {
    let hist = lm.histogram();
    let count = |name: &str| {
        lm.class_index(name)
            .map(|c| hist[c])
            .ok_or_else(|| Error::InvalidConfig(format!("label map has no {name} class")))
    };
    let voxel = lm.voxel_volume_mm3();
    Ok(TissueVolumes::from_mm3(
        count("WM")? as f64 * voxel,
        count("GM")? as f64 * voxel,
        count("CSF")? as f64 * voxel,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Wm,
    Gm,
    Csf,
    Brain,
    WmRatio,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::Wm,
        Measure::Gm,
        Measure::Csf,
        Measure::Brain,
        Measure::WmRatio,
    ];

    pub fn header(&self) -> &'static str {
        match self {
            Self::Wm => "WM",
            Self::Gm => "GM",
            Self::Csf => "CSF",
            Self::Brain => "Brain volume",
            Self::WmRatio => "WM ratio",
        }
    }
}

/// Two-sided Welch unequal-variance t-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Requires at least two observations per sample.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> WelchTest {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return if ma == mb {
            WelchTest {
                t: 0.0,
                df: f64::INFINITY,
                p: 1.0,
            }
        } else {
            WelchTest {
                t: (ma - mb).signum() * f64::INFINITY,
                df: f64::INFINITY,
                p: 0.0,
            }
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    WelchTest { t, df, p }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    pub n: usize,
    pub mean_wm_mm3: f64,
    pub mean_gm_mm3: f64,
    pub mean_csf_mm3: f64,
    pub mean_brain_mm3: f64,
    /// Mean of the individual subjects' ratios.
    pub mean_wm_ratio: f64,
    /// Subjects left out of the ratio mean because their brain volume is 0.
    pub undefined_ratios: usize,
}

impl GroupSummary {
    pub fn mean(&self, m: Measure) -> f64 {
        match m {
            Measure::Wm => self.mean_wm_mm3,
            Measure::Gm => self.mean_gm_mm3,
            Measure::Csf => self.mean_csf_mm3,
            Measure::Brain => self.mean_brain_mm3,
            Measure::WmRatio => self.mean_wm_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub preterm: GroupSummary,
    pub term: GroupSummary,
    /// Preterm versus term, per measure in [`Measure::ALL`] order.
    pub tests: Vec<(Measure, WelchTest)>,
}

impl CohortSummary {
    pub fn group(&self, g: Group) -> &GroupSummary {
        match g {
            Group::Preterm => &self.preterm,
            Group::Term => &self.term,
        }
    }

    pub fn test(&self, m: Measure) -> &WelchTest {
        &self
            .tests
            .iter()
            .find(|(k, _)| *k == m)
            .expect("every measure is tested")
            .1
    }
}

fn values(subjects: &[&SubjectVolumes], m: Measure) -> Vec<f64> {
    subjects
        .iter()
        .filter_map(|s| s.volumes.measure(m))
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Group means and preterm-versus-term Welch tests for every measure.
pub fn cohort_compare(subjects: &[SubjectVolumes]) -> Result<CohortSummary> {
    let split = |g: Group| -> Result<Vec<&SubjectVolumes>> {
        let members: Vec<&SubjectVolumes> = subjects.iter().filter(|s| s.group == g).collect();
        if members.len() < 2 {
            return Err(Error::GroupTooSmall {
                group: g.to_string(),
                n: members.len(),
            });
        }
        let ratios = values(&members, Measure::WmRatio).len();
        if ratios < members.len() {
            log::warn!(
                "{g}: {} subject(s) with zero brain volume left out of the WM ratio",
                members.len() - ratios
            );
        }
        if ratios < 2 {
            return Err(Error::GroupTooSmall {
                group: format!("{g} (defined WM ratios)"),
                n: ratios,
            });
        }
        Ok(members)
    };
    let (pre, term) = (split(Group::Preterm)?, split(Group::Term)?);
    let summary = |g: Group, members: &[&SubjectVolumes]| GroupSummary {
        group: g,
        n: members.len(),
        mean_wm_mm3: mean(&values(members, Measure::Wm)),
        mean_gm_mm3: mean(&values(members, Measure::Gm)),
        mean_csf_mm3: mean(&values(members, Measure::Csf)),
        mean_brain_mm3: mean(&values(members, Measure::Brain)),
        mean_wm_ratio: mean(&values(members, Measure::WmRatio)),
        undefined_ratios: members.len() - values(members, Measure::WmRatio).len(),
    };
    let tests = Measure::ALL
        .iter()
        .map(|&m| (m, welch_t_test(&values(&pre, m), &values(&term, m))))
        .collect();
    Ok(CohortSummary {
        preterm: summary(Group::Preterm, &pre),
        term: summary(Group::Term, &term),
        tests,
    })
}

/// Volumes for every manifest entry, reading labels from `base`-relative
/// paths.
pub fn assess_manifest(
    entries: &[CohortEntry],
    base: &Path,
    load: impl Fn(&Path) -> Result<LabelMap>,
) -> Result<Vec<SubjectVolumes>> {
    entries
        .iter()
        .map(|e| {
            let path: PathBuf = base.join(&e.path);
            let lm = load(&path)?;
            Ok(SubjectVolumes {
                subject_id: e.subject_id.clone(),
                group: e.group,
                volumes: tissue_volumes(&lm)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, group: Group, wm: f64, gm: f64, csf: f64) -> SubjectVolumes {
        SubjectVolumes {
            subject_id: id.into(),
            group,
            volumes: TissueVolumes::from_mm3(wm, gm, csf),
        }
    }

    #[test]
    fn spacing_scales_volumes() {
        let labels = vec![3u8; 10].into_iter().chain([0; 17]).collect::<Vec<_>>();
        let unit = LabelMap::with_default_classes(labels.clone(), [3, 3, 3], [1.0; 3]).unwrap();
        let coarse = LabelMap::with_default_classes(labels, [3, 3, 3], [2.0; 3]).unwrap();
        assert_eq!(tissue_volumes(&unit).unwrap().wm_mm3, 10.0);
        assert_eq!(tissue_volumes(&coarse).unwrap().wm_mm3, 80.0);
        assert_eq!(tissue_volumes(&coarse).unwrap().wm_ratio, Some(1.0));
    }

    #[test]
    fn empty_brain_has_no_ratio() {
        let lm = LabelMap::with_default_classes(vec![1, 0], [1, 1, 2], [1.0; 3]).unwrap();
        let v = tissue_volumes(&lm).unwrap();
        assert_eq!((v.brain_mm3, v.wm_ratio), (0.0, None));
        let named = LabelMap::new(
            vec![0, 1],
            [1, 1, 2],
            vec!["a".into(), "b".into()],
            [1.0; 3],
        )
        .unwrap();
        assert!(tissue_volumes(&named).is_err());
    }

    #[test]
    fn mean_of_ratios_not_ratio_of_means() {
        let s = [
            subject("a", Group::Preterm, 1.0, 3.0, 0.0),
            subject("b", Group::Preterm, 1.0, 1.0, 0.0),
            subject("c", Group::Term, 1.0, 3.0, 0.0),
            subject("d", Group::Term, 3.0, 1.0, 0.0),
        ];
        let c = cohort_compare(&s).unwrap();
        assert_eq!(c.preterm.mean_wm_ratio, 0.375);
        assert!((c.preterm.mean_wm_mm3 / c.preterm.mean_brain_mm3 - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.term.mean_wm_ratio, 0.5);
    }

    #[test]
    fn identical_groups_give_p_one() {
        let mut s = Vec::new();
        for (i, (wm, gm)) in [(10.0, 20.0), (12.0, 19.0), (11.0, 23.0)]
            .into_iter()
            .enumerate()
        {
            s.push(subject(
                &format!("p{i}"),
                Group::Preterm,
                wm,
                gm,
                5.0 + i as f64,
            ));
            s.push(subject(
                &format!("t{i}"),
                Group::Term,
                wm,
                gm,
                5.0 + i as f64,
            ));
        }
        let c = cohort_compare(&s).unwrap();
        for (_, t) in &c.tests {
            assert_eq!((t.t, t.p), (0.0, 1.0));
        }
    }

    #[test]
    fn constant_groups_are_handled() {
        let same = welch_t_test(&[2.0, 2.0], &[2.0, 2.0]);
        assert_eq!(same.p, 1.0);
        let apart = welch_t_test(&[1.0, 1.0], &[2.0, 2.0]);
        assert_eq!((apart.p, apart.t), (0.0, f64::NEG_INFINITY));
    }

    #[test]
    fn small_groups_and_undefined_ratios() {
        let s = [
            subject("a", Group::Preterm, 1.0, 1.0, 0.0),
            subject("b", Group::Term, 1.0, 1.0, 0.0),
            subject("c", Group::Term, 1.0, 2.0, 0.0),
        ];
        assert!(matches!(
            cohort_compare(&s),
            Err(Error::GroupTooSmall { n: 1, .. })
        ));
        let s = [
            subject("a", Group::Preterm, 1.0, 1.0, 0.0),
            subject("b", Group::Preterm, 1.0, 3.0, 0.0),
            subject("z", Group::Preterm, 0.0, 0.0, 9.0),
            subject("c", Group::Term, 1.0, 2.0, 0.0),
            subject("d", Group::Term, 1.0, 2.0, 0.0),
        ];
        let c = cohort_compare(&s).unwrap();
        assert_eq!(c.preterm.undefined_ratios, 1);
        assert_eq!(c.preterm.mean_wm_ratio, 0.375);
        assert_eq!(c.preterm.n, 3);
    }

    #[test]
    fn group_names_parse() {
        assert_eq!("Preterm".parse::<Group>().unwrap(), Group::Preterm);
        assert_eq!(" term ".parse::<Group>().unwrap(), Group::Term);
        assert!("adult".parse::<Group>().is_err());
    }
}
