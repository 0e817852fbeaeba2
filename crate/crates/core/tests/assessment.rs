mod common;

use hdan::assessment::{
    assess_manifest, cohort_compare, read_cohort_manifest, render_table, tissue_volumes,
    welch_t_test, Group, Measure, SubjectVolumes, TissueVolumes,
};
use hdan::volume_io::{
    load_labels, save_labelmap, LabelMap, LabelMapping, LabelOptions, VolumeFormat,
};
use hdan::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sided Student-t tail by Simpson's rule after `x = sqrt(df) tan(theta)`,
/// which maps the density to `cos(theta)^(df - 1)` on a finite interval.
fn t_two_sided_oracle(t: f64, df: f64) -> f64 {
    let f = |theta: f64| theta.cos().powf(df - 1.0);
    let simpson = |a: f64, b: f64| {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n)
            .map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
            .sum();
        (f(a) + f(b) + inner) * h / 3.0
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let edge = (t.abs() / df.sqrt()).atan();
    2.0 * simpson(edge, half_pi) / simpson(-half_pi, half_pi)
}

fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v / n, n)
    };
    let ((ma, qa, na), (mb, qb, nb)) = (stats(a), stats(b));
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    (t, df)
}

#[test]
fn welch_matches_integrated_t_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..12 {
        let (na, nb) = (rng.random_range(3..12), rng.random_range(3..12));
        let shift = rng.random_range(-1.5..1.5);
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(0.0..2.0)).collect();
        let b: Vec<f64> = (0..nb)
            .map(|_| rng.random_range(0.0..3.0) + shift)
            .collect();
        let got = welch_t_test(&a, &b);
        let (t, df) = welch_oracle(&a, &b);
        assert!((got.t - t).abs() < 1e-12 * t.abs().max(1.0));
        assert!((got.df - df).abs() < 1e-9 * df);
        let p = t_two_sided_oracle(t, df);
        assert!((got.p - p).abs() < 1e-8, "t {t} df {df}: {} vs {p}", got.p);
    }
}

#[test]
fn well_separated_groups_are_significant() {
    let spread = |m: f64| {
        (0..10)
            .map(|i| m + 0.1 * if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect::<Vec<_>>()
    };
    let r = welch_t_test(&spread(10.0), &spread(20.0));
    assert!(r.p < 1e-6, "p = {}", r.p);
    assert!(r.t < 0.0);
    let same = welch_t_test(&spread(5.0), &spread(5.0));
    assert!((same.p - 1.0).abs() < 1e-12);
}

fn subject(id: String, group: Group, wm: f64, gm: f64, csf: f64) -> SubjectVolumes {
    SubjectVolumes {
        subject_id: id,
        group,
        volumes: TissueVolumes::from_mm3(wm, gm, csf),
    }
}

#[test]
fn mean_of_ratios_differs_from_ratio_of_means() {
    let subjects = vec![
        subject("a".into(), Group::Preterm, 1.0, 1.0, 0.0),
        subject("b".into(), Group::Preterm, 3.0, 1.0, 0.0),
        subject("c".into(), Group::Term, 2.0, 2.0, 1.0),
        subject("d".into(), Group::Term, 1.0, 3.0, 1.0),
    ];
    let s = cohort_compare(&subjects).unwrap();
    // (1/2 + 3/4) / 2 against 4 / 6
    assert_eq!(s.preterm.mean_wm_ratio, 0.625);
    assert!((s.preterm.mean_wm_mm3 / s.preterm.mean_brain_mm3 - 2.0 / 3.0).abs() < 1e-15);
    // (2/4 + 1/4) / 2 against 3 / 8
    assert_eq!(s.term.mean_wm_ratio, 0.375);
    assert_eq!(s.term.mean_wm_mm3 / s.term.mean_brain_mm3, 0.375);
}

#[test]
fn rendered_table_reproduces_published_group_means() {
    let groups = [
        (Group::Preterm, 18, [649_152, 695_123, 474_353], 0.4815),
        (Group::Term, 27, [672_657, 742_677, 425_307], 0.4742),
    ];
    let mut subjects = Vec::new();
    for (group, n, means, ratio) in groups {
        for (i, counts) in common::synthetic_group(n, means, ratio)
            .into_iter()
            .enumerate()
        {
            subjects.push(SubjectVolumes {
                subject_id: format!("{}{i}", group.as_str()),
                group,
                volumes: tissue_volumes(&common::label_map(counts)).unwrap(),
            });
        }
    }
    let summary = cohort_compare(&subjects).unwrap();
    let table = render_table(&summary);
    let rows: Vec<&str> = table.lines().collect();
    for cell in ["18", "649,152", "695,123", "474,353", "1,344,275", "48.15%"] {
        assert!(
            rows[1].split_whitespace().any(|c| c == cell),
            "{cell} missing from {}",
            rows[1]
        );
    }
    for cell in ["27", "672,657", "742,677", "425,307", "1,415,334", "47.42%"] {
        assert!(
            rows[2].split_whitespace().any(|c| c == cell),
            "{cell} missing from {}",
            rows[2]
        );
    }
    // ratio of the published means would have printed differently
    assert_ne!(format!("{:.2}", 100.0 * 649_152.0 / 1_344_275.0), "48.15");
}

#[test]
fn swapping_groups_negates_t_and_keeps_p() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let subjects: Vec<SubjectVolumes> = (0..9)
        .map(|i| {
            let g = if i < 4 { Group::Preterm } else { Group::Term };
            subject(
                format!("s{i}"),
                g,
                rng.random_range(1e5..2e5),
                rng.random_range(1e5..2e5),
                rng.random_range(1e4..5e4),
            )
        })
        .collect();
    let swapped: Vec<SubjectVolumes> = subjects
        .iter()
        .cloned()
        .map(|mut s| {
            s.group = if s.group == Group::Term {
                Group::Preterm
            } else {
                Group::Term
            };
            s
        })
        .collect();
    let (a, b) = (
        cohort_compare(&subjects).unwrap(),
        cohort_compare(&swapped).unwrap(),
    );
    for m in Measure::ALL {
        assert_eq!(a.test(m).t, -b.test(m).t, "{m:?}");
        assert_eq!(a.test(m).p, b.test(m).p, "{m:?}");
    }
    assert_eq!(a.preterm.mean_gm_mm3, b.term.mean_gm_mm3);
}

#[test]
fn small_or_degenerate_groups_are_rejected() {
    let one = vec![
        subject("a".into(), Group::Preterm, 1.0, 1.0, 1.0),
        subject("b".into(), Group::Term, 1.0, 1.0, 1.0),
        subject("c".into(), Group::Term, 2.0, 1.0, 1.0),
    ];
    assert!(matches!(
        cohort_compare(&one),
        Err(Error::GroupTooSmall { n: 1, .. })
    ));
    let empty_brains = vec![
        subject("a".into(), Group::Preterm, 0.0, 0.0, 1.0),
        subject("b".into(), Group::Preterm, 1.0, 1.0, 1.0),
        subject("c".into(), Group::Term, 1.0, 1.0, 1.0),
        subject("d".into(), Group::Term, 2.0, 1.0, 1.0),
    ];
    assert!(matches!(
        cohort_compare(&empty_brains),
        Err(Error::GroupTooSmall { .. })
    ));
}

#[test]
fn manifest_drives_assessment_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("subject_id,group,path\n");
    for (i, (g, wm)) in [("preterm", 5u8), ("preterm", 6), ("term", 9), ("term", 10)]
        .into_iter()
        .enumerate()
    {
        let labels: Vec<u8> = (0..64u8)
            .map(|v| {
                if v < wm {
                    3
                } else if v < 20 {
                    2
                } else if v < 30 {
                    1
                } else {
                    0
                }
            })
            .collect();
        let lm = LabelMap::with_default_classes(labels, [4, 4, 4], [1.0, 1.0, 2.0]).unwrap();
        let name = format!("s{i}.nii");
        save_labelmap(
            &lm,
            &dir.path().join(&name),
            VolumeFormat::Nifti,
            Some(&LabelMapping::iseg()),
        )
        .unwrap();
        rows.push_str(&format!("s{i},{g},{name}\n"));
    }
    let manifest = dir.path().join("cohort.csv");
    std::fs::write(&manifest, rows).unwrap();
    let entries = read_cohort_manifest(&manifest).unwrap();
    let subjects = assess_manifest(&entries, dir.path(), |p| {
        load_labels(p, &LabelOptions::default())
    })
    .unwrap();
    assert_eq!(subjects[2].volumes.wm_mm3, 18.0);
    assert_eq!(subjects[2].volumes.brain_mm3, 40.0);
    let summary = cohort_compare(&subjects).unwrap();
    assert_eq!(summary.term.mean_wm_mm3, 19.0);
    let missing = assess_manifest(&entries, &dir.path().join("nowhere"), |p| {
        load_labels(p, &LabelOptions::default())
    });
    assert!(missing.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volumes_add_up_and_ratio_ignores_uniform_spacing(seed in 0u64..10_000, s in 0.3f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [0; 3].map(|_| rng.random_range(1..7));
        let spacing = [0; 3].map(|_| rng.random_range(0.5..1.5));
        let labels: Vec<u8> = (0..dims.iter().product()).map(|_| rng.random_range(0..4)).collect();
        let lm = LabelMap::with_default_classes(labels.clone(), dims, spacing).unwrap();
        let v = tissue_volumes(&lm).unwrap();
        let voxel = spacing.iter().product::<f64>();
        let background = lm.histogram()[0] as f64 * voxel;
        let extent = dims.iter().product::<usize>() as f64 * voxel;
        prop_assert!((v.wm_mm3 + v.gm_mm3 + v.csf_mm3 + background - extent).abs() <= 1e-9 * extent);
        prop_assert_eq!(v.brain_mm3, v.wm_mm3 + v.gm_mm3);

        let rescaled = LabelMap::with_default_classes(labels, dims, spacing.map(|x| x * s)).unwrap();
        let r = tissue_volumes(&rescaled).unwrap();
        match (v.wm_ratio, r.wm_ratio) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-14),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}
