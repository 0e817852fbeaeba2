//! End-to-end acceptance checks, one pass/fail line per criterion.
//!
//! `cargo test --test acceptance` runs all of them; `-- 3 5` runs a subset.
//! The process exits 0 unless `HDAN_ACCEPTANCE_STRICT=1` is set and a
//! criterion failed.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hdan::assessment::{
    cohort_compare, render_table, tissue_volumes, Group, SubjectVolumes, TissueVolumes,
};
use hdan::inference::{predict_volume, InferenceConfig};
use hdan::loss::{
    compute_class_weights, weighted_cross_entropy, weighted_cross_entropy_logits, ClassWeights,
};
use hdan::metrics::{dice, evaluate_subject, extract_boundary, mhd, BinaryMask};
use hdan::network::{Ablation, Mode, Network, NetworkConfig, ProbabilityMap};
use hdan::patching::{extract_labels, extract_volume, fuse, plan_patches, PatchSpec};
use hdan::training::{lr_at, train, Sample, TrainConfig};
use hdan::volume_io::{generate_phantom, normalize, LabelMap, MultiModalVolume, PhantomSpec};
use hdan_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn phantom_sample(seed: u64) -> Sample {
    let (v, labels) = generate_phantom(&PhantomSpec {
        seed,
        ..PhantomSpec::default()
    })
    .unwrap();
    Sample {
        volume: normalize(&v).unwrap(),
        labels,
    }
}

fn foreground_dice(pred: &LabelMap, truth: &LabelMap) -> Vec<(String, f64)> {
    evaluate_subject(pred, truth)
        .unwrap()
        .into_iter()
        .map(|m| (m.name, m.dice.unwrap_or(0.0)))
        .collect()
}

fn shape_and_normalization() -> Outcome {
    let net = Network::build(NetworkConfig::default(), 0).unwrap();
    let vol =
        MultiModalVolume::new(common::random_tensor(&[2, 64, 64, 64], 1), [1.0; 3], "x").unwrap();
    let t = Instant::now();
    let (p, _) = net.forward(&vol).unwrap();
    let elapsed = t.elapsed();
    let shape = p.probs.shape().to_vec();
    let err = p.normalization_error();
    check(
        shape == [4, 64, 64, 64] && err < 1e-5 && elapsed < Duration::from_secs(60),
        format!(
            "probabilities {shape:?}, max |sum - 1| {err:.1e}, forward {}",
            secs(elapsed)
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let net = Network::build(NetworkConfig::tiny(), 5).unwrap();
    let (v, l) = generate_phantom(&PhantomSpec {
        size: [32; 3],
        seed: 4,
        ..PhantomSpec::default()
    })
    .unwrap();
    let v = normalize(&v).unwrap();
    let origin = [8, 8, 8];
    let input = extract_volume(&v, origin, [16; 3])
        .unwrap()
        .reshape(&[1, 2, 16, 16, 16])
        .unwrap();
    let labels = extract_labels(&l, origin, [16; 3]).unwrap();
    let cw = compute_class_weights(&labels.histogram()).unwrap();
    let loss = |net: &Network| {
        let rec = net.record(input.clone(), Mode::Train, false).unwrap();
        weighted_cross_entropy_logits(rec.logits(), &labels.labels, &cw)
            .unwrap()
            .0
    };
    let rec = net.record(input.clone(), Mode::Train, true).unwrap();
    let (_, seed) = weighted_cross_entropy_logits(rec.logits(), &labels.labels, &cw).unwrap();
    let grads = rec.backward(seed).unwrap();
    drop(rec);
    let trainable: Vec<_> = net
        .params()
        .iter()
        .filter(|(_, p)| p.kind.is_trainable())
        .map(|(id, _)| id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-3;
    let mut probe = net.clone();
    let (mut worst, mut worst_name, mut failures) = (0.0f64, String::new(), 0);
    for _ in 0..20 {
        let id = trainable[rng.random_range(0..trainable.len())];
        let i = rng.random_range(0..net.params().tensor(id).len());
        let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
        let orig = probe.params().tensor(id).data()[i];
        probe.params_mut().tensor_mut(id).data_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.params_mut().tensor_mut(id).data_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.params_mut().tensor_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel >= 1e-3 {
            failures += 1;
        }
        if rel > worst {
            worst = rel;
            worst_name = format!("{}[{i}]", net.params().get(id).name);
        }
    }
    let elapsed = t.elapsed();
    check(
        failures == 0 && elapsed < Duration::from_secs(300),
        format!(
            "{failures}/20 above 1e-3, worst relative error {worst:.2e} at {worst_name}, {}",
            secs(elapsed)
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let dims = [8; 3];
    let spacing = [1.0, 0.9, 1.1];
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let a = common::random_mask(dims, rng.random_range(0.1..0.6), &mut rng);
        let g = common::random_mask(dims, rng.random_range(0.1..0.6), &mut rng);
        let (ma, mg) = (
            BinaryMask::new(a.clone(), dims, spacing).unwrap(),
            BinaryMask::new(g.clone(), dims, spacing).unwrap(),
        );
        if dice(&ma, &mg).unwrap() != common::dice_oracle(&a, &g) {
            return Err("dice differs from the set-counting oracle".into());
        }
        let got = mhd(
            &extract_boundary(&ma).unwrap(),
            &extract_boundary(&mg).unwrap(),
        )
        .unwrap();
        let want = common::mhd_oracle(
            &common::boundary_oracle(&a, dims, spacing),
            &common::boundary_oracle(&g, dims, spacing),
        );
        worst = worst.max((got - want).abs());
    }
    check(
        worst < 1e-9,
        format!("50 pairs, dice exact, max mhd error {worst:.1e}"),
    )
}

fn attention_invariants() -> Outcome {
    let net = Network::build(NetworkConfig::tiny(), 2).unwrap();
    let c = NetworkConfig::tiny().block_channels();
    let f = common::random_tensor(&[c, 4, 4, 4], 8).map(|v| v * 5.0);
    let ca = net.channel_attention(1, &f).unwrap();
    let perm = common::shuffled(64, 1);
    let mut permuted = f.clone();
    for ch in 0..c {
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[ch * 64 + dst] = f.data()[ch * 64 + src];
        }
    }
    let ca_invariant = net.channel_attention(1, &permuted).unwrap() == ca;

    let g = common::random_tensor(&[8, 6, 6, 6], 3).map(|v| v * 4.0);
    let sa = net.spatial_attention(0, &g).unwrap();
    let mut swapped = g.clone();
    for (dst, &src) in common::shuffled(8, 4).iter().enumerate() {
        swapped.data_mut()[dst * 216..(dst + 1) * 216]
            .copy_from_slice(&g.data()[src * 216..(src + 1) * 216]);
    }
    let sa_invariant = net.spatial_attention(0, &swapped).unwrap() == sa;
    let open = |t: &Tensor| t.data().iter().all(|&v| v > 0.0 && v < 1.0);
    let in_range = open(&ca) && open(&sa);

    let plain = Network::build(
        NetworkConfig::tiny()
            .ablate(Ablation::Ca)
            .ablate(Ablation::Sa),
        0,
    )
    .unwrap();
    let x = common::random_tensor(&[8, 4, 4, 4], 1);
    let identity = plain.attention_refine(0, &x).unwrap() == x;
    check(
        ca_invariant && sa_invariant && in_range && identity,
        format!("CA voxel-permutation {ca_invariant}, SA channel-permutation {sa_invariant}, (0,1) {in_range}, identity {identity}"),
    )
}

fn patch_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..100 {
        let dims = [0; 3].map(|_| rng.random_range(1..60));
        let patch = dims.map(|d| rng.random_range(1..=d.min(24)));
        let stride = patch.map(|p| rng.random_range(1..=p));
        let grid = plan_patches(dims, PatchSpec::new(patch, stride).unwrap()).unwrap();
        if grid.coverage().contains(&0) {
            return Err(format!(
                "uncovered voxel for dims {dims:?} patch {patch:?} stride {stride:?}"
            ));
        }
    }

    let dims = [40, 36, 44];
    let labels: Vec<u8> = (0..dims.iter().product::<usize>())
        .map(|_| rng.random_range(0..4))
        .collect();
    let lm = LabelMap::with_default_classes(labels, dims, [1.0; 3]).unwrap();
    let grid = plan_patches(dims, PatchSpec::cubic(16, 10).unwrap()).unwrap();
    let onehot: Vec<Tensor> = grid
        .origins
        .iter()
        .map(|&o| {
            let l = extract_labels(&lm, o, [16; 3]).unwrap();
            let n = l.labels.len();
            let mut data = vec![0.0; 4 * n];
            for (v, &c) in l.labels.iter().enumerate() {
                data[c as usize * n + v] = 1.0;
            }
            Tensor::from_vec(&[4, 16, 16, 16], data).unwrap()
        })
        .collect();
    let round_trip = fuse(&grid, &onehot, [1.0; 3]).unwrap().argmax() == lm.labels;

    let big = [96; 3];
    let grid = plan_patches(big, PatchSpec::cubic(64, 32).unwrap()).unwrap();
    let patches: Vec<Tensor> = (0..grid.len())
        .map(|_| common::random_distributions(4, [64; 3], &mut rng))
        .collect();
    let fused = fuse(&grid, &patches, [1.0; 3]).unwrap();
    let oracle = common::fuse_oracle(&grid, &patches);
    let err = fused
        .probs
        .data()
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        round_trip && err < 1e-9,
        format!("100 configs covered, one-hot round trip {round_trip}, fusion error {err:.1e}"),
    )
}

fn learnability() -> Outcome {
    let t = Instant::now();
    let sample = phantom_sample(1);
    let cfg = TrainConfig {
        lr_drop_interval: 1000,
        max_epochs: 125,
        patches_per_volume_per_epoch: 8,
        patch: PatchSpec::cubic(32, 16).unwrap(),
        seed: 7,
        ..TrainConfig::default()
    };
    let net = Network::build(NetworkConfig::tiny(), 3).unwrap();
    let data = vec![sample];
    let ck = train(net, &data, cfg.clone(), None).unwrap();
    let steps = ck.optimizer.steps();
    let infer = InferenceConfig {
        patch: cfg.patch,
        ..InferenceConfig::default()
    };
    let pred = predict_volume(&ck.network, &data[0].volume, &infer).unwrap();
    let scores = foreground_dice(&pred.labels, &data[0].labels);
    let elapsed = t.elapsed();
    let text: Vec<String> = scores.iter().map(|(n, d)| format!("{n} {d:.4}")).collect();
    check(
        steps <= 500
            && scores.iter().all(|(_, d)| *d >= 0.90)
            && elapsed < Duration::from_secs(1800),
        format!(
            "{steps} steps, training Dice {}, {}",
            text.join(" "),
            secs(elapsed)
        ),
    )
}

fn generalization_and_ablation() -> Outcome {
    let t = Instant::now();
    let train_set: Vec<Sample> = (11..15).map(phantom_sample).collect();
    let test_set: Vec<Sample> = (21..23).map(phantom_sample).collect();
    let cfg = TrainConfig {
        lr_drop_interval: 1000,
        max_epochs: 125,
        patches_per_volume_per_epoch: 2,
        patch: PatchSpec::cubic(32, 16).unwrap(),
        seed: 7,
        ..TrainConfig::default()
    };
    let infer = InferenceConfig {
        patch: cfg.patch,
        ..InferenceConfig::default()
    };
    let mean_dice = |net_cfg: NetworkConfig| -> Vec<(String, f64)> {
        let ck = train(
            Network::build(net_cfg, 3).unwrap(),
            &train_set,
            cfg.clone(),
            None,
        )
        .unwrap();
        let mut per_class: Vec<(String, f64)> = Vec::new();
        for s in &test_set {
            let pred = predict_volume(&ck.network, &s.volume, &infer).unwrap();
            for (i, (name, d)) in foreground_dice(&pred.labels, &s.labels)
                .into_iter()
                .enumerate()
            {
                match per_class.get_mut(i) {
                    Some(slot) => slot.1 += d / test_set.len() as f64,
                    None => per_class.push((name, d / test_set.len() as f64)),
                }
            }
        }
        per_class
    };
    let full = mean_dice(NetworkConfig::tiny());
    let base = mean_dice(
        NetworkConfig::tiny()
            .ablate(Ablation::Ca)
            .ablate(Ablation::Sa),
    );
    let overall = |v: &[(String, f64)]| v.iter().map(|(_, d)| d).sum::<f64>() / v.len() as f64;
    let (f, b) = (overall(&full), overall(&base));
    let text = |v: &[(String, f64)]| {
        v.iter()
            .map(|(n, d)| format!("{n} {d:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    check(
        full.iter().all(|(_, d)| *d >= 0.80) && f >= b,
        format!(
            "held-out Dice full [{}] mean {f:.4}, no-attention [{}] mean {b:.4}, {}",
            text(&full),
            text(&base),
            secs(t.elapsed())
        ),
    )
}

fn loss_analytics() -> Outcome {
    let unit = ClassWeights {
        w: vec![1.0; 4],
        source_histogram: vec![1; 4],
    };
    let labels: Vec<u8> = (0..27).map(|i| (i % 4) as u8).collect();
    let y = LabelMap::with_default_classes(labels, [3; 3], [1.0; 3]).unwrap();
    let p = ProbabilityMap::new(Tensor::full(&[4, 3, 3, 3], 0.25), [1.0; 3]).unwrap();
    let uniform = (weighted_cross_entropy(&p, &y, &unit).unwrap() - 4f64.ln()).abs();

    let logits = common::random_tensor(&[1, 4, 2, 2, 2], 3);
    let target = vec![2u8; 8];
    let (_, base) = weighted_cross_entropy_logits(&logits, &target, &unit).unwrap();
    let mut worst = 0.0f64;
    for w in [0.5, 2.0, 4.0, 7.5] {
        let cw = ClassWeights {
            w: vec![1.0, 1.0, w, 1.0],
            ..unit.clone()
        };
        let (_, g) = weighted_cross_entropy_logits(&logits, &target, &cw).unwrap();
        for (a, b) in g.data().iter().zip(base.data()) {
            worst = worst.max((a - w * b).abs());
        }
    }
    check(
        uniform < 1e-6 && worst < 1e-6,
        format!("|loss - ln 4| {uniform:.1e}, gradient linearity error {worst:.1e}"),
    )
}

fn assessment_fidelity() -> Outcome {
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
    let table = render_table(&cohort_compare(&subjects).unwrap());
    let rows: Vec<&str> = table.lines().collect();
    let has = |row: usize, cells: &[&str]| {
        cells
            .iter()
            .all(|c| rows[row].split_whitespace().any(|x| x == *c))
    };
    let preterm = has(
        1,
        &["18", "649,152", "695,123", "474,353", "1,344,275", "48.15%"],
    );
    let term = has(
        2,
        &["27", "672,657", "742,677", "425,307", "1,415,334", "47.42%"],
    );

    let hand = |id: &str, group, wm, gm| SubjectVolumes {
        subject_id: id.into(),
        group,
        volumes: TissueVolumes::from_mm3(wm, gm, 0.0),
    };
    let s = cohort_compare(&[
        hand("a", Group::Preterm, 1.0, 1.0),
        hand("b", Group::Preterm, 3.0, 1.0),
        hand("c", Group::Term, 1.0, 1.0),
        hand("d", Group::Term, 1.0, 1.0),
    ])
    .unwrap();
    let ratio_of_means = s.preterm.mean_wm_mm3 / s.preterm.mean_brain_mm3;
    let mean_of_ratios =
        s.preterm.mean_wm_ratio == 0.625 && (ratio_of_means - 2.0 / 3.0).abs() < 1e-15;
    check(
        preterm && term && mean_of_ratios,
        format!("preterm row {preterm}, term row {term}, mean of ratios 0.625 vs ratio of means {ratio_of_means:.4}"),
    )
}

fn lr_schedule() -> Outcome {
    let cfg = TrainConfig {
        initial_lr: 1e-3,
        lr_drop_interval: 50,
        ..TrainConfig::default()
    };
    let expected = [
        (0, 1e-3),
        (49, 1e-3),
        (50, 1e-4),
        (99, 1e-4),
        (100, 1e-5),
        (149, 1e-5),
        (150, 1e-6),
    ];
    let wrong: Vec<String> = expected
        .iter()
        .filter(|&&(e, lr)| lr_at(&cfg, e) != lr)
        .map(|&(e, lr)| format!("epoch {e}: {} vs {lr}", lr_at(&cfg, e)))
        .collect();
    check(
        wrong.is_empty(),
        format!(
            "{} boundary epochs exact {}",
            expected.len(),
            wrong.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let run = || {
        let (v, l) = generate_phantom(&PhantomSpec {
            size: [32; 3],
            seed: 9,
            ..PhantomSpec::default()
        })
        .unwrap();
        let data = vec![Sample {
            volume: normalize(&v).unwrap(),
            labels: l,
        }];
        let built = Network::build(NetworkConfig::tiny(), 4).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            patches_per_volume_per_epoch: 2,
            patch: PatchSpec::cubic(16, 16).unwrap(),
            seed: 5,
            ..TrainConfig::default()
        };
        let ck = train(built.clone(), &data, cfg, None).unwrap();
        let infer = InferenceConfig {
            patch: PatchSpec::cubic(16, 8).unwrap(),
            ..InferenceConfig::default()
        };
        let pred = predict_volume(&ck.network, &data[0].volume, &infer).unwrap();
        let history: Vec<_> = ck
            .history
            .iter()
            .map(|r| (r.epoch, r.lr, r.mean_loss, r.steps))
            .collect();
        (v, data[0].labels.clone(), built, ck.network, history, pred)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(2)
        .build()
        .unwrap();
    let a = pool.install(run);
    let b = pool.install(run);
    let parts = [
        ("phantom", a.0 == b.0 && a.1 == b.1),
        ("build", a.2.params() == b.2.params()),
        ("training", a.3.params() == b.3.params() && a.4 == b.4),
        ("inference", a.5 == b.5),
    ];
    let differing: Vec<&str> = parts.iter().filter(|p| !p.1).map(|p| p.0).collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            "phantom, build, training and inference identical across two runs".into()
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("shape and normalization", shape_and_normalization),
        ("gradient correctness", gradient_correctness),
        ("metric oracle equivalence", metric_oracles),
        ("attention invariants", attention_invariants),
        ("patch pipeline", patch_pipeline),
        ("learnability", learnability),
        (
            "generalization and ablation ordering",
            generalization_and_ablation,
        ),
        ("loss analytics", loss_analytics),
        ("assessment fidelity", assessment_fidelity),
        ("learning-rate schedule", lr_schedule),
        ("determinism", determinism),
    ];
    let selected: BTreeSet<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let (status, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {status} {name}: {detail}");
    }
    let strict = std::env::var("HDAN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
