//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hdan::network::NetworkConfig;
use hdan::patching::PatchGrid;
use hdan::volume_io::LabelMap;
use hdan_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_mask(dims: [usize; 3], density: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..dims.iter().product())
        .map(|_| rng.random_bool(density))
        .collect()
}

/// Random per-voxel distributions over `classes`, shaped `[C, d, h, w]`.
pub fn random_distributions(classes: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let mut data = vec![0.0; classes * n];
    for v in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (c, r) in raw.iter().enumerate() {
            data[c * n + v] = r / total;
        }
    }
    Tensor::from_vec(&[classes, dims[0], dims[1], dims[2]], data).unwrap()
}

/// Voxel coordinates of a mask as a set.
fn voxel_set(mask: &[bool]) -> BTreeSet<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect()
}

/// Dice from set intersection and cardinalities.
pub fn dice_oracle(a: &[bool], g: &[bool]) -> f64 {
    let (sa, sg) = (voxel_set(a), voxel_set(g));
    let both = sa.intersection(&sg).count();
    2.0 * both as f64 / (sa.len() + sg.len()) as f64
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the volume, as millimetre coordinates.
pub fn boundary_oracle(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let inside = |p: [i64; 3]| {
        (0..3).all(|i| p[i] >= 0 && p[i] < dims[i] as i64)
            && mask[((p[0] as usize) * dims[1] + p[1] as usize) * dims[2] + p[2] as usize]
    };
    let offsets: [[i64; 3]; 6] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    let mut out = Vec::new();
    for z in 0..dims[0] as i64 {
        for y in 0..dims[1] as i64 {
            for x in 0..dims[2] as i64 {
                let p = [z, y, x];
                if inside(p)
                    && offsets
                        .iter()
                        .any(|o| !inside([p[0] + o[0], p[1] + o[1], p[2] + o[2]]))
                {
                    out.push([
                        z as f64 * spacing[0],
                        y as f64 * spacing[1],
                        x as f64 * spacing[2],
                    ]);
                }
            }
        }
    }
    out
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| distance(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}

/// Modified Hausdorff distance by exhaustive pairwise search.
pub fn mhd_oracle(a: &[[f64; 3]], g: &[[f64; 3]]) -> f64 {
    directed(a, g).max(directed(g, a))
}

/// Sum every covering patch's values, then divide by the cover count.
pub fn fuse_oracle(grid: &PatchGrid, patches: &[Tensor]) -> Vec<f64> {
    let [d, h, w] = grid.volume_dims;
    let [pd, ph, pw] = grid.spec.patch_size;
    let c = patches[0].shape()[0];
    let mut sum = vec![0.0; c * d * h * w];
    let mut count = vec![0usize; d * h * w];
    for (o, t) in grid.origins.iter().zip(patches) {
        for z in 0..pd {
            for y in 0..ph {
                for x in 0..pw {
                    let v = ((o[0] + z) * h + o[1] + y) * w + o[2] + x;
                    count[v] += 1;
                    for ch in 0..c {
                        sum[ch * d * h * w + v] += t.data()[((ch * pd + z) * ph + y) * pw + x];
                    }
                }
            }
        }
    }
    sum.iter()
        .enumerate()
        .map(|(i, s)| s / count[i % (d * h * w)] as f64)
        .collect()
}

/// Whether some origin's box contains voxel `v`, by direct search.
pub fn covered(grid: &PatchGrid, v: [usize; 3]) -> bool {
    grid.origins
        .iter()
        .any(|o| (0..3).all(|i| o[i] <= v[i] && v[i] < o[i] + grid.spec.patch_size[i]))
}

/// Trainable scalars from channel arithmetic alone.
pub fn expected_parameter_count(c: &NetworkConfig) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k * k + co;
    let norm = |ch: usize| 2 * ch;
    let (m, e, t, g, u) = (
        c.in_modalities,
        c.extractor_channels,
        c.transition_channels,
        c.growth_rate,
        c.upsample_channels,
    );
    let attention = |ch: usize| {
        let hidden = ch / c.ca_reduction;
        (ch * hidden + hidden) + (hidden * ch + ch) + conv(2, 1, c.sa_kernel)
    };
    let transition = |ch: usize| conv(ch, t, 1) + norm(t) + conv(t, t, 2) + norm(t);
    let block_out = t + c.units_per_block * g;
    let mut total = conv(m, e, 3) + norm(e) + conv(e, e, 3) + norm(e) + conv(m, e, 1) + norm(e);
    total += attention(e) + transition(e);
    let mut branches = 0;
    for k in 1..=4u32 {
        for i in 0..c.units_per_block {
            total += conv(t + i * g, 4 * g, 1) + norm(4 * g) + conv(4 * g, g, 3) + norm(g);
        }
        total += attention(block_out) + transition(block_out);
        if c.enable_dense_up || k == 4 {
            let side = 2usize.pow(k);
            total += block_out * u * side.pow(3) + u + norm(u);
            branches += 1;
        }
    }
    total + conv(e + branches * u, c.num_classes, 1)
}

pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Integer per-subject voxel counts, unit voxels, averaging exactly to
/// `means` with mean WM ratio `ratio`. Brain size and WM ratio covary so the
/// two averaging rules disagree.
pub fn synthetic_group(n: usize, means: [u64; 3], ratio: f64) -> Vec<[u64; 3]> {
    let [wm, gm, csf] = means;
    let brain = (wm + gm) as f64;
    let signs: Vec<f64> = (0..n)
        .map(|i| {
            if i == n - 1 && n % 2 == 1 {
                0.0
            } else if i % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let spread = 60_000.0;
    let k = signs.iter().map(|s| s * s).sum::<f64>() / n as f64;
    let slope = (wm as f64 - ratio * brain) / (spread * k);
    let mut out: Vec<[u64; 3]> = signs
        .iter()
        .map(|&e| {
            let b = brain + spread * e;
            let w = ((ratio + slope * e) * b).round();
            [w as u64, (b - w) as u64, (csf as f64 + 20_000.0 * e) as u64]
        })
        .collect();
    for (c, target) in means.iter().enumerate() {
        let total: u64 = out.iter().map(|s| s[c]).sum();
        let last = &mut out[n - 1][c];
        *last = (*last as i64 + (target * n as u64) as i64 - total as i64) as u64;
    }
    out
}

pub fn label_map(counts: [u64; 3]) -> LabelMap {
    let dims = [130, 130, 130];
    let mut labels = vec![0u8; dims.iter().product()];
    let mut at = 0;
    for (class, &n) in [3u8, 2, 1].iter().zip(&counts) {
        labels[at..at + n as usize].fill(*class);
        at += n as usize;
    }
    LabelMap::with_default_classes(labels, dims, [1.0; 3]).unwrap()
}
