//! Synthetic isointense phantoms: nested ellipsoidal shells (WM core, GM
//! shell, CSF shell) in a zero background, with tunable WM/GM contrast.

use std::f64::consts::TAU;

use hdan_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMap, MultiModalVolume};
use crate::error::{Error, Result};

/// Span of the tissue mean intensities, `[0.1, 0.9]`.
pub const PHANTOM_DYNAMIC_RANGE: f64 = 0.8;

const MID: f64 = 0.5;
const T1_CSF: f64 = 0.15;
const T2_CSF: f64 = 0.9;
/// Noisy foreground voxels are clamped here so the nonzero mask stays exact.
const FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    /// WM/GM mean separation as a fraction of the dynamic range.
    pub contrast_delta: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [64; 3],
            contrast_delta: 0.1,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s % 16 != 0) {
            return Err(Error::InvalidConfig(format!(
                "phantom size {:?} must be divisible by 16",
                self.size
            )));
        }
        if self.size.iter().any(|&s| s < 32) {
            return Err(Error::GeometryUnderflow { size: self.size });
        }
        if !(0.0..=1.0).contains(&self.contrast_delta) {
            return Err(Error::InvalidConfig(format!(
                "contrast_delta {} outside [0, 1]",
                self.contrast_delta
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Noise-free `(T1, T2)` means for BG, CSF, GM, WM.
    pub fn tissue_means(&self) -> [(f64, f64); 4] {
        let half = 0.5 * self.contrast_delta * PHANTOM_DYNAMIC_RANGE;
        [
            (0.0, 0.0),
            (T1_CSF, T2_CSF),
            (MID - half, MID + half),
            (MID + half, MID - half),
        ]
    }
}

struct Geometry {
    center: [f64; 3],
    axes: [f64; 3],
    wm: f64,
    gm: f64,
    ripple: f64,
    freq: [f64; 3],
    phase: [f64; 3],
}

impl Geometry {
    fn sample(size: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let base = [0.44, 0.40, 0.36];
        let mut center = [0.0; 3];
        let mut axes = [0.0; 3];
        for i in 0..3 {
            let s = size[i] as f64;
            center[i] = s * (0.5 + rng.random_range(-0.03..0.03)) - 0.5;
            axes[i] = s * base[i] * rng.random_range(0.92..1.0);
        }
        Self {
            center,
            axes,
            wm: rng.random_range(0.52..0.58),
            gm: rng.random_range(0.78..0.82),
            ripple: rng.random_range(0.04..0.07),
            freq: [0; 3].map(|_| rng.random_range(2.0..4.0)),
            phase: [0; 3].map(|_| rng.random_range(0.0..TAU)),
        }
    }

    fn class_at(&self, p: [f64; 3]) -> u8 {
        let u: [f64; 3] = [0, 1, 2].map(|i| (p[i] - self.center[i]) / self.axes[i]);
        let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if rho >= 1.0 {
            return 0;
        }
        // folded WM/GM interface
        let fold = (0..3)
            .map(|i| (self.freq[i] * TAU * u[i] + self.phase[i]).sin())
            .product::<f64>();
        let wm = self.wm * (1.0 + self.ripple * fold);
        if rho < wm {
            3
        } else if rho < self.gm {
            2
        } else {
            1
        }
    }
}

/// Deterministic phantom for `spec`; values are exactly representable in
/// `f32` so they survive the internal format unchanged.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(MultiModalVolume, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = Geometry::sample(spec.size, &mut rng);
    let [d, h, w] = spec.size;
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                labels.push(geometry.class_at([z as f64, y as f64, x as f64]));
            }
        }
    }
    let means = spec.tissue_means();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let per = d * h * w;
    let mut data = vec![0.0; 2 * per];
    for (modality, plane) in data.chunks_mut(per).enumerate() {
        for (v, &l) in plane.iter_mut().zip(&labels) {
            if l == 0 {
                continue;
            }
            let (t1, t2) = means[l as usize];
            let mean = if modality == 0 { t1 } else { t2 };
            let jitter = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            *v = ((mean + jitter).max(FLOOR) as f32) as f64;
        }
    }
    let counts = labels.iter().fold([0usize; 4], |mut acc, &l| {
        acc[l as usize] += 1;
        acc
    });
    if counts.iter().any(|&c| (c as f64) < 0.01 * per as f64) {
        return Err(Error::GeometryUnderflow { size: spec.size });
    }
    let id = format!("phantom_s{}", spec.seed);
    let vol = MultiModalVolume::new(Tensor::from_vec(&[2, d, h, w], data)?, [1.0; 3], id)?;
    let lm = LabelMap::with_default_classes(labels, spec.size, [1.0; 3])?;
    Ok((vol, lm))
}
