//! The segmentation network: a residual feature extractor, four
//! attention-guided dense stages with parallel transition and upsampling
//! branches, and a pointwise head over the fused full-resolution features.
//!
//! Resolutions: the initial transition halves the input, and stage `k`
//! works at `1/2^k`. Stage `k`'s upsampling branch is a transposed
//! convolution with kernel and stride `2^k` back to full resolution, so
//! inputs must be divisible by 16.

mod checkpoint;
mod layers;
mod params;

use hdan_tensor::{BatchStats, ConvGeometry, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_container, write_container, Container};
pub use layers::Mode;
pub use params::{Param, ParamId, ParamKind, ParamStore};

use crate::error::{Error, Result};
use crate::volume_io::{MultiModalVolume, Spacing};
use layers::{
    Attended, Attention, Builder, Conv, DenseBlock, DenseUnit, FeatureExtractor, Norm, Recorder,
    Transition, Upsample,
};

/// Number of attention-guided dense stages.
pub const STAGES: usize = 4;

/// Spatial dims must be multiples of this.
pub const INPUT_MULTIPLE: usize = 1 << STAGES;

/// Momentum of the running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_modalities: usize,
    pub num_classes: usize,
    pub extractor_channels: usize,
    pub growth_rate: usize,
    pub units_per_block: usize,
    pub transition_channels: usize,
    pub upsample_channels: usize,
    pub ca_reduction: usize,
    pub sa_kernel: usize,
    pub enable_dense_up: bool,
    pub enable_ca: bool,
    pub enable_sa: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_modalities: 2,
            num_classes: 4,
            extractor_channels: 32,
            growth_rate: 16,
            units_per_block: 4,
            transition_channels: 64,
            upsample_channels: 16,
            ca_reduction: 8,
            sa_kernel: 7,
            enable_dense_up: true,
            enable_ca: true,
            enable_sa: true,
        }
    }
}

/// A component that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    DenseUp,
    Ca,
    Sa,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense_up" => Ok(Self::DenseUp),
            "ca" => Ok(Self::Ca),
            "sa" => Ok(Self::Sa),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation {other:?} (expected dense_up, ca or sa)"
            ))),
        }
    }
}

impl NetworkConfig {
    /// A narrow configuration for fast experiments.
    pub fn tiny() -> Self {
        Self {
            extractor_channels: 8,
            growth_rate: 4,
            transition_channels: 16,
            upsample_channels: 8,
            ca_reduction: 4,
            ..Self::default()
        }
    }

    pub fn ablate(mut self, component: Ablation) -> Self {
        match component {
            Ablation::DenseUp => self.enable_dense_up = false,
            Ablation::Ca => self.enable_ca = false,
            Ablation::Sa => self.enable_sa = false,
        }
        self
    }

    /// Channels leaving each dense block.
    pub fn block_channels(&self) -> usize {
        self.transition_channels + self.units_per_block * self.growth_rate
    }

    /// Channels entering the head.
    pub fn fused_channels(&self) -> usize {
        let branches = if self.enable_dense_up { STAGES } else { 1 };
        self.extractor_channels + branches * self.upsample_channels
    }

    /// Stages whose upsampling branch is built and fused.
    pub fn upsampled_stages(&self) -> impl Iterator<Item = usize> {
        let first = if self.enable_dense_up { 1 } else { STAGES };
        first..=STAGES
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_modalities", self.in_modalities),
            ("extractor_channels", self.extractor_channels),
            ("growth_rate", self.growth_rate),
            ("units_per_block", self.units_per_block),
            ("transition_channels", self.transition_channels),
            ("upsample_channels", self.upsample_channels),
            ("ca_reduction", self.ca_reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.sa_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "sa_kernel must be odd, got {}",
                self.sa_kernel
            )));
        }
        for channels in [self.extractor_channels, self.block_channels()] {
            if channels % self.ca_reduction != 0 {
                return Err(Error::ReductionMismatch {
                    channels,
                    reduction: self.ca_reduction,
                });
            }
        }
        Ok(())
    }
}

/// Per-voxel class probabilities `[C, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub probs: Tensor,
    pub spacing: Spacing,
}

impl ProbabilityMap {
    pub fn new(probs: Tensor, spacing: Spacing) -> Result<Self> {
        if probs.rank() != 4 || probs.shape()[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "probability map must be [C, D, H, W], got {:?}",
                probs.shape()
            )));
        }
        Ok(Self { probs, spacing })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }

    fn voxels(&self) -> usize {
        self.dims().iter().product()
    }

    /// Largest deviation of a voxel's class sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let (c, n) = (self.num_classes(), self.voxels());
        let p = self.probs.data();
        (0..n)
            .map(|v| ((0..c).map(|k| p[k * n + v]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Most probable class per voxel; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<u8> {
        let (c, n) = (self.num_classes(), self.voxels());
        let p = self.probs.data();
        (0..n)
            .map(|v| {
                let mut best = 0;
                for k in 1..c {
                    if p[k * n + v] > p[best * n + v] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Softmax over axis 1 of `[N, C, ...]`.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let s = logits.len() / (n * c).max(1);
    let mut out = logits.clone();
    let data = out.data_mut();
    for b in 0..n {
        let sample = &mut data[b * c * s..(b + 1) * c * s];
        for v in 0..s {
            let max = (0..c)
                .map(|k| sample[k * s + v])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..c {
                let e = (sample[k * s + v] - max).exp();
                sample[k * s + v] = e;
                total += e;
            }
            for k in 0..c {
                sample[k * s + v] /= total;
            }
        }
    }
    out
}

/// Intermediate tensors of one forward pass (batch axis removed).
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub phi0: Tensor,
    /// `T_0 ..`; the last transition is present only when the deepest
    /// features have even dims.
    pub t: Vec<Tensor>,
    pub x_hat: Vec<Tensor>,
    /// `U_1 .. U_4`, `None` for branches that are not built.
    pub u: Vec<Option<Tensor>>,
    pub r: Tensor,
    /// Channel weights per attention site (`A_0` first), `None` when disabled.
    pub channel_maps: Vec<Option<Tensor>>,
    /// `[1, D', H', W']` voxel weights per attention site.
    pub spatial_maps: Vec<Option<Tensor>>,
}

#[derive(Clone, Debug)]
struct Stage {
    block: DenseBlock,
    attention: Attention,
    transition: Transition,
    upsample: Option<Upsample>,
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    store: ParamStore,
    extractor: FeatureExtractor,
    attention0: Attention,
    transition0: Transition,
    stages: Vec<Stage>,
    head: Conv,
}

struct TraceVars {
    phi0: Var,
    t: Vec<Var>,
    x_hat: Vec<Var>,
    u: Vec<Option<Var>>,
    r: Var,
    channel: Vec<Option<Var>>,
    spatial: Vec<Option<Var>>,
}

/// A recorded forward pass; differentiable when built with gradients.
pub struct Recording<'a> {
    rec: Recorder<'a>,
    logits: Var,
    trace: TraceVars,
}

/// Batch statistics observed by a training-mode pass.
#[derive(Clone, Debug)]
pub struct ObservedStats(Vec<(Norm, BatchStats)>);

fn batch_item(t: &Tensor, b: usize) -> Tensor {
    let per = t.len() / t.shape()[0];
    Tensor::from_vec(&t.shape()[1..], t.data()[b * per..(b + 1) * per].to_vec())
        .expect("slice matches shape")
}

impl Recording<'_> {
    pub fn tape(&self) -> &Tape<'_> {
        &self.rec.tape
    }

    /// `[N, C, D, H, W]` head outputs before the softmax.
    pub fn logits(&self) -> &Tensor {
        self.rec.tape.value(self.logits)
    }

    pub fn probabilities(&self) -> Tensor {
        softmax(self.logits())
    }

    /// Gradients of a scalar with `d/dlogits = seed`, one slot per parameter.
    pub fn backward(&self, seed: Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut grads = self.rec.tape.backward(self.logits, seed)?;
        Ok(self
            .rec
            .param_vars()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect())
    }

    pub fn trace(&self, sample: usize) -> ForwardTrace {
        let get = |v: Var| batch_item(self.rec.tape.value(v), sample);
        let tr = &self.trace;
        ForwardTrace {
            phi0: get(tr.phi0),
            t: tr.t.iter().map(|&v| get(v)).collect(),
            x_hat: tr.x_hat.iter().map(|&v| get(v)).collect(),
            u: tr.u.iter().map(|v| v.map(get)).collect(),
            r: get(tr.r),
            channel_maps: tr.channel.iter().map(|v| v.map(get)).collect(),
            spatial_maps: tr.spatial.iter().map(|v| v.map(get)).collect(),
        }
    }

    /// Stage-`site` spatial attention `[N, 1, D', H', W']`, if enabled.
    pub fn spatial_map(&self, site: usize) -> Option<&Tensor> {
        self.trace
            .spatial
            .get(site)
            .copied()
            .flatten()
            .map(|v| self.rec.tape.value(v))
    }

    pub fn into_stats(self) -> ObservedStats {
        ObservedStats(self.rec.batch_stats)
    }
}

fn check_dims(dims: &[usize]) -> std::result::Result<(), String> {
    if dims
        .iter()
        .any(|&d| d < INPUT_MULTIPLE || d % INPUT_MULTIPLE != 0)
    {
        return Err(format!(
            "spatial dims must be positive multiples of {INPUT_MULTIPLE}"
        ));
    }
    Ok(())
}

impl Network {
    /// Kaiming-uniform weights, zero biases and identity normalization,
    /// drawn in a fixed order from `seed`.
    pub fn build(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (m, e, t, g) = (
            cfg.in_modalities,
            cfg.extractor_channels,
            cfg.transition_channels,
            cfg.growth_rate,
        );
        let same = ConvGeometry::same(3);
        let point = ConvGeometry::pointwise();
        let extractor = FeatureExtractor {
            conv1: b.conv_norm("extractor.conv1", m, e, same),
            conv2: b.conv_norm("extractor.conv2", e, e, same),
            skip: b.conv_norm("extractor.skip", m, e, point),
        };
        let attention = |b: &mut Builder, name: &str, c: usize| Attention {
            fc1: b.linear(&format!("{name}.ca.fc1"), c, c / cfg.ca_reduction),
            fc2: b.linear(&format!("{name}.ca.fc2"), c / cfg.ca_reduction, c),
            sa: b.conv(
                &format!("{name}.sa"),
                2,
                1,
                ConvGeometry::same(cfg.sa_kernel),
            ),
        };
        let transition = |b: &mut Builder, name: &str, c: usize| Transition {
            project: b.conv_norm(&format!("{name}.project"), c, t, point),
            down: b.conv_norm(&format!("{name}.down"), t, t, ConvGeometry::new(2, 2, 0)),
        };
        let attention0 = attention(&mut b, "attention0", e);
        let transition0 = transition(&mut b, "transition0", e);
        let block_out = cfg.block_channels();
        let mut stages = Vec::with_capacity(STAGES);
        for k in 1..=STAGES {
            let units = (0..cfg.units_per_block)
                .map(|i| {
                    let name = format!("stage{k}.unit{i}");
                    DenseUnit {
                        bottleneck: b.conv_norm(
                            &format!("{name}.bottleneck"),
                            t + i * g,
                            4 * g,
                            point,
                        ),
                        conv: b.conv_norm(&format!("{name}.conv"), 4 * g, g, same),
                    }
                })
                .collect();
            let attention = attention(&mut b, &format!("stage{k}.attention"), block_out);
            let transition = transition(&mut b, &format!("stage{k}.transition"), block_out);
            let upsample = (cfg.enable_dense_up || k == STAGES).then(|| {
                b.upsample(
                    &format!("stage{k}.upsample"),
                    block_out,
                    cfg.upsample_channels,
                    1 << k,
                )
            });
            stages.push(Stage {
                block: DenseBlock { units },
                attention,
                transition,
                upsample,
            });
        }
        let head = b.conv("head", cfg.fused_channels(), cfg.num_classes, point);
        Ok(Self {
            cfg,
            store: b.store,
            extractor,
            attention0,
            transition0,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Validate a `[N, M, D, H, W]` input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let bad = |reason: String| Error::BadInputShape {
            shape: shape.to_vec(),
            reason,
        };
        if shape.len() != 5 || shape[0] == 0 {
            return Err(bad("expected [N, modalities, D, H, W]".into()));
        }
        if shape[1] != self.cfg.in_modalities {
            return Err(bad(format!(
                "expected {} modalities",
                self.cfg.in_modalities
            )));
        }
        check_dims(&shape[2..]).map_err(bad)
    }

    /// Record a full forward pass over a `[N, M, D, H, W]` batch.
    pub fn record(&self, input: Tensor, mode: Mode, requires_grad: bool) -> Result<Recording<'_>> {
        self.check_input(input.shape())?;
        let mut r = Recorder::new(&self.store, mode, requires_grad);
        let x = r.tape.input(input, false);
        let (ca, sa) = (self.cfg.enable_ca, self.cfg.enable_sa);

        let phi0 = self.extractor.apply(&mut r, x)?;
        let a0 = self.attention0.apply(&mut r, phi0, ca, sa)?;
        let mut tv = TraceVars {
            phi0,
            t: vec![self.transition0.apply(&mut r, phi0)?],
            x_hat: Vec::new(),
            u: Vec::new(),
            r: phi0,
            channel: vec![a0.channel],
            spatial: vec![a0.spatial],
        };
        let mut fused = vec![a0.out];
        for stage in &self.stages {
            let input = *tv.t.last().expect("initial transition recorded");
            let x_k = stage.block.apply(&mut r, input)?;
            let Attended {
                out,
                channel,
                spatial,
            } = stage.attention.apply(&mut r, x_k, ca, sa)?;
            tv.x_hat.push(out);
            tv.channel.push(channel);
            tv.spatial.push(spatial);
            if r.tape.shape(out)[2..].iter().all(|d| d % 2 == 0) {
                tv.t.push(stage.transition.apply(&mut r, out)?);
            }
            let u = stage.upsample.map(|up| up.apply(&mut r, out)).transpose()?;
            fused.extend(u);
            tv.u.push(u);
        }
        tv.r = r.tape.concat_channels(&fused)?;
        let logits = self.head.apply(&mut r, tv.r)?;
        Ok(Recording {
            rec: r,
            logits,
            trace: tv,
        })
    }

    /// Whole-network inference on one patch with running statistics.
    pub fn forward(&self, vol: &MultiModalVolume) -> Result<(ProbabilityMap, ForwardTrace)> {
        let shape: Vec<usize> = std::iter::once(1)
            .chain(vol.data.shape().iter().copied())
            .collect();
        let rec = self.record(vol.data.clone().reshape(&shape)?, Mode::Eval, false)?;
        let probs = batch_item(&rec.probabilities(), 0);
        Ok((ProbabilityMap::new(probs, vol.spacing)?, rec.trace(0)))
    }

    /// Blend observed batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &ObservedStats, momentum: f64) {
        for (norm, batch) in &stats.0 {
            for (id, observed) in [(norm.mean, &batch.mean), (norm.var, &batch.var)] {
                for (r, o) in self
                    .store
                    .tensor_mut(id)
                    .data_mut()
                    .iter_mut()
                    .zip(observed)
                {
                    *r = (1.0 - momentum) * *r + momentum * o;
                }
            }
        }
    }

    fn run(
        &self,
        x: &Tensor,
        f: impl FnOnce(&mut Recorder<'_>, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(Error::BadInputShape {
                shape: x.shape().to_vec(),
                reason: "expected [C, D, H, W]".into(),
            });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let mut r = Recorder::new(&self.store, Mode::Eval, false);
        let v = r.tape.input(x.clone().reshape(&shape)?, false);
        let out = f(&mut r, v)?;
        Ok(batch_item(r.tape.value(out), 0))
    }

    fn stage(&self, k: usize) -> Result<&Stage> {
        k.checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .ok_or_else(|| Error::InvalidConfig(format!("stage must be in 1..={STAGES}, got {k}")))
    }

    fn attention_site(&self, site: usize) -> Result<&Attention> {
        match site {
            0 => Ok(&self.attention0),
            k => Ok(&self.stage(k)?.attention),
        }
    }

    /// `Φ0` for a `[M, D, H, W]` input.
    pub fn feature_extract(&self, input: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        self.check_input(&shape)?;
        self.run(input, |r, x| self.extractor.apply(r, x))
    }

    /// Dense block of stage `k` (before attention).
    pub fn conv_block(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let block = &self.stage(k)?.block;
        self.run(x, |r, v| block.apply(r, v))
    }

    /// Channel weights of attention site `site` (0 is the module on `Φ0`).
    pub fn channel_attention(&self, site: usize, x: &Tensor) -> Result<Tensor> {
        let a = self.attention_site(site)?;
        let c = x.shape().first().copied().unwrap_or(0);
        if c % self.cfg.ca_reduction != 0 || self.store.tensor(a.fc1.w).shape()[1] != c {
            return Err(Error::ReductionMismatch {
                channels: c,
                reduction: self.cfg.ca_reduction,
            });
        }
        let m = self.run(x, |r, v| a.channel_map(r, v))?;
        Ok(m)
    }

    /// `[1, D, H, W]` voxel weights of attention site `site`.
    pub fn spatial_attention(&self, site: usize, x: &Tensor) -> Result<Tensor> {
        let a = self.attention_site(site)?;
        self.run(x, |r, v| a.spatial_map(r, v))
    }

    /// Channel then spatial gating, honouring the enable flags.
    pub fn attention_refine(&self, site: usize, x: &Tensor) -> Result<Tensor> {
        let a = self.attention_site(site)?;
        let (ca, sa) = (self.cfg.enable_ca, self.cfg.enable_sa);
        self.run(x, |r, v| Ok(a.apply(r, v, ca, sa)?.out))
    }

    /// Transition `k` (0 is the initial one on `Φ0`).
    pub fn transition(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        if x.rank() == 4 && x.shape()[1..].iter().any(|d| d % 2 != 0) {
            let s = x.shape();
            return Err(Error::OddDims {
                dims: s[1..].to_vec(),
            });
        }
        let t = match k {
            0 => &self.transition0,
            k => &self.stage(k)?.transition,
        };
        self.run(x, |r, v| t.apply(r, v))
    }

    /// Full-resolution upsampling branch of stage `k`.
    pub fn upsample_stage(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let up = self.stage(k)?.upsample.ok_or_else(|| {
            Error::InvalidConfig(format!(
                "stage {k} has no upsampling branch with dense upsampling disabled"
            ))
        })?;
        self.run(x, |r, v| up.apply(r, v))
    }
}
