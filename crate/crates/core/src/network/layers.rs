//! Layer definitions and the graph recorder they run on.

use hdan_tensor::{BatchStats, ConvGeometry, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::Result;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Whether normalization layers use batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct Builder {
    pub store: ParamStore,
    pub rng: ChaCha8Rng,
}

impl Builder {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(shape, data).expect("shape product matches");
        self.store.add(name, ParamKind::Weight, t)
    }

    fn constant(&mut self, name: String, kind: ParamKind, len: usize, value: f64) -> ParamId {
        self.store.add(name, kind, Tensor::full(&[len], value))
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, geom: ConvGeometry) -> Conv {
        let k = geom.kernel;
        let w = self.kaiming(
            format!("{name}.weight"),
            &[c_out, c_in, k, k, k],
            c_in * k * k * k,
        );
        let b = self.constant(format!("{name}.bias"), ParamKind::Bias, c_out, 0.0);
        Conv { w, b, geom }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            gamma: self.constant(
                format!("{name}.weight"),
                ParamKind::NormScale,
                channels,
                1.0,
            ),
            beta: self.constant(format!("{name}.bias"), ParamKind::NormShift, channels, 0.0),
            mean: self.constant(
                format!("{name}.running_mean"),
                ParamKind::RunningMean,
                channels,
                0.0,
            ),
            var: self.constant(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                channels,
                1.0,
            ),
        }
    }

    /// Convolution named `name` followed by normalization `name.norm`.
    pub fn conv_norm(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
    ) -> ConvNorm {
        ConvNorm {
            conv: self.conv(name, c_in, c_out, geom),
            norm: self.norm(&format!("{name}.norm"), c_out),
        }
    }

    pub fn linear(&mut self, name: &str, f_in: usize, f_out: usize) -> Linear {
        Linear {
            w: self.kaiming(format!("{name}.weight"), &[f_out, f_in], f_in),
            b: self.constant(format!("{name}.bias"), ParamKind::Bias, f_out, 0.0),
        }
    }

    /// Transposed convolution with kernel = stride = `k`; each output voxel
    /// sums exactly `c_in` products, which is used as the fan-in.
    pub fn upsample(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Upsample {
        let w = self.kaiming(format!("{name}.weight"), &[c_in, c_out, k, k, k], c_in);
        let b = self.constant(format!("{name}.bias"), ParamKind::Bias, c_out, 0.0);
        Upsample {
            w,
            b,
            k,
            norm: self.norm(&format!("{name}.norm"), c_out),
        }
    }
}

/// Records one forward pass onto a tape.
pub(crate) struct Recorder<'a> {
    pub tape: Tape<'a>,
    pub store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    requires_grad: bool,
    pub mode: Mode,
    pub batch_stats: Vec<(Norm, BatchStats)>,
}

impl<'a> Recorder<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, requires_grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
            requires_grad,
            mode,
            batch_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.index()] {
            return v;
        }
        let v = self.tape.leaf(self.store.tensor(id), self.requires_grad);
        self.vars[id.index()] = Some(v);
        v
    }

    /// Tape variables of the parameters touched by this pass.
    pub fn param_vars(&self) -> &[Option<Var>] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeometry,
}

impl Conv {
    pub fn apply(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let (w, b) = (r.param(self.w), r.param(self.b));
        Ok(r.tape.conv3d(x, w, Some(b), self.geom)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl Norm {
    pub fn apply(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let (g, b) = (r.param(self.gamma), r.param(self.beta));
        let running = match r.mode {
            Mode::Train => None,
            Mode::Eval => Some((
                r.store.tensor(self.mean).data(),
                r.store.tensor(self.var).data(),
            )),
        };
        let (y, stats) = r.tape.batch_norm(x, g, b, BN_EPS, running)?;
        if let Some(stats) = stats {
            r.batch_stats.push((*self, stats));
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvNorm {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNorm {
    /// Convolution and normalization without the activation.
    pub fn apply_linear(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let y = self.conv.apply(r, x)?;
        self.norm.apply(r, y)
    }

    pub fn apply(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let y = self.apply_linear(r, x)?;
        Ok(r.tape.relu(y))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let (w, b) = (r.param(self.w), r.param(self.b));
        Ok(r.tape.linear(x, w, b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Upsample {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub norm: Norm,
}

impl Upsample {
    pub fn apply(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let (w, b) = (r.param(self.w), r.param(self.b));
        let y = r.tape.conv_transpose3d(x, w, Some(b), self.k)?;
        let y = self.norm.apply(r, y)?;
        Ok(r.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeatureExtractor {
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
    pub skip: ConvNorm,
}

impl FeatureExtractor {
    pub fn apply(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.apply(r, x)?;
        let h = self.conv2.apply_linear(r, h)?;
        let s = self.skip.apply_linear(r, x)?;
        let sum = r.tape.add(h, s)?;
        Ok(r.tape.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DenseUnit {
    pub bottleneck: ConvNorm,
    pub conv: ConvNorm,
}

#[derive(Clone, Debug)]
pub(crate) struct DenseBlock {
    pub units: Vec<DenseUnit>,
}

impl DenseBlock {
    pub fn apply(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for unit in &self.units {
            let input = if features.len() == 1 {
                x
            } else {
                r.tape.concat_channels(&features)?
            };
            let h = unit.bottleneck.apply(r, input)?;
            features.push(unit.conv.apply(r, h)?);
        }
        Ok(r.tape.concat_channels(&features)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub sa: Conv,
}

/// Outputs of one attention module.
pub(crate) struct Attended {
    pub out: Var,
    pub channel: Option<Var>,
    pub spatial: Option<Var>,
}

impl Attention {
    /// `[N, C]` channel weights.
    pub fn channel_map(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let pooled = r.tape.global_avg_pool(x)?;
        let h = self.fc1.apply(r, pooled)?;
        let h = r.tape.relu(h);
        let h = self.fc2.apply(r, h)?;
        Ok(r.tape.sigmoid(h))
    }

    /// `[N, 1, D, H, W]` voxel weights.
    pub fn spatial_map(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let pooled = r.tape.channel_pool(x)?;
        let h = self.sa.apply(r, pooled)?;
        Ok(r.tape.sigmoid(h))
    }

    pub fn apply(&self, r: &mut Recorder<'_>, x: Var, ca: bool, sa: bool) -> Result<Attended> {
        let (mut out, mut channel, mut spatial) = (x, None, None);
        if ca {
            let m = self.channel_map(r, out)?;
            out = r.tape.scale_channels(out, m)?;
            channel = Some(m);
        }
        if sa {
            let m = self.spatial_map(r, out)?;
            out = r.tape.scale_spatial(out, m)?;
            spatial = Some(m);
        }
        Ok(Attended {
            out,
            channel,
            spatial,
        })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Transition {
    pub project: ConvNorm,
    pub down: ConvNorm,
}

impl Transition {
    pub fn apply(&self, r: &mut Recorder<'_>, x: Var) -> Result<Var> {
        let h = self.project.apply(r, x)?;
        self.down.apply(r, h)
    }
}
