//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough context to
//! run its adjoint. Leaves can borrow their value (parameters) so building a
//! graph does not copy weights.

use std::borrow::Cow;

use crate::conv::{self, ConvGeometry, ConvShapes};
use crate::sum::exact_sum;
use crate::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance; used to update running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    ScaleSpatial {
        x: Var,
        m: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelPool {
        x: Var,
        argmax: Vec<u32>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Linear record of a computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::Mismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn dims3(t: &Tensor) -> [usize; 3] {
    [t.shape()[2], t.shape()[3], t.shape()[4]]
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A borrowed leaf, typically a parameter.
    pub fn leaf(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    /// An owned leaf, typically an input batch.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 3D convolution. `x` is `[N, C_in, D, H, W]`, `w` is `[C_out, C_in, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        xv.expect_rank("conv3d", 5)?;
        wv.expect_rank("conv3d", 5)?;
        let k = geom.kernel;
        if wv.shape()[1] != xv.shape()[1] || wv.shape()[2..] != [k, k, k] {
            return Err(mismatch("conv3d", xv, wv));
        }
        let c_out = wv.shape()[0];
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(mismatch("conv3d bias", wv, self.value(b)));
            }
        }
        let shapes = ConvShapes {
            batch: xv.shape()[0],
            c_in: xv.shape()[1],
            c_out,
            in_dims: dims3(xv),
            out_dims: geom.output_dims(dims3(xv))?,
        };
        let data = conv::conv3d_forward(
            xv.data(),
            wv.data(),
            b.map(|b| self.value(b).data()),
            &shapes,
            geom,
        );
        let [od, oh, ow] = shapes.out_dims;
        let out = Tensor::from_vec(&[shapes.batch, c_out, od, oh, ow], data)?;
        let needs = self.wants(x) || self.wants(w) || b.is_some_and(|b| self.wants(b));
        Ok(self.push(Cow::Owned(out), Op::Conv { x, w, b, geom }, needs))
    }

    /// Transposed convolution with kernel == stride == `k` (no overlap).
    /// `w` is `[C_in, C_out, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, k: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        xv.expect_rank("conv_transpose3d", 5)?;
        wv.expect_rank("conv_transpose3d", 5)?;
        if k == 0 || wv.shape()[0] != xv.shape()[1] || wv.shape()[2..] != [k, k, k] {
            return Err(mismatch("conv_transpose3d", xv, wv));
        }
        let c_out = wv.shape()[1];
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(mismatch("conv_transpose3d bias", wv, self.value(b)));
            }
        }
        let in_dims = dims3(xv);
        let shapes = ConvShapes {
            batch: xv.shape()[0],
            c_in: xv.shape()[1],
            c_out,
            in_dims,
            out_dims: in_dims.map(|d| d * k),
        };
        let data = conv::conv_transpose_forward(
            xv.data(),
            wv.data(),
            b.map(|b| self.value(b).data()),
            &shapes,
            k,
        );
        let [od, oh, ow] = shapes.out_dims;
        let out = Tensor::from_vec(&[shapes.batch, c_out, od, oh, ow], data)?;
        let needs = self.wants(x) || self.wants(w) || b.is_some_and(|b| self.wants(b));
        Ok(self.push(Cow::Owned(out), Op::ConvTranspose { x, w, b, k }, needs))
    }

    /// Batch normalization over `[N, C, ...]`. With `running` set, the given
    /// `(mean, var)` are used (inference); otherwise batch statistics are
    /// computed and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(TensorError::Rank {
                op: "batch_norm",
                expected: 5,
                shape: xv.shape().to_vec(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let s = xv.len() / (n * c).max(1);
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(mismatch("batch_norm", xv, self.value(p)));
            }
        }
        let count = (n * s) as f64;
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(TensorError::Geometry {
                        op: "batch_norm",
                        reason: format!("running statistics have {} channels, input {c}", m.len()),
                    });
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for b in 0..n {
                        sum += xv.data()[(b * c + ch) * s..][..s].iter().sum::<f64>();
                    }
                    let m = sum / count;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += xv.data()[(b * c + ch) * s..][..s]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| {
                        if count > 1.0 {
                            v * count / (count - 1.0)
                        } else {
                            *v
                        }
                    })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let at = (b * c + ch) * s;
                let scale = g[ch] * inv_std[ch];
                let shift = bt[ch] - mean[ch] * scale;
                for (o, v) in out[at..at + s].iter_mut().zip(&xv.data()[at..at + s]) {
                    *o = v * scale + shift;
                }
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        let needs = self.wants(x) || self.wants(gamma) || self.wants(beta);
        let batch_stats = stats.is_some();
        let var = self.push(
            Cow::Owned(out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            needs,
        );
        Ok((var, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.wants(x);
        self.push(Cow::Owned(out), Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.wants(x);
        self.push(Cow::Owned(out), Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), needs))
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(TensorError::Geometry {
            op: "concat_channels",
            reason: "nothing to concatenate".into(),
        })?);
        first.expect_rank("concat_channels", 5)?;
        let n = first.shape()[0];
        let spatial = first.shape()[2..].to_vec();
        let mut channels = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 5 || pv.shape()[0] != n || pv.shape()[2..] != spatial[..] {
                return Err(mismatch("concat_channels", first, pv));
            }
            channels += pv.shape()[1];
        }
        let s: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(n * channels * s);
        for b in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let c = pv.shape()[1];
                data.extend_from_slice(&pv.data()[b * c * s..(b + 1) * c * s]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend(spatial);
        let out = Tensor::from_vec(&shape, data)?;
        let needs = parts.iter().any(|&p| self.wants(p));
        Ok(self.push(Cow::Owned(out), Op::Concat(parts.to_vec()), needs))
    }

    /// `x[n, c, ..] * s[n, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if xv.rank() < 2 || sv.shape() != &xv.shape()[..2] {
            return Err(mismatch("scale_channels", xv, sv));
        }
        let len = xv.spatial_len();
        let mut out = xv.clone();
        for (plane, &g) in out.data_mut().chunks_mut(len.max(1)).zip(sv.data()) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        let needs = self.wants(x) || self.wants(s);
        Ok(self.push(Cow::Owned(out), Op::ScaleChannels { x, s }, needs))
    }

    /// `x[n, c, v] * m[n, 0, v]`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(m));
        if xv.rank() < 3
            || mv.rank() != xv.rank()
            || mv.shape()[1] != 1
            || mv.shape()[0] != xv.shape()[0]
            || mv.shape()[2..] != xv.shape()[2..]
        {
            return Err(mismatch("scale_spatial", xv, mv));
        }
        let (n, c, len) = (xv.shape()[0], xv.shape()[1], xv.spatial_len());
        let mut out = xv.clone();
        for b in 0..n {
            let gate = &mv.data()[b * len..(b + 1) * len];
            for ch in 0..c {
                let plane = &mut out.data_mut()[(b * c + ch) * len..][..len];
                plane.iter_mut().zip(gate).for_each(|(v, g)| *v *= g);
            }
        }
        let needs = self.wants(x) || self.wants(m);
        Ok(self.push(Cow::Owned(out), Op::ScaleSpatial { x, m }, needs))
    }

    /// Mean over all spatial positions: `[N, C, ...] -> [N, C]`. The sum is
    /// correctly rounded, so the result does not depend on voxel order.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 {
            return Err(TensorError::Rank {
                op: "global_avg_pool",
                expected: 5,
                shape: xv.shape().to_vec(),
            });
        }
        let len = xv.spatial_len();
        let data = xv
            .data()
            .chunks(len)
            .map(|plane| exact_sum(plane.iter().copied()) / len as f64)
            .collect();
        let out = Tensor::from_vec(&xv.shape()[..2], data)?;
        let needs = self.wants(x);
        Ok(self.push(Cow::Owned(out), Op::GlobalAvgPool(x), needs))
    }

    /// Fully connected layer on `[N, F_in]` with `w` as `[F_out, F_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        xv.expect_rank("linear", 2)?;
        wv.expect_rank("linear", 2)?;
        let (n, f_in, f_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        if wv.shape()[1] != f_in || bv.shape() != [f_out] {
            return Err(mismatch("linear", xv, wv));
        }
        let mut data = vec![0.0; n * f_out];
        for i in 0..n {
            let row = &xv.data()[i * f_in..(i + 1) * f_in];
            for o in 0..f_out {
                let wr = &wv.data()[o * f_in..(o + 1) * f_in];
                data[i * f_out + o] =
                    bv.data()[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::from_vec(&[n, f_out], data)?;
        let needs = self.wants(x) || self.wants(w) || self.wants(b);
        Ok(self.push(Cow::Owned(out), Op::Linear { x, w, b }, needs))
    }

    /// Channelwise max and mean descriptors: `[N, C, ...] -> [N, 2, ...]`
    /// (max first). The mean uses a correctly rounded sum, so both maps are
    /// invariant to channel order.
    pub fn channel_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 3 || xv.shape()[1] == 0 {
            return Err(TensorError::Rank {
                op: "channel_pool",
                expected: 5,
                shape: xv.shape().to_vec(),
            });
        }
        let (n, c, len) = (xv.shape()[0], xv.shape()[1], xv.spatial_len());
        let mut out = vec![0.0; n * 2 * len];
        let mut argmax = vec![0u32; n * len];
        let mut column = Vec::with_capacity(c);
        for b in 0..n {
            let sample = &xv.data()[b * c * len..(b + 1) * c * len];
            for v in 0..len {
                column.clear();
                column.extend((0..c).map(|ch| sample[ch * len + v]));
                let (best, max) =
                    column
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &val)| {
                            if val > acc.1 {
                                (i, val)
                            } else {
                                acc
                            }
                        });
                argmax[b * len + v] = best as u32;
                out[b * 2 * len + v] = max;
                out[b * 2 * len + len + v] = exact_sum(column.iter().copied()) / c as f64;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[1] = 2;
        let out = Tensor::from_vec(&shape, out)?;
        let needs = self.wants(x);
        Ok(self.push(Cow::Owned(out), Op::ChannelPool { x, argmax }, needs))
    }

    /// Back-propagate `seed` (the gradient of some scalar w.r.t. `output`).
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(mismatch("backward", self.value(output), &seed));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.adjoint(node, &grad, &mut grads)?;
            // keep the gradient of intermediate nodes available to callers
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn adjoint(&self, node: &Node<'a>, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => Ok(()),
            Op::Conv { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let shapes = ConvShapes {
                    batch: xv.shape()[0],
                    c_in: xv.shape()[1],
                    c_out: wv.shape()[0],
                    in_dims: dims3(xv),
                    out_dims: dims3(grad),
                };
                let (dx, dw, db) = conv::conv3d_backward(
                    xv.data(),
                    wv.data(),
                    grad.data(),
                    &shapes,
                    *geom,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?)?;
                }
                self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw)?)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(&[shapes.c_out], db)?)?;
                }
                Ok(())
            }
            Op::ConvTranspose { x, w, b, k } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let shapes = ConvShapes {
                    batch: xv.shape()[0],
                    c_in: xv.shape()[1],
                    c_out: wv.shape()[1],
                    in_dims: dims3(xv),
                    out_dims: dims3(grad),
                };
                let (dx, dw, db) = conv::conv_transpose_backward(
                    xv.data(),
                    wv.data(),
                    grad.data(),
                    &shapes,
                    *k,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?)?;
                }
                self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw)?)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(&[shapes.c_out], db)?)?;
                }
                Ok(())
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gamma).data();
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let s = xv.len() / (n * c).max(1);
                let count = (n * s) as f64;
                let mut d_gamma = vec![0.0; c];
                let mut d_beta = vec![0.0; c];
                for ch in 0..c {
                    for b in 0..n {
                        let at = (b * c + ch) * s;
                        for (dy, v) in grad.data()[at..at + s].iter().zip(&xv.data()[at..at + s]) {
                            d_beta[ch] += dy;
                            d_gamma[ch] += dy * (v - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for b in 0..n {
                            let at = (b * c + ch) * s;
                            let rows = dx[at..at + s]
                                .iter_mut()
                                .zip(&grad.data()[at..at + s])
                                .zip(&xv.data()[at..at + s]);
                            for ((o, dy), v) in rows {
                                *o = if *batch_stats {
                                    let xhat = (v - mean[ch]) * inv_std[ch];
                                    scale * (dy - d_beta[ch] / count - xhat * d_gamma[ch] / count)
                                } else {
                                    scale * dy
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?)?;
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], d_gamma)?)?;
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], d_beta)?)
            }
            Op::Relu(x) => {
                let mut dx = grad.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx)
            }
            Op::Sigmoid(x) => {
                let mut dx = grad.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                self.accumulate(grads, *x, dx)
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone())?;
                self.accumulate(grads, *b, grad.clone())
            }
            Op::Concat(parts) => {
                let n = grad.shape()[0];
                let total = grad.shape()[1];
                let s = grad.spatial_len();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let c = shape[1];
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(n * c * s);
                        for b in 0..n {
                            let at = (b * total + offset) * s;
                            data.extend_from_slice(&grad.data()[at..at + c * s]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(shape, data)?)?;
                    }
                    offset += c;
                }
                Ok(())
            }
            Op::ScaleChannels { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let len = xv.spatial_len().max(1);
                if self.wants(*x) {
                    let mut dx = grad.clone();
                    for (plane, &g) in dx.data_mut().chunks_mut(len).zip(sv.data()) {
                        plane.iter_mut().for_each(|v| *v *= g);
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                let ds: Vec<f64> = grad
                    .data()
                    .chunks(len)
                    .zip(xv.data().chunks(len))
                    .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
                    .collect();
                self.accumulate(grads, *s, Tensor::from_vec(sv.shape(), ds)?)
            }
            Op::ScaleSpatial { x, m } => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let (n, c, len) = (xv.shape()[0], xv.shape()[1], xv.spatial_len());
                let mut dm = vec![0.0; mv.len()];
                let mut dx = self.wants(*x).then(|| grad.clone());
                for b in 0..n {
                    let gate = &mv.data()[b * len..(b + 1) * len];
                    let dgate = &mut dm[b * len..(b + 1) * len];
                    for ch in 0..c {
                        let at = (b * c + ch) * len;
                        let g = &grad.data()[at..at + len];
                        let v = &xv.data()[at..at + len];
                        for i in 0..len {
                            dgate[i] += g[i] * v[i];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let d = &mut dx.data_mut()[at..at + len];
                            d.iter_mut().zip(gate).for_each(|(d, m)| *d *= m);
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *m, Tensor::from_vec(mv.shape(), dm)?)
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let len = xv.spatial_len();
                let mut dx = Tensor::zeros(xv.shape());
                for (plane, g) in dx.data_mut().chunks_mut(len).zip(grad.data()) {
                    plane.fill(g / len as f64);
                }
                self.accumulate(grads, *x, dx)
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, f_in, f_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                let mut dx = vec![0.0; n * f_in];
                let mut dw = vec![0.0; f_out * f_in];
                let mut db = vec![0.0; f_out];
                for i in 0..n {
                    for o in 0..f_out {
                        let g = grad.data()[i * f_out + o];
                        db[o] += g;
                        for j in 0..f_in {
                            dw[o * f_in + j] += g * xv.data()[i * f_in + j];
                            dx[i * f_in + j] += g * wv.data()[o * f_in + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?)?;
                self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw)?)?;
                self.accumulate(grads, *b, Tensor::from_vec(&[f_out], db)?)
            }
            Op::ChannelPool { x, argmax } => {
                let xv = self.value(*x);
                let (n, c, len) = (xv.shape()[0], xv.shape()[1], xv.spatial_len());
                let mut dx = vec![0.0; xv.len()];
                for b in 0..n {
                    let g_max = &grad.data()[b * 2 * len..][..len];
                    let g_mean = &grad.data()[b * 2 * len + len..][..len];
                    for ch in 0..c {
                        let at = (b * c + ch) * len;
                        for v in 0..len {
                            dx[at + v] = g_mean[v] / c as f64;
                        }
                    }
                    for v in 0..len {
                        dx[(b * c + argmax[b * len + v] as usize) * len + v] += g_max[v];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?)
            }
        }
    }
}
