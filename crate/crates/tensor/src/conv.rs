//! Convolution kernels: chunked im2col + GEMM for strided/padded cubic
//! kernels, direct GEMM for pointwise kernels, and a non-overlapping
//! transposed convolution (kernel == stride).

use rayon::prelude::*;

use crate::gemm::{gemm, MatRef};
use crate::{Result, TensorError};

/// Geometry of a cubic 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self::new(kernel, 1, kernel / 2)
    }

    pub const fn pointwise() -> Self {
        Self::new(1, 1, 0)
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(TensorError::Geometry {
                op: "conv3d",
                reason: "kernel and stride must be positive".into(),
            });
        }
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = dims[axis] + 2 * self.padding;
            if padded < self.kernel {
                return Err(TensorError::Geometry {
                    op: "conv3d",
                    reason: format!("kernel {} larger than padded extent {padded}", self.kernel),
                });
            }
            out[axis] = (padded - self.kernel) / self.stride + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Upper bound on the number of f64 entries in one im2col buffer (32 MiB).
const COLUMN_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy)]
struct Plan {
    geom: ConvGeometry,
    c_in: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
}

impl Plan {
    fn rows(&self) -> usize {
        self.c_in * self.geom.kernel.pow(3)
    }

    fn out_plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    /// Output-depth slabs such that each im2col buffer stays within budget.
    fn slabs(&self) -> Vec<(usize, usize)> {
        let per_slice = self.rows() * self.out_plane();
        let step = (COLUMN_BUDGET / per_slice.max(1)).clamp(1, self.out_dims[0].max(1));
        (0..self.out_dims[0])
            .step_by(step)
            .map(|z0| (z0, (z0 + step).min(self.out_dims[0])))
            .collect()
    }

    /// Output columns `[lo, hi)` along x whose input tap `ox*s + kx - p`
    /// lies inside the volume.
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        let (s, p, w, ow) = (
            self.geom.stride,
            self.geom.padding,
            self.in_dims[2],
            self.out_dims[2],
        );
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx {
            (w + p - kx).div_ceil(s).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Fill `cols` (rows x slab columns) from one sample's input.
    fn im2col(&self, input: &[f64], (z0, z1): (usize, usize), cols: &mut [f64]) {
        let k = self.geom.kernel;
        let s = self.geom.stride;
        let p = self.geom.padding as isize;
        let [d, h, w] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let width = (z1 - z0) * oh * ow;
        let mut row = 0;
        for ci in 0..self.c_in {
            let channel = &input[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = self.valid_x(kx);
                        let dst = &mut cols[row * width..(row + 1) * width];
                        let mut at = 0;
                        for oz in z0..z1 {
                            let iz = (oz * s + kz) as isize - p;
                            for oy in 0..oh {
                                let iy = (oy * s + ky) as isize - p;
                                let seg = &mut dst[at..at + ow];
                                at += ow;
                                if iz < 0
                                    || iz >= d as isize
                                    || iy < 0
                                    || iy >= h as isize
                                    || lo == hi
                                {
                                    seg.fill(0.0);
                                    continue;
                                }
                                let src = &channel[(iz as usize * h + iy as usize) * w..][..w];
                                seg[..lo].fill(0.0);
                                seg[hi..].fill(0.0);
                                let first = lo * s + kx - p as usize;
                                if s == 1 {
                                    seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    for (v, x) in
                                        seg[lo..hi].iter_mut().zip(src[first..].iter().step_by(s))
                                    {
                                        *v = *x;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` back into one sample's input gradient.
    fn col2im(&self, cols: &[f64], (z0, z1): (usize, usize), grad: &mut [f64]) {
        let k = self.geom.kernel;
        let s = self.geom.stride;
        let p = self.geom.padding as isize;
        let [d, h, w] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let width = (z1 - z0) * oh * ow;
        let mut row = 0;
        for ci in 0..self.c_in {
            let channel = &mut grad[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = self.valid_x(kx);
                        let src = &cols[row * width..(row + 1) * width];
                        let mut at = 0;
                        for oz in z0..z1 {
                            let iz = (oz * s + kz) as isize - p;
                            for oy in 0..oh {
                                let iy = (oy * s + ky) as isize - p;
                                let seg = &src[at..at + ow];
                                at += ow;
                                if iz < 0
                                    || iz >= d as isize
                                    || iy < 0
                                    || iy >= h as isize
                                    || lo == hi
                                {
                                    continue;
                                }
                                let dst = &mut channel[(iz as usize * h + iy as usize) * w..][..w];
                                let first = lo * s + kx - p as usize;
                                if s == 1 {
                                    for (x, v) in
                                        dst[first..first + hi - lo].iter_mut().zip(&seg[lo..hi])
                                    {
                                        *x += v;
                                    }
                                } else {
                                    for (x, v) in
                                        dst[first..].iter_mut().step_by(s).zip(&seg[lo..hi])
                                    {
                                        *x += v;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// Convolutions with at most this many output channels (and stride 1) run
/// as shifted row updates instead of im2col + GEMM.
const DIRECT_MAX_OUT: usize = 2;

impl Plan {
    fn use_direct(&self, c_out: usize) -> bool {
        c_out <= DIRECT_MAX_OUT && self.geom.stride == 1 && !self.geom.is_pointwise()
    }

    /// Visit every (tap, output row) pair that reads inside the volume as
    /// `f(tap, input_offset, output_offset, len)`.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let k = self.geom.kernel;
        let p = self.geom.padding as isize;
        let [d, h, w] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        for ci in 0..self.c_in {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = self.valid_x(kx);
                        if lo == hi {
                            continue;
                        }
                        let tap = ((ci * k + kz) * k + ky) * k + kx;
                        for oz in 0..od {
                            let iz = (oz + kz) as isize - p;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy + ky) as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let src = ((ci * d + iz as usize) * h + iy as usize) * w + lo + kx
                                    - p as usize;
                                let dst = (oz * oh + oy) * ow + lo;
                                f(tap, src, dst, hi - lo);
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct_forward(&self, x: &[f64], weight: &[f64], c_out: usize, y: &mut [f64]) {
        let (rows, out_len) = (self.rows(), self.out_len());
        for co in 0..c_out {
            let (w, out) = (
                &weight[co * rows..(co + 1) * rows],
                &mut y[co * out_len..(co + 1) * out_len],
            );
            out.fill(0.0);
            self.for_each_row(|tap, src, dst, n| {
                let wv = w[tap];
                for (o, v) in out[dst..dst + n].iter_mut().zip(&x[src..src + n]) {
                    *o += wv * v;
                }
            });
        }
    }

    fn direct_backward(
        &self,
        x: &[f64],
        weight: &[f64],
        dy: &[f64],
        c_out: usize,
        dw: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let (rows, out_len) = (self.rows(), self.out_len());
        let mut dx = dx;
        for co in 0..c_out {
            let (w, g) = (
                &weight[co * rows..(co + 1) * rows],
                &dy[co * out_len..(co + 1) * out_len],
            );
            let dw = &mut dw[co * rows..(co + 1) * rows];
            self.for_each_row(|tap, src, dst, n| {
                let gs = &g[dst..dst + n];
                dw[tap] += gs
                    .iter()
                    .zip(&x[src..src + n])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                if let Some(dx) = dx.as_deref_mut() {
                    let wv = w[tap];
                    for (o, v) in dx[src..src + n].iter_mut().zip(gs) {
                        *o += wv * v;
                    }
                }
            });
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Run `f` with two per-thread scratch buffers of at least `len` entries.
/// Contents are unspecified on entry.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let (a, b) = &mut *bufs;
        if a.len() < len {
            a.resize(len, 0.0);
            b.resize(len, 0.0);
        }
        f(&mut a[..len], &mut b[..len])
    })
}

pub(crate) struct ConvShapes {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

fn plan(shapes: &ConvShapes, geom: ConvGeometry) -> Plan {
    Plan {
        geom,
        c_in: shapes.c_in,
        in_dims: shapes.in_dims,
        out_dims: shapes.out_dims,
    }
}

/// Forward convolution. `weight` is `[c_out, c_in, k, k, k]`.
pub(crate) fn conv3d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    shapes: &ConvShapes,
    geom: ConvGeometry,
) -> Vec<f64> {
    let plan = plan(shapes, geom);
    let (in_len, out_len) = (plan.in_len(), plan.out_len());
    let rows = plan.rows();
    let c_out = shapes.c_out;
    let w = MatRef::row_major(weight, c_out, rows);
    let mut out = vec![0.0; shapes.batch * c_out * out_len];
    out.par_chunks_mut(c_out * out_len)
        .enumerate()
        .for_each(|(n, y)| {
            let x = &input[n * shapes.c_in * in_len..(n + 1) * shapes.c_in * in_len];
            if geom.is_pointwise() {
                gemm(
                    1.0,
                    w,
                    MatRef::row_major(x, rows, in_len),
                    0.0,
                    y,
                    out_len,
                    1,
                );
            } else if plan.use_direct(c_out) {
                plan.direct_forward(x, weight, c_out, y);
            } else {
                let slabs = plan.slabs();
                let widest = slabs.iter().map(|s| s.1 - s.0).max().unwrap_or(0) * plan.out_plane();
                with_scratch(rows * widest, |buf, _| {
                    for slab in slabs {
                        let width = (slab.1 - slab.0) * plan.out_plane();
                        let cols = &mut buf[..rows * width];
                        plan.im2col(x, slab, cols);
                        let offset = slab.0 * plan.out_plane();
                        gemm(
                            1.0,
                            w,
                            MatRef::row_major(cols, rows, width),
                            0.0,
                            &mut y[offset..],
                            out_len,
                            1,
                        );
                    }
                });
            }
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(out_len).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

/// Backward convolution: returns `(d_input, d_weight, d_bias)`; `d_input` is
/// skipped when not requested.
pub(crate) fn conv3d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    shapes: &ConvShapes,
    geom: ConvGeometry,
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plan = plan(shapes, geom);
    let (in_len, out_len) = (plan.in_len(), plan.out_len());
    let rows = plan.rows();
    let c_out = shapes.c_out;
    let w = MatRef::row_major(weight, c_out, rows);
    let mut d_weight = vec![0.0; c_out * rows];
    let mut d_bias = vec![0.0; c_out];
    let mut d_input = want_input.then(|| vec![0.0; input.len()]);
    let slabs = plan.slabs();
    let widest = slabs.iter().map(|s| s.1 - s.0).max().unwrap_or(0) * plan.out_plane();
    for n in 0..shapes.batch {
        let x = &input[n * shapes.c_in * in_len..(n + 1) * shapes.c_in * in_len];
        let dy = &grad_out[n * c_out * out_len..(n + 1) * c_out * out_len];
        for (co, plane) in dy.chunks(out_len).enumerate() {
            d_bias[co] += plane.iter().sum::<f64>();
        }
        if geom.is_pointwise() {
            let dy_m = MatRef::row_major(dy, c_out, out_len);
            gemm(
                1.0,
                dy_m,
                MatRef::row_major(x, rows, in_len).t(),
                1.0,
                &mut d_weight,
                rows,
                1,
            );
            if let Some(dx) = d_input.as_mut() {
                let dx = &mut dx[n * shapes.c_in * in_len..(n + 1) * shapes.c_in * in_len];
                gemm(1.0, w.t(), dy_m, 0.0, dx, in_len, 1);
            }
            continue;
        }
        if plan.use_direct(c_out) {
            let dx = d_input
                .as_mut()
                .map(|dx| &mut dx[n * shapes.c_in * in_len..(n + 1) * shapes.c_in * in_len]);
            plan.direct_backward(x, weight, dy, c_out, &mut d_weight, dx);
            continue;
        }
        with_scratch(rows * widest, |buf, d_buf| {
            for &slab in &slabs {
                let width = (slab.1 - slab.0) * plan.out_plane();
                let offset = slab.0 * plan.out_plane();
                let dy_slab = MatRef::strided(&dy[offset..], c_out, width, out_len, 1);
                let cols = &mut buf[..rows * width];
                plan.im2col(x, slab, cols);
                gemm(
                    1.0,
                    dy_slab,
                    MatRef::row_major(cols, rows, width).t(),
                    1.0,
                    &mut d_weight,
                    rows,
                    1,
                );
                if let Some(dx) = d_input.as_mut() {
                    let d_cols = &mut d_buf[..rows * width];
                    gemm(1.0, w.t(), dy_slab, 0.0, d_cols, width, 1);
                    let dx = &mut dx[n * shapes.c_in * in_len..(n + 1) * shapes.c_in * in_len];
                    plan.col2im(d_cols, slab, dx);
                }
            }
        });
    }
    (d_input, d_weight, d_bias)
}

/// Non-overlapping transposed convolution with kernel == stride == `k`.
/// `weight` is `[c_in, c_out, k, k, k]`.
pub(crate) fn conv_transpose_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    shapes: &ConvShapes,
    k: usize,
) -> Vec<f64> {
    let in_len: usize = shapes.in_dims.iter().product();
    let out_len: usize = shapes.out_dims.iter().product();
    let taps = k * k * k;
    let cols = shapes.c_out * taps;
    let w = MatRef::row_major(weight, shapes.c_in, cols);
    let mut out = vec![0.0; shapes.batch * shapes.c_out * out_len];
    out.par_chunks_mut(shapes.c_out * out_len)
        .enumerate()
        .for_each(|(n, y)| {
            let x = &input[n * shapes.c_in * in_len..(n + 1) * shapes.c_in * in_len];
            let mut z = vec![0.0; cols * in_len];
            gemm(
                1.0,
                w.t(),
                MatRef::row_major(x, shapes.c_in, in_len),
                0.0,
                &mut z,
                in_len,
                1,
            );
            scatter_blocks(&z, y, shapes, k, |dst, src| *dst = src);
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(out_len).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

pub(crate) fn conv_transpose_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    shapes: &ConvShapes,
    k: usize,
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_len: usize = shapes.in_dims.iter().product();
    let out_len: usize = shapes.out_dims.iter().product();
    let taps = k * k * k;
    let cols = shapes.c_out * taps;
    let w = MatRef::row_major(weight, shapes.c_in, cols);
    let mut d_weight = vec![0.0; shapes.c_in * cols];
    let mut d_bias = vec![0.0; shapes.c_out];
    let mut d_input = want_input.then(|| vec![0.0; input.len()]);
    let mut dz = vec![0.0; cols * in_len];
    for n in 0..shapes.batch {
        let x = &input[n * shapes.c_in * in_len..(n + 1) * shapes.c_in * in_len];
        let dy = &grad_out[n * shapes.c_out * out_len..(n + 1) * shapes.c_out * out_len];
        for (co, plane) in dy.chunks(out_len).enumerate() {
            d_bias[co] += plane.iter().sum::<f64>();
        }
        gather_blocks(dy, &mut dz, shapes, k);
        let dz_m = MatRef::row_major(&dz, cols, in_len);
        gemm(
            1.0,
            MatRef::row_major(x, shapes.c_in, in_len),
            dz_m.t(),
            1.0,
            &mut d_weight,
            cols,
            1,
        );
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[n * shapes.c_in * in_len..(n + 1) * shapes.c_in * in_len];
            gemm(1.0, w, dz_m, 0.0, dx, in_len, 1);
        }
    }
    (d_input, d_weight, d_bias)
}

/// `z` is `[(c_out, a, b, c), input voxel]`; writes each tap to its output voxel.
fn scatter_blocks(
    z: &[f64],
    y: &mut [f64],
    shapes: &ConvShapes,
    k: usize,
    put: impl Fn(&mut f64, f64),
) {
    let [d, h, w] = shapes.in_dims;
    let [_, oh, ow] = shapes.out_dims;
    let in_len = d * h * w;
    let out_len: usize = shapes.out_dims.iter().product();
    for co in 0..shapes.c_out {
        let plane = &mut y[co * out_len..(co + 1) * out_len];
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    let tap = ((co * k + a) * k + b) * k + c;
                    let src = &z[tap * in_len..(tap + 1) * in_len];
                    for iz in 0..d {
                        for iy in 0..h {
                            let row = ((iz * k + a) * oh + iy * k + b) * ow + c;
                            let s = &src[(iz * h + iy) * w..][..w];
                            for (ix, &v) in s.iter().enumerate() {
                                put(&mut plane[row + ix * k], v);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn gather_blocks(dy: &[f64], dz: &mut [f64], shapes: &ConvShapes, k: usize) {
    let [d, h, w] = shapes.in_dims;
    let [_, oh, ow] = shapes.out_dims;
    let in_len = d * h * w;
    let out_len: usize = shapes.out_dims.iter().product();
    for co in 0..shapes.c_out {
        let plane = &dy[co * out_len..(co + 1) * out_len];
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    let tap = ((co * k + a) * k + b) * k + c;
                    let dst = &mut dz[tap * in_len..(tap + 1) * in_len];
                    for iz in 0..d {
                        for iy in 0..h {
                            let row = ((iz * k + a) * oh + iy * k + b) * ow + c;
                            let t = &mut dst[(iz * h + iy) * w..][..w];
                            for (ix, v) in t.iter_mut().enumerate() {
                                *v = plane[row + ix * k];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line reference convolution, one output voxel at a time.
    fn naive_conv(x: &[f64], w: &[f64], shapes: &ConvShapes, g: ConvGeometry) -> Vec<f64> {
        let [d, h, wd] = shapes.in_dims;
        let [od, oh, ow] = shapes.out_dims;
        let k = g.kernel;
        let mut out = vec![0.0; shapes.batch * shapes.c_out * od * oh * ow];
        for n in 0..shapes.batch {
            for co in 0..shapes.c_out {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..shapes.c_in {
                                for a in 0..k {
                                    for b in 0..k {
                                        for c in 0..k {
                                            let iz =
                                                (z * g.stride + a) as isize - g.padding as isize;
                                            let iy =
                                                (y * g.stride + b) as isize - g.padding as isize;
                                            let ix =
                                                (xx * g.stride + c) as isize - g.padding as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((n * shapes.c_in + ci) * d + iz as usize)
                                                * h
                                                + iy as usize)
                                                * wd
                                                + ix as usize;
                                            let wi =
                                                (((co * shapes.c_in + ci) * k + a) * k + b) * k + c;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((n * shapes.c_out + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len)
            .map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale)
            .collect()
    }

    #[test]
    fn im2col_matches_naive_for_several_geometries() {
        for g in [
            ConvGeometry::same(3),
            ConvGeometry::new(2, 2, 0),
            ConvGeometry::same(7),
            ConvGeometry::pointwise(),
            ConvGeometry::new(3, 2, 1),
        ] {
            for c_out in [1, 2, 5] {
                let in_dims = [6, 5, 4];
                let out_dims = g.output_dims(in_dims).unwrap();
                let shapes = ConvShapes {
                    batch: 2,
                    c_in: 3,
                    c_out,
                    in_dims,
                    out_dims,
                };
                let x = ramp(2 * 3 * 120, 2.0);
                let w = ramp(c_out * 3 * g.kernel.pow(3), 1.0);
                let got = conv3d_forward(&x, &w, None, &shapes, g);
                let want = naive_conv(&x, &w, &shapes, g);
                let err = got
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-12, "{g:?} c_out {c_out}: {err}");
            }
        }
    }

    #[test]
    fn transposed_conv_places_each_tap() {
        // one input voxel, one channel: output block is the kernel itself
        let shapes = ConvShapes {
            batch: 1,
            c_in: 1,
            c_out: 1,
            in_dims: [1, 1, 1],
            out_dims: [2, 2, 2],
        };
        let w: Vec<f64> = (0..8).map(f64::from).collect();
        let y = conv_transpose_forward(&[2.0], &w, Some(&[1.0]), &shapes, 2);
        let want: Vec<f64> = w.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(y, want);
    }
}
