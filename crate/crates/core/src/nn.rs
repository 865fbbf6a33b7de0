//! Differentiable layer primitives: dilated convolution, 2x2 max-pooling,
//! bilinear 2x upsampling, batch normalization, activations, channel
//! concatenation and the additive skip join.


use crate::error::{Error, Result};
use crate::kernels::{conv_backward, conv_forward, conv_layout};
use crate::tape::{Backward, BackwardCtx, NodeId, Precision, Tape};
use crate::tensor::{Shape, Tensor};

pub use crate::ops::{add, concat_channels};

/// Convolution geometry. Square kernels only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// 3x3, stride 1, padding equal to the dilation: spatial size is preserved.
    pub fn same(dilation: usize) -> Self {
        ConvGeometry { kernel: 3, dilation, stride: 1, padding: dilation }
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        if self.kernel == 0 || self.dilation == 0 || self.stride == 0 {
            return Err(Error::Shape(format!("degenerate convolution geometry {self:?}")));
        }
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return Err(Error::Shape(format!("input length {len} too small for {self:?}")));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Weights and bias of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `out x in x k x k`
    pub weight: Tensor,
    /// `1 x out x 1 x 1`
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
}

impl ConvParams {
    pub fn zeros(in_channels: usize, out_channels: usize, geometry: ConvGeometry, bias: bool) -> Self {
        let k = geometry.kernel;
        ConvParams {
            weight: Tensor::zeros(Shape::new(out_channels, in_channels, k, k)),
            bias: bias.then(|| Tensor::vector(vec![0.0; out_channels])),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

struct Conv2dOp {
    geometry: ConvGeometry,
    precision: Precision,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (xs, ws) = (x.shape(), w.shape());
        let layout = conv_layout(xs, ws, self.geometry)?;
        let (co, p) = (ws.n, layout.cols());
        let gy = ctx.grad.data();
        let (grad_x, grad_w) = match self.precision {
            Precision::F64 => conv_backward::<f64>(x, w, gy, &layout, ctx.needs[0], ctx.needs[1]),
            Precision::F32 => conv_backward::<f32>(x, w, gy, &layout, ctx.needs[0], ctx.needs[1]),
        };
        let mut out = vec![
            grad_x.map(|d| Tensor::new(xs, d)).transpose()?,
            grad_w.map(|d| Tensor::new(ws, d)).transpose()?,
        ];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| {
                let mut db = vec![0.0; co];
                for n in 0..xs.n {
                    for (o, acc) in db.iter_mut().enumerate() {
                        *acc += gy[(n * co + o) * p..(n * co + o + 1) * p].iter().sum::<f64>();
                    }
                }
                Tensor::vector(db)
            }));
        }
        Ok(out)
    }
}

/// Cross-correlation of `x` (n x c_in x h x w) with `weight` (c_out x c_in x k x k),
/// plus an optional per-channel `bias`. Kernel arithmetic follows the tape's
/// [`Precision`].
pub fn conv2d(
    tape: &mut Tape,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    geometry: ConvGeometry,
) -> Result<NodeId> {
    tape.check(x)?;
    tape.check(weight)?;
    let (xt, wt) = (tape.value(x), tape.value(weight));
    let (xs, ws) = (xt.shape(), wt.shape());
    let layout = conv_layout(xs, ws, geometry)?;
    let co = ws.n;
    let bias_vals = match bias {
        Some(b) => {
            tape.check(b)?;
            let bt = tape.value(b);
            if bt.len() != co {
                return Err(Error::Shape(format!("bias has {} entries, expected {co}", bt.len())));
            }
            Some(bt.data())
        }
        None => None,
    };
    let precision = tape.precision();
    let data = match precision {
        Precision::F64 => conv_forward::<f64>(xt.data(), xs.n, wt.data(), co, bias_vals, &layout),
        Precision::F32 => conv_forward::<f32>(xt.data(), xs.n, wt.data(), co, bias_vals, &layout),
    };
    let value = Tensor::new(Shape::new(xs.n, co, layout.oh, layout.ow), data)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    tape.record(Box::new(Conv2dOp { geometry, precision }), &inputs, value)
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2x2"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let mut dx = Tensor::zeros(ctx.inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(ctx.grad.data()) {
            d[src] += g;
        }
        Ok(vec![Some(dx)])
    }
}

/// 2x2 max-pooling with stride 2. Ties resolve to the first element in row-major order.
pub fn maxpool2x2(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    tape.check(x)?;
    let t = tape.value(x);
    let s = t.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::Shape(format!("maxpool2x2 needs even spatial dims, got {s}")));
    }
    let out = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut values = Vec::with_capacity(out.numel());
    let mut argmax = Vec::with_capacity(out.numel());
    let d = t.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                values.push(d[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::new(out, values)?;
    tape.record(Box::new(MaxPoolOp { argmax }), &[x], value)
}

/// Two-tap interpolation weights for doubling a length with half-pixel centers.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct UpsampleOp;

impl Backward for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_bilinear2x"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let s = ctx.inputs[0].shape();
        let (ty, tx) = (bilinear_taps(s.h), bilinear_taps(s.w));
        let (oh, ow) = (2 * s.h, 2 * s.w);
        let mut dx = Tensor::zeros(s);
        let g = ctx.grad.data();
        let d = dx.data_mut();
        for plane in 0..s.n * s.c {
            let (ib, ob) = (plane * s.plane(), plane * oh * ow);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g[ob + oy * ow + ox];
                    d[ib + y0 * s.w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    d[ib + y0 * s.w + x1] += gv * (1.0 - fy) * fx;
                    d[ib + y1 * s.w + x0] += gv * fy * (1.0 - fx);
                    d[ib + y1 * s.w + x1] += gv * fy * fx;
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Bilinear 2x upsampling, half-pixel centers (align-corners off), edge-clamped.
pub fn upsample_bilinear2x(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    tape.check(x)?;
    let t = tape.value(x);
    let s = t.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::Shape(format!("upsample needs non-empty spatial dims, got {s}")));
    }
    let (ty, tx) = (bilinear_taps(s.h), bilinear_taps(s.w));
    let out = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let d = t.data();
    let mut values = Vec::with_capacity(out.numel());
    for plane in 0..s.n * s.c {
        let ib = plane * s.plane();
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = d[ib + y0 * s.w + x0] * (1.0 - fx) + d[ib + y0 * s.w + x1] * fx;
                let bottom = d[ib + y1 * s.w + x0] * (1.0 - fx) + d[ib + y1 * s.w + x1] * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let value = Tensor::new(out, values)?;
    tape.record(Box::new(UpsampleOp), &[x], value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch-normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    /// Unbiased running variance.
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::vector(vec![1.0; channels]),
            beta: Tensor::vector(vec![0.0; channels]),
            running_mean: Tensor::vector(vec![0.0; channels]),
            running_var: Tensor::vector(vec![1.0; channels]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

struct BatchNormOp {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl Backward for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
        let s = x.shape();
        let plane = s.plane();
        let count = (s.n * plane) as f64;
        let (xd, gd) = (x.data(), ctx.grad.data());
        // sum g and sum g * (x - mean), per channel
        let mut dbeta = vec![0.0; s.c];
        let mut gx = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                let (g, xs) = (&gd[base..base + plane], &xd[base..base + plane]);
                dbeta[c] += lane_sum(g.iter().copied());
                gx[c] += lane_sum(g.iter().zip(xs).map(|(&g, &x)| g * (x - self.mean[c])));
            }
        }
        let dgamma: Vec<f64> = gx.iter().zip(&self.inv_std).map(|(v, is)| v * is).collect();
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; s.numel()];
            for c in 0..s.c {
                let k = gamma.data()[c] * self.inv_std[c];
                // dx = a * g + b * x + c0
                let (a, b, c0) = if self.train {
                    let b = -k * self.inv_std[c] * dgamma[c] / count;
                    (k, b, -k * dbeta[c] / count - b * self.mean[c])
                } else {
                    (k, 0.0, 0.0)
                };
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    for ((d, &g), &x) in dx[base..base + plane].iter_mut().zip(&gd[base..base + plane]).zip(&xd[base..base + plane]) {
                        *d = a * g + b * x + c0;
                    }
                }
            }
            Tensor::new(s, dx).expect("same shape")
        });
        Ok(vec![dx, Some(Tensor::vector(dgamma)), Some(Tensor::vector(dbeta))])
    }
}

/// Sum with eight interleaved partial sums (fixed order, vectorizable).
fn lane_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut lanes = [0.0; 8];
    for (i, v) in values.enumerate() {
        lanes[i % 8] += v;
    }
    lanes.iter().sum()
}

/// Batch normalization over (n, h, w) per channel. In train mode the batch
/// statistics are used and the running statistics in `state` are updated.
pub fn batch_norm(
    tape: &mut Tape,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<NodeId> {
    for id in [x, gamma, beta] {
        tape.check(id)?;
    }
    let s = tape.shape(x);
    let c = state.channels();
    if s.c != c || tape.value(gamma).len() != c || tape.value(beta).len() != c {
        return Err(Error::Shape(format!("batch_norm: input {s} vs {c} normalized channels")));
    }
    let count = s.n * s.plane();
    let xd = tape.value(x).data();
    let plane = s.plane();
    let (mean, inv_std) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::Numeric(format!("batch_norm in train mode needs >= 2 values per channel, got {count}")));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..s.n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let base = (n * c + ch) * plane;
                    *m += lane_sum(xd[base..base + plane].iter().copied());
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for n in 0..s.n {
                for (ch, v) in var.iter_mut().enumerate() {
                    let base = (n * c + ch) * plane;
                    *v += lane_sum(xd[base..base + plane].iter().map(|&x| (x - mean[ch]).powi(2)));
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let m = state.momentum;
            let unbias = count as f64 / (count as f64 - 1.0);
            for ch in 0..c {
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = (1.0 - m) * *rm + m * mean[ch];
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = (1.0 - m) * *rv + m * var[ch] * unbias;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
            (mean, inv_std)
        }
        Mode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect(),
        ),
    };
    let (g, b) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let scale = g[ch] * inv_std[ch];
            let shift = b[ch] - scale * mean[ch];
            out.extend(xd[base..base + plane].iter().map(|&v| scale * v + shift));
        }
    }
    let value = Tensor::new(s, out)?;
    let op = BatchNormOp { mean, inv_std, train: mode == Mode::Train };
    tape.record(Box::new(op), &[x, gamma, beta], value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

pub fn activation(tape: &mut Tape, x: NodeId, kind: Activation) -> Result<NodeId> {
    match kind {
        Activation::Relu => crate::ops::relu(tape, x),
        Activation::Tanh => crate::ops::tanh(tape, x),
    }
}
