//! Elementwise and reduction primitives recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, NodeId, Tape};
use crate::tensor::{Shape, Tensor};

fn same_shape(tape: &Tape, a: NodeId, b: NodeId, op: &str) -> Result<Shape> {
    tape.check(a)?;
    tape.check(b)?;
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("{op}: operand shapes differ ({sa} vs {sb})")));
    }
    Ok(sa)
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_with keeps shape")
}

struct AddOp;

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(ctx.needs.iter().map(|&n| n.then(|| ctx.grad.clone())).collect())
    }
}

/// Elementwise `a + b` for identical shapes.
pub fn add(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape(tape, a, b, "add")?;
    let value = zip_with(tape.value(a), tape.value(b), |x, y| x + y);
    tape.record(Box::new(AddOp), &[a, b], value)
}

struct SubOp;

impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![ctx.needs[0].then(|| ctx.grad.clone()), ctx.needs[1].then(|| ctx.grad.map(|g| -g))])
    }
}

/// Elementwise `a - b`.
pub fn sub(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape(tape, a, b, "sub")?;
    let value = zip_with(tape.value(a), tape.value(b), |x, y| x - y);
    tape.record(Box::new(SubOp), &[a, b], value)
}

struct MulOp;

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        Ok(vec![
            ctx.needs[0].then(|| zip_with(ctx.grad, b, |g, y| g * y)),
            ctx.needs[1].then(|| zip_with(ctx.grad, a, |g, x| g * x)),
        ])
    }
}

/// Elementwise product.
pub fn mul(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape(tape, a, b, "mul")?;
    let value = zip_with(tape.value(a), tape.value(b), |x, y| x * y);
    tape.record(Box::new(MulOp), &[a, b], value)
}

struct AffineOp {
    scale: f64,
}

impl Backward for AffineOp {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.map(|g| g * self.scale))])
    }
}

/// `scale * x + shift` with constant coefficients.
pub fn affine(tape: &mut Tape, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
    tape.check(x)?;
    let value = tape.value(x).map(|v| scale * v + shift);
    tape.record(Box::new(AffineOp { scale }), &[x], value)
}

pub fn scale(tape: &mut Tape, x: NodeId, factor: f64) -> Result<NodeId> {
    affine(tape, x, factor, 0.0)
}

struct SumOp;

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad.data()[0];
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
    }
}

/// Sum of all entries as a scalar.
pub fn sum(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    tape.check(x)?;
    let value = Tensor::scalar(tape.value(x).sum());
    tape.record(Box::new(SumOp), &[x], value)
}

struct SumSquaresOp;

impl Backward for SumSquaresOp {
    fn name(&self) -> &'static str {
        "sum_squares"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad.data()[0];
        Ok(vec![Some(ctx.inputs[0].map(|v| 2.0 * g * v))])
    }
}

/// Squared Euclidean norm of all entries.
pub fn sum_squares(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    tape.check(x)?;
    let value = Tensor::scalar(tape.value(x).data().iter().map(|v| v * v).sum());
    tape.record(Box::new(SumSquaresOp), &[x], value)
}

struct SampleSumSquaresOp;

impl Backward for SampleSumSquaresOp {
    fn name(&self) -> &'static str {
        "sample_sum_squares"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let per = x.shape().sample();
        let data = x.data().iter().enumerate().map(|(i, v)| 2.0 * ctx.grad.data()[i / per] * v).collect();
        Ok(vec![Some(Tensor::new(x.shape(), data)?)])
    }
}

/// Per-sample squared norms as an `n x 1 x 1 x 1` tensor.
pub fn sample_sum_squares(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    tape.check(x)?;
    let t = tape.value(x);
    let per = t.shape().sample();
    let data = t.data().chunks(per.max(1)).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let value = Tensor::new(Shape::new(t.shape().n, 1, 1, 1), data)?;
    tape.record(Box::new(SampleSumSquaresOp), &[x], value)
}

struct SqrtOp;

impl Backward for SqrtOp {
    fn name(&self) -> &'static str {
        "sqrt"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(zip_with(ctx.grad, ctx.output, |g, s| g * 0.5 / s))])
    }
}

/// Elementwise square root; inputs must be strictly positive.
pub fn sqrt(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    tape.check(x)?;
    let t = tape.value(x);
    if let Some(v) = t.data().iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Numeric(format!("sqrt of non-positive value {v}")));
    }
    let value = t.map(f64::sqrt);
    tape.record(Box::new(SqrtOp), &[x], value)
}

struct ReluOp;

impl Backward for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        // subgradient 0 at 0
        Ok(vec![Some(zip_with(ctx.grad, ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))])
    }
}

pub fn relu(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    tape.check(x)?;
    let value = tape.value(x).map(|v| v.max(0.0));
    tape.record(Box::new(ReluOp), &[x], value)
}

struct TanhOp;

impl Backward for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(zip_with(ctx.grad, ctx.output, |g, t| g * (1.0 - t * t)))])
    }
}

pub fn tanh(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    tape.check(x)?;
    let value = tape.value(x).map(f64::tanh);
    tape.record(Box::new(TanhOp), &[x], value)
}

struct ConcatOp {
    split: usize,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let total = ctx.grad.shape().c;
        Ok(vec![
            if ctx.needs[0] { Some(ctx.grad.slice_channels(0, self.split)?) } else { None },
            if ctx.needs[1] { Some(ctx.grad.slice_channels(self.split, total - self.split)?) } else { None },
        ])
    }
}

/// Channel-wise concatenation, `a`'s channels first.
pub fn concat_channels(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    tape.check(a)?;
    tape.check(b)?;
    let (ta, tb) = (tape.value(a), tape.value(b));
    let (sa, sb) = (ta.shape(), tb.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::Shape(format!("concat_channels: {sa} and {sb} disagree on n/h/w")));
    }
    let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&ta.data()[n * sa.sample()..(n + 1) * sa.sample()]);
        data.extend_from_slice(&tb.data()[n * sb.sample()..(n + 1) * sb.sample()]);
    }
    let value = Tensor::new(out, data)?;
    tape.record(Box::new(ConcatOp { split: sa.c }), &[a, b], value)
}
