//! Training objectives: the averaged MSE used for uniform AWGN and the
//! composite Charbonnier + edge + total-variation loss used for spatially
//! variant and real noise.

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Backward, BackwardCtx, NodeId, Tape};
use crate::tensor::{Shape, Tensor};

/// How the squared norm inside the Charbonnier and edge terms is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormScope {
    /// One square root over the whole batch.
    #[default]
    Batch,
    /// One square root per sample, averaged over the batch.
    PerSample,
}

/// Weights of the composite loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_edge: f64,
    pub lambda_tv: f64,
    pub epsilon: f64,
    pub scope: NormScope,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_edge: 0.1, lambda_tv: 0.05, epsilon: 1e-3, scope: NormScope::Batch }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Range(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda_edge >= 0.0) || !(self.lambda_tv >= 0.0) {
            return Err(Error::Range(format!(
                "loss weights must be >= 0, got edge={} tv={}",
                self.lambda_edge, self.lambda_tv
            )));
        }
        Ok(())
    }
}

fn check_pair(tape: &Tape, pred: NodeId, target: NodeId) -> Result<Shape> {
    tape.check(pred)?;
    tape.check(target)?;
    let (a, b) = (tape.shape(pred), tape.shape(target));
    if a != b {
        return Err(Error::Shape(format!("loss operands differ: {a} vs {b}")));
    }
    Ok(a)
}

/// `1/(2K) * sum_j ||pred_j - target_j||^2` with K the batch size.
pub fn mse_loss(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let shape = check_pair(tape, pred, target)?;
    let diff = ops::sub(tape, pred, target)?;
    let sq = ops::sum_squares(tape, diff)?;
    ops::scale(tape, sq, 1.0 / (2.0 * shape.n as f64))
}

/// `sqrt(||residual||^2 + eps^2)` under the given reduction scope.
fn smooth_norm(tape: &mut Tape, residual: NodeId, epsilon: f64, scope: NormScope) -> Result<NodeId> {
    match scope {
        NormScope::Batch => {
            let sq = ops::sum_squares(tape, residual)?;
            let shifted = ops::affine(tape, sq, 1.0, epsilon * epsilon)?;
            ops::sqrt(tape, shifted)
        }
        NormScope::PerSample => {
            let n = tape.shape(residual).n;
            let sq = ops::sample_sum_squares(tape, residual)?;
            let shifted = ops::affine(tape, sq, 1.0, epsilon * epsilon)?;
            let root = ops::sqrt(tape, shifted)?;
            let total = ops::sum(tape, root)?;
            ops::scale(tape, total, 1.0 / n as f64)
        }
    }
}

pub fn charbonnier_loss(tape: &mut Tape, pred: NodeId, target: NodeId, epsilon: f64) -> Result<NodeId> {
    charbonnier_loss_scoped(tape, pred, target, epsilon, NormScope::Batch)
}

pub fn charbonnier_loss_scoped(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    epsilon: f64,
    scope: NormScope,
) -> Result<NodeId> {
    check_pair(tape, pred, target)?;
    let diff = ops::sub(tape, pred, target)?;
    smooth_norm(tape, diff, epsilon, scope)
}

fn laplacian_apply(t: &Tensor) -> Tensor {
    let s = t.shape();
    let d = t.data();
    let mut out = vec![0.0; s.numel()];
    for plane in 0..s.n * s.c {
        let b = plane * s.plane();
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = -4.0 * d[b + y * s.w + x];
                if y > 0 {
                    acc += d[b + (y - 1) * s.w + x];
                }
                if y + 1 < s.h {
                    acc += d[b + (y + 1) * s.w + x];
                }
                if x > 0 {
                    acc += d[b + y * s.w + x - 1];
                }
                if x + 1 < s.w {
                    acc += d[b + y * s.w + x + 1];
                }
                out[b + y * s.w + x] = acc;
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

struct LaplacianOp;

impl Backward for LaplacianOp {
    fn name(&self) -> &'static str {
        "laplacian"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        // symmetric stencil with zero padding is self-adjoint
        Ok(vec![Some(laplacian_apply(ctx.grad))])
    }
}

/// Per-channel 5-point Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with zero padding.
pub fn laplacian(tape: &mut Tape, img: NodeId) -> Result<NodeId> {
    tape.check(img)?;
    let s = tape.shape(img);
    if s.h < 3 || s.w < 3 {
        return Err(Error::Shape(format!("laplacian needs at least 3x3 planes, got {s}")));
    }
    let value = laplacian_apply(tape.value(img));
    tape.record(Box::new(LaplacianOp), &[img], value)
}

pub fn edge_loss(tape: &mut Tape, pred: NodeId, target: NodeId, epsilon: f64) -> Result<NodeId> {
    edge_loss_scoped(tape, pred, target, epsilon, NormScope::Batch)
}

/// `sqrt(||lap(pred) - lap(target)||^2 + eps^2)`.
pub fn edge_loss_scoped(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    epsilon: f64,
    scope: NormScope,
) -> Result<NodeId> {
    check_pair(tape, pred, target)?;
    let lp = laplacian(tape, pred)?;
    let lt = laplacian(tape, target)?;
    let diff = ops::sub(tape, lp, lt)?;
    smooth_norm(tape, diff, epsilon, scope)
}

struct TvOp;

impl Backward for TvOp {
    fn name(&self) -> &'static str {
        "tv"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let s = x.shape();
        let g = 2.0 * ctx.grad.data()[0];
        let d = x.data();
        let mut dx = vec![0.0; s.numel()];
        for plane in 0..s.n * s.c {
            let b = plane * s.plane();
            for y in 0..s.h {
                for xx in 0..s.w {
                    let i = b + y * s.w + xx;
                    if xx + 1 < s.w {
                        let diff = g * (d[i + 1] - d[i]);
                        dx[i + 1] += diff;
                        dx[i] -= diff;
                    }
                    if y + 1 < s.h {
                        let diff = g * (d[i + s.w] - d[i]);
                        dx[i + s.w] += diff;
                        dx[i] -= diff;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(s, dx)?)])
    }
}

/// Anisotropic squared total variation: forward differences along both axes,
/// valid positions only.
pub fn tv_loss(tape: &mut Tape, sigma_map: NodeId) -> Result<NodeId> {
    tape.check(sigma_map)?;
    let t = tape.value(sigma_map);
    let s = t.shape();
    if s.plane() < 2 {
        return Err(Error::Shape(format!("tv_loss needs at least two pixels per plane, got {s}")));
    }
    let d = t.data();
    let mut total = 0.0;
    for plane in 0..s.n * s.c {
        let b = plane * s.plane();
        for y in 0..s.h {
            for x in 0..s.w {
                let i = b + y * s.w + x;
                if x + 1 < s.w {
                    total += (d[i + 1] - d[i]).powi(2);
                }
                if y + 1 < s.h {
                    total += (d[i + s.w] - d[i]).powi(2);
                }
            }
        }
    }
    tape.record(Box::new(TvOp), &[sigma_map], Tensor::scalar(total))
}

/// `charbonnier + lambda_edge * edge + lambda_tv * tv(sigma_map)`.
pub fn total_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    sigma_map: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    weights.validate()?;
    let mut loss = charbonnier_loss_scoped(tape, pred, target, weights.epsilon, weights.scope)?;
    if weights.lambda_edge != 0.0 {
        let edge = edge_loss_scoped(tape, pred, target, weights.epsilon, weights.scope)?;
        let edge = ops::scale(tape, edge, weights.lambda_edge)?;
        loss = ops::add(tape, loss, edge)?;
    }
    if weights.lambda_tv != 0.0 {
        let tv = tv_loss(tape, sigma_map)?;
        let tv = ops::scale(tape, tv, weights.lambda_tv)?;
        loss = ops::add(tape, loss, tv)?;
    }
    Ok(loss)
}
