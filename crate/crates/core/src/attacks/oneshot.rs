//! Closed-form target recovery from the last fully connected layer.
//!
//! For a single sample with mean-reduced MSE and a head `y_hat = x W + b`
//! (weight stored `(in, out)`), the head gradients are `dL/db = (2/N)(y_hat - y)`
//! and `dL/dW = x^T dL/db`. Any nonzero coordinate of `dL/db` therefore
//! reveals `x`, and with it `y = x W + b - (N/2) dL/db`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::federation::GradientCapture;
use crate::models::Checkpoint;

pub const PIVOT_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct OneShot {
    /// Recovered targets, shape `(1, F, 1)`.
    pub targets: Tensor,
    /// Recovered input of the head layer.
    pub head_input: Vec<f64>,
    pub pivot: usize,
}

/// Recovers `(x, y)` from raw head quantities; `w` is `(in, out)` row-major.
pub fn recover_from_head(w: &[f64], b: &[f64], grad_w: &[f64], grad_b: &[f64]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let out = b.len();
    if out == 0 || w.len() % out != 0 || grad_w.len() != w.len() || grad_b.len() != out {
        return Err(Error::shape(
            "one_shot",
            format!("weight {} / bias {} / grads {} {}", w.len(), out, grad_w.len(), grad_b.len()),
        ));
    }
    let fan_in = w.len() / out;
    let (pivot, gmax) = grad_b
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
    if !(gmax > PIVOT_EPS) {
        return Err(Error::OneShotDegenerate(format!(
            "max |dL/db| = {gmax:e} is below {PIVOT_EPS:e}"
        )));
    }
    let gp = grad_b[pivot];
    let x: Vec<f64> = (0..fan_in).map(|j| grad_w[j * out + pivot] / gp).collect();
    let half_n = out as f64 / 2.0;
    let y = (0..out)
        .map(|i| {
            let wx: f64 = (0..fan_in).map(|j| x[j] * w[j * out + i]).sum();
            wx + b[i] - half_n * grad_b[i]
        })
        .collect();
    Ok((x, y, pivot))
}

/// `max |dL/dW - x^T dL/db|`; near zero for genuine single-sample captures.
pub fn rank1_residual(grad_w: &[f64], grad_b: &[f64], x: &[f64]) -> f64 {
    let out = grad_b.len();
    grad_w
        .iter()
        .enumerate()
        .map(|(k, v)| (v - x[k / out] * grad_b[k % out]).abs())
        .fold(0.0, f64::max)
}

pub fn one_shot_targets(capture: &GradientCapture, ckpt: &Checkpoint) -> Result<OneShot> {
    if capture.batch_size != 1 {
        return Err(Error::OneShotDegenerate(format!(
            "needs batch size 1, capture has {}",
            capture.batch_size
        )));
    }
    let head = ckpt.model.fc_head().ok_or_else(|| {
        Error::OneShotDegenerate(format!(
            "{} has no fully connected output layer",
            ckpt.model.spec().architecture
        ))
    })?;
    let grads = capture.grad_tensors(&ckpt.model)?;
    let p = ckpt.params.tensors();
    let g = grads.tensors();
    let (x, y, pivot) = recover_from_head(
        p[head.weight].data(),
        p[head.bias].data(),
        g[head.weight].data(),
        g[head.bias].data(),
    )?;
    let f = y.len();
    Ok(OneShot {
        targets: Tensor::new(vec![1, f, 1], y)?,
        head_input: x,
        pivot,
    })
}
