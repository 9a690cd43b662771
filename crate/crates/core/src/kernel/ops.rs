//! Elementwise and per-row kernels with hand-written backward passes.

use crate::error::{Error, Result};
use crate::kernel::matrix::{matmul, Matrix};

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward through softmax given the softmax *output* `y`:
/// dx = y ⊙ (g − <g, y>) per row.
pub fn softmax_rows_backward(grad_out: &Matrix, y: &Matrix) -> Result<Matrix> {
    if grad_out.shape() != y.shape() {
        return Err(Error::shape("softmax backward: gradient shape differs"));
    }
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let g = grad_out.row(r);
        let yr = y.row(r);
        let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
        for (o, (&gi, &yi)) in out.row_mut(r).iter_mut().zip(g.iter().zip(yr)) {
            *o = yi * (gi - dot);
        }
    }
    Ok(out)
}

/// Per-row layer normalization with learned gain/bias. Biased row variance.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::shape(format!(
            "layer_norm: gain/bias length {}/{} vs {} cols",
            gain.len(),
            bias.len(),
            x.cols()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::config("layer_norm: eps must be positive"));
    }
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = gain[c] * (row[c] - mean) * inv + bias[c];
        }
    }
    Ok(out)
}

pub struct LayerNormGrads {
    pub grad_x: Matrix,
    pub grad_gain: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

pub fn layer_norm_backward(
    grad_out: &Matrix,
    x: &Matrix,
    gain: &[f64],
    eps: f64,
) -> Result<LayerNormGrads> {
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("layer_norm backward: gradient shape differs"));
    }
    let n = x.cols() as f64;
    let mut grad_x = Matrix::zeros(x.rows(), x.cols());
    let mut grad_gain = vec![0.0; x.cols()];
    let mut grad_bias = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let g = grad_out.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        // xhat and the upstream gradient routed through the gain
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let gh: Vec<f64> = g.iter().zip(gain).map(|(a, b)| a * b).collect();
        for c in 0..x.cols() {
            grad_gain[c] += g[c] * xhat[c];
            grad_bias[c] += g[c];
        }
        let mean_gh = gh.iter().sum::<f64>() / n;
        let mean_gh_xhat = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for (c, o) in grad_x.row_mut(r).iter_mut().enumerate() {
            *o = inv * (gh[c] - mean_gh - xhat[c] * mean_gh_xhat);
        }
    }
    Ok(LayerNormGrads {
        grad_x,
        grad_gain,
        grad_bias,
    })
}

/// Affine map x·w + b with the bias broadcast per row.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols() {
        return Err(Error::shape(format!(
            "linear: bias length {} vs {} output cols",
            b.len(),
            w.cols()
        )));
    }
    let mut out = matmul(x, w)?;
    for r in 0..out.rows() {
        for (o, bj) in out.row_mut(r).iter_mut().zip(b) {
            *o += bj;
        }
    }
    Ok(out)
}

pub struct LinearGrads {
    pub grad_x: Matrix,
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
}

pub fn linear_backward(grad_out: &Matrix, x: &Matrix, w: &Matrix) -> Result<LinearGrads> {
    let (grad_x, grad_w) = super::matrix::matmul_backward(grad_out, x, w)?;
    Ok(LinearGrads {
        grad_x,
        grad_w,
        grad_b: grad_out.col_sums(),
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

pub fn gelu_backward(grad_out: &Matrix, x: &Matrix) -> Result<Matrix> {
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("gelu backward: gradient shape differs"));
    }
    let mut out = grad_out.clone();
    for (o, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *o *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    }
    Ok(out)
}
