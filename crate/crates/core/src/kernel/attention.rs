//! Multi-head cross-attention: per head softmax(Q Kᵀ / √d) V, heads
//! concatenated, then output-projected.

use crate::error::{Error, Result};
use crate::kernel::matrix::{matmul, matmul_backward, Matrix};
use crate::kernel::ops::{linear, linear_backward, softmax_rows, softmax_rows_backward};
use crate::kernel::rng::Rng;

pub const INIT_STD: f64 = 0.02;

/// Projection weights of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
}

impl AttentionWeights {
    /// Truncated-normal q/k/v, zero output projection so the residual
    /// branch starts as the identity.
    pub fn init(q_dim: usize, kv_dim: usize, model_dim: usize, rng: &mut Rng) -> AttentionWeights {
        AttentionWeights {
            wq: Matrix::from_fn(q_dim, model_dim, |_, _| rng.normal_trunc(INIT_STD)),
            bq: vec![0.0; model_dim],
            wk: Matrix::from_fn(kv_dim, model_dim, |_, _| rng.normal_trunc(INIT_STD)),
            bk: vec![0.0; model_dim],
            wv: Matrix::from_fn(kv_dim, model_dim, |_, _| rng.normal_trunc(INIT_STD)),
            bv: vec![0.0; model_dim],
            wo: Matrix::zeros(model_dim, model_dim),
            bo: vec![0.0; model_dim],
        }
    }

    /// Every projection random, including the output; used by gradient checks
    /// so no path starts dead.
    pub fn init_random(
        q_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        rng: &mut Rng,
    ) -> AttentionWeights {
        let mut w = AttentionWeights::init(q_dim, kv_dim, model_dim, rng);
        w.wo = Matrix::from_fn(model_dim, model_dim, |_, _| rng.normal_trunc(INIT_STD));
        for b in w.bo.iter_mut() {
            *b = rng.normal_trunc(INIT_STD);
        }
        w
    }

    pub fn model_dim(&self) -> usize {
        self.wq.cols()
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q_proj: Matrix,
    pub k_proj: Matrix,
    pub v_proj: Matrix,
    /// Per-head attention probabilities, each q_rows × k_rows.
    pub probs: Vec<Matrix>,
    /// Concatenated head outputs before the output projection.
    pub context: Matrix,
}

fn check_dims(
    q_in: &Matrix,
    k_in: &Matrix,
    v_in: &Matrix,
    w: &AttentionWeights,
    heads: usize,
) -> Result<usize> {
    let model_dim = w.model_dim();
    if heads == 0 || !model_dim.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "attention: {heads} heads must divide model dim {model_dim}"
        )));
    }
    if q_in.cols() != w.wq.rows() || k_in.cols() != w.wk.rows() || v_in.cols() != w.wv.rows() {
        return Err(Error::shape(format!(
            "attention: inputs {}x{}/{}x{}/{}x{} vs projections {}x{}/{}x{}/{}x{}",
            q_in.rows(),
            q_in.cols(),
            k_in.rows(),
            k_in.cols(),
            v_in.rows(),
            v_in.cols(),
            w.wq.rows(),
            w.wq.cols(),
            w.wk.rows(),
            w.wk.cols(),
            w.wv.rows(),
            w.wv.cols()
        )));
    }
    if k_in.rows() != v_in.rows() {
        return Err(Error::shape(format!(
            "attention: {} keys vs {} values",
            k_in.rows(),
            v_in.rows()
        )));
    }
    Ok(model_dim / heads)
}

pub fn mh_cross_attention(
    q_in: &Matrix,
    k_in: &Matrix,
    v_in: &Matrix,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Matrix> {
    Ok(mh_cross_attention_with_cache(q_in, k_in, v_in, w, heads)?.0)
}

pub fn mh_cross_attention_with_cache(
    q_in: &Matrix,
    k_in: &Matrix,
    v_in: &Matrix,
    w: &AttentionWeights,
    heads: usize,
) -> Result<(Matrix, AttentionCache)> {
    let head_dim = check_dims(q_in, k_in, v_in, w, heads)?;
    let q_proj = linear(q_in, &w.wq, &w.bq)?;
    let k_proj = linear(k_in, &w.wk, &w.bk)?;
    let v_proj = linear(v_in, &w.wv, &w.bv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut probs = Vec::with_capacity(heads);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = q_proj.slice_cols(h * head_dim, (h + 1) * head_dim);
        let ks = k_proj.slice_cols(h * head_dim, (h + 1) * head_dim);
        let vs = v_proj.slice_cols(h * head_dim, (h + 1) * head_dim);
        let scores = matmul(&qs, &ks.transpose())?.scale(scale);
        let p = softmax_rows(&scores);
        head_outs.push(matmul(&p, &vs)?);
        probs.push(p);
    }
    let context = Matrix::concat_cols(&head_outs)?;
    let out = linear(&context, &w.wo, &w.bo)?;
    Ok((
        out,
        AttentionCache {
            q_proj,
            k_proj,
            v_proj,
            probs,
            context,
        },
    ))
}

/// Gradients for the attention weights and its three inputs.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub q_in: Matrix,
    pub k_in: Matrix,
    pub v_in: Matrix,
}

pub fn mh_cross_attention_backward(
    grad_out: &Matrix,
    q_in: &Matrix,
    k_in: &Matrix,
    v_in: &Matrix,
    w: &AttentionWeights,
    heads: usize,
    cache: &AttentionCache,
) -> Result<AttentionGrads> {
    let head_dim = check_dims(q_in, k_in, v_in, w, heads)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let out_grads = linear_backward(grad_out, &cache.context, &w.wo)?;
    let grad_context = out_grads.grad_x;

    let mut grad_q_proj = Matrix::zeros(cache.q_proj.rows(), cache.q_proj.cols());
    let mut grad_k_proj = Matrix::zeros(cache.k_proj.rows(), cache.k_proj.cols());
    let mut grad_v_proj = Matrix::zeros(cache.v_proj.rows(), cache.v_proj.cols());
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qs = cache.q_proj.slice_cols(lo, hi);
        let ks = cache.k_proj.slice_cols(lo, hi);
        let vs = cache.v_proj.slice_cols(lo, hi);
        let g_ctx = grad_context.slice_cols(lo, hi);
        let p = &cache.probs[h];

        // context_h = p · v_h
        let (grad_p, grad_vs) = matmul_backward(&g_ctx, p, &vs)?;
        let grad_scores = softmax_rows_backward(&grad_p, p)?.scale(scale);
        // scores = q_h · k_hᵀ (scale already folded into grad_scores)
        let grad_qs = matmul(&grad_scores, &ks)?;
        let grad_ks = matmul(&grad_scores.transpose(), &qs)?;

        for r in 0..grad_qs.rows() {
            grad_q_proj.row_mut(r)[lo..hi].copy_from_slice(grad_qs.row(r));
        }
        for r in 0..grad_ks.rows() {
            grad_k_proj.row_mut(r)[lo..hi].copy_from_slice(grad_ks.row(r));
            grad_v_proj.row_mut(r)[lo..hi].copy_from_slice(grad_vs.row(r));
        }
    }

    let q_grads = linear_backward(&grad_q_proj, q_in, &w.wq)?;
    let k_grads = linear_backward(&grad_k_proj, k_in, &w.wk)?;
    let v_grads = linear_backward(&grad_v_proj, v_in, &w.wv)?;

    Ok(AttentionGrads {
        wq: q_grads.grad_w,
        bq: q_grads.grad_b,
        wk: k_grads.grad_w,
        bk: k_grads.grad_b,
        wv: v_grads.grad_w,
        bv: v_grads.grad_b,
        wo: out_grads.grad_w,
        bo: out_grads.grad_b,
        q_in: q_grads.grad_x,
        k_in: k_grads.grad_x,
        v_in: v_grads.grad_x,
    })
}
