//! Analytic backward through the aggregation stack. Selection indices are
//! discrete and carry no gradient; the query path instead scatters row
//! gradients back into the selected feature rows.

use crate::connector::{AggregatorWeights, ConnectorConfig, ForwardTrace, LN_EPS};
use crate::error::{Error, Result};
use crate::kernel::{
    gelu_backward, layer_norm_backward, linear_backward, mh_cross_attention_backward,
    AttentionGrads, Matrix,
};

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub ln_attn_gain: Vec<f64>,
    pub ln_attn_bias: Vec<f64>,
    pub attn: AttentionGrads,
    pub ln_ff_gain: Vec<f64>,
    pub ln_ff_bias: Vec<f64>,
    pub ff_w1: Matrix,
    pub ff_b1: Vec<f64>,
    pub ff_w2: Matrix,
    pub ff_b2: Vec<f64>,
}

/// Gradients for every parameter plus the feature-map input, with the two
/// routes into the features kept separately: the query path (scattered
/// through the gather) and the key/value path (through the adapted map).
#[derive(Debug, Clone)]
pub struct AggregatorGrads {
    pub adapter_w: Matrix,
    pub adapter_b: Vec<f64>,
    pub layers: Vec<LayerGrads>,
    pub proj_w1: Matrix,
    pub proj_b1: Vec<f64>,
    pub proj_w2: Matrix,
    pub proj_b2: Vec<f64>,
    pub query_bank: Option<Matrix>,
    pub queries_pre: Matrix,
    pub features: Matrix,
    pub features_query_path: Matrix,
    pub features_kv_path: Matrix,
}

impl AggregatorGrads {
    /// Weight gradients in the same order and under the same names as
    /// `AggregatorWeights::tensors`.
    pub fn weight_tensors(&self) -> Vec<(String, super::TensorRef<'_>)> {
        use super::TensorRef;
        let mut out: Vec<(String, TensorRef<'_>)> = vec![
            ("adapter.w".into(), TensorRef::Mat(&self.adapter_w)),
            ("adapter.b".into(), TensorRef::Vec(&self.adapter_b)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln_attn.gain"), TensorRef::Vec(&l.ln_attn_gain)));
            out.push((format!("layers.{i}.ln_attn.bias"), TensorRef::Vec(&l.ln_attn_bias)));
            out.push((format!("layers.{i}.attn.wq"), TensorRef::Mat(&l.attn.wq)));
            out.push((format!("layers.{i}.attn.bq"), TensorRef::Vec(&l.attn.bq)));
            out.push((format!("layers.{i}.attn.wk"), TensorRef::Mat(&l.attn.wk)));
            out.push((format!("layers.{i}.attn.bk"), TensorRef::Vec(&l.attn.bk)));
            out.push((format!("layers.{i}.attn.wv"), TensorRef::Mat(&l.attn.wv)));
            out.push((format!("layers.{i}.attn.bv"), TensorRef::Vec(&l.attn.bv)));
            out.push((format!("layers.{i}.attn.wo"), TensorRef::Mat(&l.attn.wo)));
            out.push((format!("layers.{i}.attn.bo"), TensorRef::Vec(&l.attn.bo)));
            out.push((format!("layers.{i}.ln_ff.gain"), TensorRef::Vec(&l.ln_ff_gain)));
            out.push((format!("layers.{i}.ln_ff.bias"), TensorRef::Vec(&l.ln_ff_bias)));
            out.push((format!("layers.{i}.ff.w1"), TensorRef::Mat(&l.ff_w1)));
            out.push((format!("layers.{i}.ff.b1"), TensorRef::Vec(&l.ff_b1)));
            out.push((format!("layers.{i}.ff.w2"), TensorRef::Mat(&l.ff_w2)));
            out.push((format!("layers.{i}.ff.b2"), TensorRef::Vec(&l.ff_b2)));
        }
        out.push(("proj.w1".into(), TensorRef::Mat(&self.proj_w1)));
        out.push(("proj.b1".into(), TensorRef::Vec(&self.proj_b1)));
        out.push(("proj.w2".into(), TensorRef::Mat(&self.proj_w2)));
        out.push(("proj.b2".into(), TensorRef::Vec(&self.proj_b2)));
        if let Some(bank) = &self.query_bank {
            out.push(("query_bank".into(), TensorRef::Mat(bank)));
        }
        out
    }

    /// Elementwise accumulation; shapes must match.
    pub fn add_assign(&mut self, other: &AggregatorGrads) -> Result<()> {
        fn addv(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.adapter_w.add_assign(&other.adapter_w)?;
        addv(&mut self.adapter_b, &other.adapter_b);
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            addv(&mut l.ln_attn_gain, &o.ln_attn_gain);
            addv(&mut l.ln_attn_bias, &o.ln_attn_bias);
            l.attn.wq.add_assign(&o.attn.wq)?;
            addv(&mut l.attn.bq, &o.attn.bq);
            l.attn.wk.add_assign(&o.attn.wk)?;
            addv(&mut l.attn.bk, &o.attn.bk);
            l.attn.wv.add_assign(&o.attn.wv)?;
            addv(&mut l.attn.bv, &o.attn.bv);
            l.attn.wo.add_assign(&o.attn.wo)?;
            addv(&mut l.attn.bo, &o.attn.bo);
            addv(&mut l.ln_ff_gain, &o.ln_ff_gain);
            addv(&mut l.ln_ff_bias, &o.ln_ff_bias);
            l.ff_w1.add_assign(&o.ff_w1)?;
            addv(&mut l.ff_b1, &o.ff_b1);
            l.ff_w2.add_assign(&o.ff_w2)?;
            addv(&mut l.ff_b2, &o.ff_b2);
        }
        self.proj_w1.add_assign(&other.proj_w1)?;
        addv(&mut self.proj_b1, &other.proj_b1);
        self.proj_w2.add_assign(&other.proj_w2)?;
        addv(&mut self.proj_b2, &other.proj_b2);
        if let (Some(a), Some(b)) = (&mut self.query_bank, &other.query_bank) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    /// Scale every stored gradient in place.
    pub fn scale(&mut self, s: f64) {
        fn sm(m: &mut Matrix, s: f64) {
            for v in m.as_mut_slice() {
                *v *= s;
            }
        }
        fn sv(v: &mut [f64], s: f64) {
            for x in v {
                *x *= s;
            }
        }
        sm(&mut self.adapter_w, s);
        sv(&mut self.adapter_b, s);
        for l in &mut self.layers {
            sv(&mut l.ln_attn_gain, s);
            sv(&mut l.ln_attn_bias, s);
            sm(&mut l.attn.wq, s);
            sv(&mut l.attn.bq, s);
            sm(&mut l.attn.wk, s);
            sv(&mut l.attn.bk, s);
            sm(&mut l.attn.wv, s);
            sv(&mut l.attn.bv, s);
            sm(&mut l.attn.wo, s);
            sv(&mut l.attn.bo, s);
            sv(&mut l.ln_ff_gain, s);
            sv(&mut l.ln_ff_bias, s);
            sm(&mut l.ff_w1, s);
            sv(&mut l.ff_b1, s);
            sm(&mut l.ff_w2, s);
            sv(&mut l.ff_b2, s);
        }
        sm(&mut self.proj_w1, s);
        sv(&mut self.proj_b1, s);
        sm(&mut self.proj_w2, s);
        sv(&mut self.proj_b2, s);
        if let Some(b) = &mut self.query_bank {
            sm(b, s);
        }
        sm(&mut self.queries_pre, s);
        sm(&mut self.features, s);
        sm(&mut self.features_query_path, s);
        sm(&mut self.features_kv_path, s);
    }
}

/// Backward for any forward that went through the aggregation stack.
/// `grad_output` must match the traced output shape.
pub fn acformer_backward(
    grad_output: &Matrix,
    trace: &ForwardTrace,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<AggregatorGrads> {
    if grad_output.shape() != trace.output.shape() {
        return Err(Error::shape(format!(
            "loss gradient is {}x{}, traced output is {}x{}",
            grad_output.rows(),
            grad_output.cols(),
            trace.output.rows(),
            trace.output.cols()
        )));
    }
    if trace.layers.len() != w.layers.len() {
        return Err(Error::config(format!(
            "trace has {} layers, weights have {}",
            trace.layers.len(),
            w.layers.len()
        )));
    }

    // projector
    let g = linear_backward(grad_output, &trace.proj_h1g, &w.proj_w2)?;
    let (proj_w2, proj_b2, grad_h1g) = (g.grad_w, g.grad_b, g.grad_x);
    let grad_h1 = gelu_backward(&grad_h1g, &trace.proj_h1)?;
    let g = linear_backward(&grad_h1, &trace.pre_proj, &w.proj_w1)?;
    let (proj_w1, proj_b1, mut grad_ia) = (g.grad_w, g.grad_b, g.grad_x);

    // residual blocks, in reverse
    let mut grad_rv = Matrix::zeros(trace.rv_adapted.rows(), trace.rv_adapted.cols());
    let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(w.layers.len());
    for (lt, lw) in trace.layers.iter().zip(&w.layers).rev() {
        // out = a_out + linear(h1g, ff_w2)
        let g = linear_backward(&grad_ia, &lt.h1g, &lw.ff_w2)?;
        let (ff_w2, ff_b2, grad_h1g) = (g.grad_w, g.grad_b, g.grad_x);
        let mut grad_a_out = grad_ia;
        let grad_h1 = gelu_backward(&grad_h1g, &lt.h1)?;
        let g = linear_backward(&grad_h1, &lt.ff_ln_out, &lw.ff_w1)?;
        let (ff_w1, ff_b1, grad_ff_ln) = (g.grad_w, g.grad_b, g.grad_x);
        let ln2 = layer_norm_backward(&grad_ff_ln, &lt.a_out, &lw.ln_ff.gain, LN_EPS)?;
        grad_a_out.add_assign(&ln2.grad_x)?;

        // a_out = ia_in + attention(LN(ia_in), LN(rv), LN(rv))
        let attn = mh_cross_attention_backward(
            &grad_a_out,
            &lt.q_ln,
            &lt.kv_ln,
            &lt.kv_ln,
            &lw.attn,
            cfg.heads,
            &lt.attn_cache,
        )?;
        let grad_kv_ln = attn.k_in.add(&attn.v_in)?;
        let ln_q = layer_norm_backward(&attn.q_in, &lt.ia_in, &lw.ln_attn.gain, LN_EPS)?;
        let ln_kv = layer_norm_backward(&grad_kv_ln, &trace.rv_adapted, &lw.ln_attn.gain, LN_EPS)?;
        grad_rv.add_assign(&ln_kv.grad_x)?;

        grad_ia = grad_a_out;
        grad_ia.add_assign(&ln_q.grad_x)?;

        // the attention LN is applied to both sides with one parameter set
        let ln_attn_gain: Vec<f64> = ln_q
            .grad_gain
            .iter()
            .zip(&ln_kv.grad_gain)
            .map(|(a, b)| a + b)
            .collect();
        let ln_attn_bias: Vec<f64> = ln_q
            .grad_bias
            .iter()
            .zip(&ln_kv.grad_bias)
            .map(|(a, b)| a + b)
            .collect();
        layer_grads.push(LayerGrads {
            ln_attn_gain,
            ln_attn_bias,
            attn,
            ln_ff_gain: ln2.grad_gain,
            ln_ff_bias: ln2.grad_bias,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
        });
    }
    layer_grads.reverse();

    // shared adapter: the query side and the key/value side both feed it
    let gq = linear_backward(&grad_ia, &trace.queries_pre, &w.adapter_w)?;
    let gkv = linear_backward(&grad_rv, &trace.features, &w.adapter_w)?;
    let mut adapter_w = gq.grad_w;
    adapter_w.add_assign(&gkv.grad_w)?;
    let adapter_b: Vec<f64> = gq.grad_b.iter().zip(&gkv.grad_b).map(|(a, b)| a + b).collect();
    let queries_pre = gq.grad_x;
    let features_kv_path = gkv.grad_x;

    // query-path gradient scatters into the gathered rows; for a learnable
    // bank it is the bank gradient instead
    let mut features_query_path = Matrix::zeros(trace.features.rows(), trace.features.cols());
    let mut query_bank = None;
    if let Some(anchors) = &trace.anchors {
        for (i, &idx) in anchors.indices().iter().enumerate() {
            for (dst, src) in features_query_path
                .row_mut(idx)
                .iter_mut()
                .zip(queries_pre.row(i))
            {
                *dst += src;
            }
        }
    } else if w.query_bank.is_some() {
        query_bank = Some(queries_pre.clone());
    }
    let features = features_kv_path.add(&features_query_path)?;

    Ok(AggregatorGrads {
        adapter_w,
        adapter_b,
        layers: layer_grads,
        proj_w1,
        proj_b1,
        proj_w2,
        proj_b2,
        query_bank,
        queries_pre,
        features,
        features_query_path,
        features_kv_path,
    })
}
