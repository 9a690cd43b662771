use crate::connector::{AggregatorWeights, ConnectorConfig, FeatureMap, Variant, LN_EPS};
use crate::error::{Error, Result};
use crate::kernel::{
    gelu, layer_norm, linear, mh_cross_attention_with_cache, AttentionCache, Matrix,
};
use crate::selector::{gather_anchors, select_anchors, AnchorIndexList, AttentionMap, SelectionBudget};

/// Intermediates of one residual block, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub ia_in: Matrix,
    pub q_ln: Matrix,
    pub kv_ln: Matrix,
    pub attn_cache: AttentionCache,
    pub a_out: Matrix,
    pub ff_ln_out: Matrix,
    pub h1: Matrix,
    pub h1g: Matrix,
}

/// Full forward record: everything the analytic backward needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Anchor list when the queries came from the selector.
    pub anchors: Option<AnchorIndexList>,
    /// The raw feature map the keys/values were adapted from.
    pub features: Matrix,
    /// Queries before the adapter, in feature space (budget x D).
    pub queries_pre: Matrix,
    pub q_adapted: Matrix,
    pub rv_adapted: Matrix,
    pub layers: Vec<LayerTrace>,
    pub pre_proj: Matrix,
    pub proj_h1: Matrix,
    pub proj_h1g: Matrix,
    pub output: Matrix,
}

/// Adapter -> L residual blocks -> projector, for an arbitrary query source.
/// Every query-construction variant funnels through this one path, so
/// variants that build identical queries produce bit-identical outputs.
pub fn aggregate_stack(
    queries_pre: &Matrix,
    features: &FeatureMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<Matrix> {
    Ok(aggregate_stack_with_trace(queries_pre, features, cfg, w)?.output)
}

pub fn aggregate_stack_with_trace(
    queries_pre: &Matrix,
    features: &FeatureMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<ForwardTrace> {
    w.check_compatible(cfg, features.dim())?;
    if queries_pre.cols() != features.dim() {
        return Err(Error::shape(format!(
            "queries are {} wide, features are {}",
            queries_pre.cols(),
            features.dim()
        )));
    }

    let q_adapted = linear(queries_pre, &w.adapter_w, &w.adapter_b)?;
    let rv_adapted = linear(features.matrix(), &w.adapter_w, &w.adapter_b)?;

    let mut ia = q_adapted.clone();
    let mut layers = Vec::with_capacity(cfg.layers);
    for lw in &w.layers {
        let trace = aggregator_layer_forward_traced(&ia, &rv_adapted, lw, cfg.heads)?;
        ia = trace
            .a_out
            .add(&linear(&trace.h1g, &lw.ff_w2, &lw.ff_b2)?)?;
        layers.push(trace);
    }

    let pre_proj = ia;
    let proj_h1 = linear(&pre_proj, &w.proj_w1, &w.proj_b1)?;
    let proj_h1g = gelu(&proj_h1);
    let output = linear(&proj_h1g, &w.proj_w2, &w.proj_b2)?;

    Ok(ForwardTrace {
        anchors: None,
        features: features.matrix().clone(),
        queries_pre: queries_pre.clone(),
        q_adapted,
        rv_adapted,
        layers,
        pre_proj,
        proj_h1,
        proj_h1g,
        output,
    })
}

/// One pre-LN residual block over adapted inputs:
/// a_out = ia + Attn(LN(ia), LN(rv), LN(rv));  out = a_out + FF(LN(a_out)).
pub fn aggregator_layer_forward(
    ia: &Matrix,
    rv: &Matrix,
    lw: &super::LayerWeights,
    heads: usize,
) -> Result<Matrix> {
    let t = aggregator_layer_forward_traced(ia, rv, lw, heads)?;
    t.a_out.add(&linear(&t.h1g, &lw.ff_w2, &lw.ff_b2)?)
}

fn aggregator_layer_forward_traced(
    ia: &Matrix,
    rv: &Matrix,
    lw: &super::LayerWeights,
    heads: usize,
) -> Result<LayerTrace> {
    let q_ln = layer_norm(ia, &lw.ln_attn.gain, &lw.ln_attn.bias, LN_EPS)?;
    let kv_ln = layer_norm(rv, &lw.ln_attn.gain, &lw.ln_attn.bias, LN_EPS)?;
    let (attn_out, attn_cache) =
        mh_cross_attention_with_cache(&q_ln, &kv_ln, &kv_ln, &lw.attn, heads)?;
    let a_out = ia.add(&attn_out)?;
    let ff_ln_out = layer_norm(&a_out, &lw.ln_ff.gain, &lw.ln_ff.bias, LN_EPS)?;
    let h1 = linear(&ff_ln_out, &lw.ff_w1, &lw.ff_b1)?;
    let h1g = gelu(&h1);
    Ok(LayerTrace {
        ia_in: ia.clone(),
        q_ln,
        kv_ln,
        attn_cache,
        a_out,
        ff_ln_out,
        h1,
        h1g,
    })
}

/// The full pipeline: anchor selection, gather, aggregation, projection.
pub fn acformer_forward(
    features: &FeatureMap,
    attn: &AttentionMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<Matrix> {
    Ok(acformer_forward_with_trace(features, attn, cfg, w)?.output)
}

pub fn acformer_forward_with_trace(
    features: &FeatureMap,
    attn: &AttentionMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<ForwardTrace> {
    if cfg.variant != Variant::AcFormer {
        return Err(Error::config(format!(
            "acformer forward called with variant '{}'",
            cfg.variant
        )));
    }
    if attn.visual_tokens() != features.visual_tokens() {
        return Err(Error::shape(format!(
            "attention map covers {} visual tokens, features have {}",
            attn.visual_tokens(),
            features.visual_tokens()
        )));
    }
    if cfg.token_budget < 1 || cfg.token_budget > features.tokens() {
        return Err(Error::config(format!(
            "token budget {} outside [1, {}]",
            cfg.token_budget,
            features.tokens()
        )));
    }
    let anchors = select_anchors(attn, SelectionBudget::new(cfg.token_budget - 1))?;
    let queries_pre = gather_anchors(features, &anchors)?;
    let mut trace = aggregate_stack_with_trace(&queries_pre, features, cfg, w)?;
    trace.anchors = Some(anchors);
    Ok(trace)
}

/// Adapter then projector with no aggregation layers; the shared tail for
/// the direct-in baselines. Identical to the stack with zero layers.
pub fn direct_proj(
    tokens_pre: &Matrix,
    features_dim: usize,
    w: &AggregatorWeights,
) -> Result<Matrix> {
    if tokens_pre.cols() != features_dim || w.feature_dim() != features_dim {
        return Err(Error::shape(format!(
            "direct projection: tokens {} wide, adapter expects {}",
            tokens_pre.cols(),
            w.feature_dim()
        )));
    }
    let adapted = linear(tokens_pre, &w.adapter_w, &w.adapter_b)?;
    let h1 = linear(&adapted, &w.proj_w1, &w.proj_b1)?;
    linear(&gelu(&h1), &w.proj_w2, &w.proj_b2)
}
