//! The ablation connector family: spatial pooling, the three resampler
//! query sources (pooled, random, learnable), and the two direct-in
//! variants that skip the aggregation stack.

use crate::connector::{
    acformer_forward, aggregate_stack, direct_proj, AggregatorWeights, ConnectorConfig,
    FeatureMap, Variant,
};
use crate::error::{Error, Result};
use crate::kernel::{Matrix, Rng};
use crate::selector::{gather_anchors, select_anchors, AttentionMap, SelectionBudget};

/// Square average-pooling layout over the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub grid_in: usize,
    pub grid_out: usize,
}

impl PoolSpec {
    pub fn new(grid_in: usize, grid_out: usize) -> Result<PoolSpec> {
        if grid_out == 0 || grid_in == 0 || !grid_in.is_multiple_of(grid_out) {
            return Err(Error::config(format!(
                "pool grid {grid_in} not divisible into {grid_out}"
            )));
        }
        Ok(PoolSpec { grid_in, grid_out })
    }

    /// Derive the layout from a feature map and a token budget:
    /// grid_out^2 + 1 must equal the budget.
    pub fn for_budget(features: &FeatureMap, token_budget: usize) -> Result<PoolSpec> {
        let grid_in = exact_sqrt(features.visual_tokens()).ok_or_else(|| {
            Error::data(format!(
                "{} patches do not form a square grid",
                features.visual_tokens()
            ))
        })?;
        if token_budget == 0 {
            return Err(Error::config("token budget must be at least 1"));
        }
        let grid_out = exact_sqrt(token_budget - 1).ok_or_else(|| {
            Error::config(format!(
                "pooling budget {token_budget} is not a square grid plus [CLS]"
            ))
        })?;
        PoolSpec::new(grid_in, grid_out)
    }
}

pub(crate) fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n && n > 0).then_some(r)
}

/// 2-D average pooling over the patch grid, [CLS] row prepended.
pub fn pool_tokens(features: &FeatureMap, spec: &PoolSpec) -> Result<Matrix> {
    if features.visual_tokens() != spec.grid_in * spec.grid_in {
        return Err(Error::data(format!(
            "{} patches vs {}x{} pool grid",
            features.visual_tokens(),
            spec.grid_in,
            spec.grid_in
        )));
    }
    let k = spec.grid_in / spec.grid_out;
    let d = features.dim();
    let fm = features.matrix();
    let mut out = Matrix::zeros(spec.grid_out * spec.grid_out + 1, d);
    out.row_mut(0).copy_from_slice(fm.row(0));
    let inv = 1.0 / (k * k) as f64;
    for pr in 0..spec.grid_out {
        for pc in 0..spec.grid_out {
            let dst = 1 + pr * spec.grid_out + pc;
            for ir in 0..k {
                for ic in 0..k {
                    let patch = (pr * k + ir) * spec.grid_in + (pc * k + ic);
                    let src = fm.row(patch + 1);
                    for (o, &v) in out.row_mut(dst).iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            for o in out.row_mut(dst) {
                *o *= inv;
            }
        }
    }
    Ok(out)
}

/// Resampler over pooled-token queries.
pub fn pooling_pr_forward(
    features: &FeatureMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<Matrix> {
    let spec = PoolSpec::for_budget(features, cfg.token_budget)?;
    let queries = pool_tokens(features, &spec)?;
    aggregate_stack(&queries, features, cfg, w)
}

/// Resampler whose queries are [CLS] plus uniformly sampled feature rows,
/// without replacement.
pub fn random_pr_forward(
    features: &FeatureMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
    rng: &mut Rng,
) -> Result<Matrix> {
    if cfg.token_budget > features.tokens() {
        return Err(Error::config(format!(
            "budget {} exceeds {} tokens",
            cfg.token_budget,
            features.tokens()
        )));
    }
    let mut indices = vec![0usize];
    indices.extend(
        rng.sample_distinct(features.visual_tokens(), cfg.token_budget - 1)
            .into_iter()
            .map(|j| j + 1),
    );
    let queries = features.matrix().gather_rows(&indices)?;
    aggregate_stack(&queries, features, cfg, w)
}

/// Resampler over the learnable query bank.
pub fn pr_forward(
    features: &FeatureMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<Matrix> {
    let bank = w
        .query_bank
        .as_ref()
        .ok_or_else(|| Error::config("learnable-query variant needs a query bank"))?;
    if bank.rows() != cfg.token_budget {
        return Err(Error::config(format!(
            "query bank holds {} rows, budget is {}",
            bank.rows(),
            cfg.token_budget
        )));
    }
    aggregate_stack(bank, features, cfg, w)
}

/// Spatial pooling straight into the projector; no aggregation stack.
pub fn pooling_forward(
    features: &FeatureMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<Matrix> {
    let spec = PoolSpec::for_budget(features, cfg.token_budget)?;
    let pooled = pool_tokens(features, &spec)?;
    direct_proj(&pooled, features.dim(), w)
}

/// Selected anchors straight into the projector; no aggregation stack.
pub fn top_p_direct(
    features: &FeatureMap,
    attn: &AttentionMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<Matrix> {
    let anchors = select_anchors(attn, SelectionBudget::new(cfg.token_budget - 1))?;
    let gathered = gather_anchors(features, &anchors)?;
    direct_proj(&gathered, features.dim(), w)
}

/// Selected anchors plus one mean row summarizing every unselected visual
/// token, then the projector. Output has budget + 1 rows.
pub fn evit_fuse(
    features: &FeatureMap,
    attn: &AttentionMap,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<Matrix> {
    let anchors = select_anchors(attn, SelectionBudget::new(cfg.token_budget - 1))?;
    let gathered = gather_anchors(features, &anchors)?;
    let mut picked = vec![false; features.tokens()];
    for &idx in anchors.indices() {
        picked[idx] = true;
    }
    let remaining: Vec<usize> = (1..features.tokens()).filter(|&i| !picked[i]).collect();
    let mut fused = Matrix::zeros(1, features.dim());
    if !remaining.is_empty() {
        let inv = 1.0 / remaining.len() as f64;
        for &idx in &remaining {
            for (o, &v) in fused.row_mut(0).iter_mut().zip(features.matrix().row(idx)) {
                *o += v * inv;
            }
        }
    }
    let tokens = Matrix::concat_rows(&gathered, &fused)?;
    direct_proj(&tokens, features.dim(), w)
}

/// Dispatch on the configured variant. The attention map is required for the
/// anchor-driven variants, the RNG only for the random-query resampler.
pub fn connector_forward(
    features: &FeatureMap,
    attn: Option<&AttentionMap>,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
    rng: Option<&mut Rng>,
) -> Result<Matrix> {
    cfg.validate()?;
    let need_attn = || {
        attn.ok_or_else(|| {
            Error::config(format!("variant '{}' needs an attention map", cfg.variant))
        })
    };
    match cfg.variant {
        Variant::AcFormer => acformer_forward(features, need_attn()?, cfg, w),
        Variant::Pr => pr_forward(features, cfg, w),
        Variant::Pooling => pooling_forward(features, cfg, w),
        Variant::PoolingPr => pooling_pr_forward(features, cfg, w),
        Variant::RandomPr => {
            let rng = rng.ok_or_else(|| {
                Error::config("random-query variant needs a seeded rng")
            })?;
            random_pr_forward(features, cfg, w, rng)
        }
        Variant::TopPDirect => top_p_direct(features, need_attn()?, cfg, w),
        Variant::EvitDirect => evit_fuse(features, need_attn()?, cfg, w),
    }
}
