//! Finite-difference verification of the analytic backward pass. The checker
//! only ever calls the forward path, so it stays independent of the code it
//! is checking.

use crate::connector::{
    acformer_backward, acformer_forward, acformer_forward_with_trace, AggregatorWeights,
    ConnectorConfig, FeatureMap, Variant,
};
use crate::error::{Error, Result};
use crate::kernel::{Matrix, Rng};
use crate::selector::AttentionMap;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so true-zero gradients compare
/// cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of a scalar function at `x`.
pub fn central_diff(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst probe.
    pub worst_site: String,
}

/// Probe the full connector backward against central differences: random
/// features, attention and (densely initialized) weights, a fixed random
/// linear functional as the loss, `probes` random parameter coordinates.
/// Feature entries are probed too; attention entries are not, since
/// selection is discrete and carries no gradient.
pub fn check_connector_gradients(
    cfg: &ConnectorConfig,
    feature_dim: usize,
    n_tokens: usize,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if cfg.variant != Variant::AcFormer {
        return Err(Error::config("gradient check drives the anchor-selected variant"));
    }
    let mut rng = Rng::new(seed);
    let features = FeatureMap::new(Matrix::from_fn(n_tokens, feature_dim, |_, _| rng.normal()))?;
    let attn = AttentionMap::new(Matrix::from_fn(cfg.heads, n_tokens - 1, |_, _| rng.uniform()))?;
    let weights = AggregatorWeights::init_random(cfg, feature_dim, &mut rng)?;
    let trace = acformer_forward_with_trace(&features, &attn, cfg, &weights)?;
    let loss_weights = Matrix::from_fn(trace.output.rows(), trace.output.cols(), |_, _| {
        rng.normal()
    });

    let grads = acformer_backward(&loss_weights, &trace, cfg, &weights)?;
    let mut analytic: Vec<f64> = Vec::new();
    let mut site_names: Vec<(String, usize)> = Vec::new();
    for (name, t) in grads.weight_tensors() {
        site_names.push((name, t.values().len()));
        analytic.extend_from_slice(t.values());
    }
    site_names.push(("features".into(), grads.features.as_slice().len()));
    analytic.extend_from_slice(grads.features.as_slice());

    let mut flat_params: Vec<f64> = Vec::new();
    for (_, t) in weights.tensors() {
        flat_params.extend_from_slice(t.values());
    }
    let weight_len = flat_params.len();
    flat_params.extend_from_slice(features.matrix().as_slice());

    let loss_at = |flat: &[f64]| -> Result<f64> {
        let mut w = weights.clone();
        w.assign_flat(&flat[..weight_len])?;
        let fm = FeatureMap::new(Matrix::from_vec(
            n_tokens,
            feature_dim,
            flat[weight_len..].to_vec(),
        )?)?;
        let out = acformer_forward(&fm, &attn, cfg, &w)?;
        Ok(out
            .as_slice()
            .iter()
            .zip(loss_weights.as_slice())
            .map(|(o, g)| o * g)
            .sum())
    };

    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let total = flat_params.len();
    for _ in 0..probes {
        let idx = rng.below(total);
        let x0 = flat_params[idx];
        let numeric = central_diff(
            |x| {
                let mut flat = flat_params.clone();
                flat[idx] = x;
                loss_at(&flat)
            },
            x0,
            FD_STEP,
        )?;
        let err = rel_err(analytic[idx], numeric);
        if err > max_rel {
            max_rel = err;
            let mut cursor = idx;
            worst = "features".to_string();
            for (name, len) in &site_names {
                if cursor < *len {
                    worst = format!("{name}[{cursor}]");
                    break;
                }
                cursor -= len;
            }
        }
    }
    Ok(GradCheckReport {
        probes,
        max_rel_err: max_rel,
        worst_site: worst,
    })
}
