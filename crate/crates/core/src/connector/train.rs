//! A small closed-loop regression task that verifies the connector trains
//! in isolation: the target is a fixed random linear map of the mean of the
//! true anchor rows, so the selector + aggregator must cooperate to fit it.

use crate::connector::{
    acformer_backward, acformer_forward_with_trace, AggregatorWeights, ConnectorConfig,
    FeatureMap, Variant,
};
use crate::error::{Error, Result};
use crate::kernel::{Matrix, Rng};
use crate::selector::{gather_anchors, select_anchors, AttentionMap, SelectionBudget};

#[derive(Debug, Clone)]
pub struct ToySample {
    pub features: FeatureMap,
    pub attn: AttentionMap,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyTrainResult {
    /// Dataset-mean MSE before each step, with the post-training value
    /// appended; length is steps + 1.
    pub losses: Vec<f64>,
    pub weights: AggregatorWeights,
}

/// Synthesizes `n_samples` (features, attention, target) triples. The target
/// of each sample is `map · mean(anchor rows)` for a map drawn once from the
/// seed, where the anchor rows are the ones the selector itself would pick.
pub fn make_toy_dataset(
    cfg: &ConnectorConfig,
    feature_dim: usize,
    n_tokens: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ToySample>> {
    if cfg.token_budget > n_tokens {
        return Err(Error::config(format!(
            "budget {} exceeds {} tokens",
            cfg.token_budget, n_tokens
        )));
    }
    let mut rng = Rng::new(seed);
    let map = Matrix::from_fn(feature_dim, cfg.out_dim, |_, _| rng.normal());
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let features = FeatureMap::new(Matrix::from_fn(n_tokens, feature_dim, |_, _| rng.normal()))?;
        let attn = AttentionMap::new(Matrix::from_fn(cfg.heads, n_tokens - 1, |_, _| {
            rng.uniform()
        }))?;
        let anchors = select_anchors(&attn, SelectionBudget::new(cfg.token_budget - 1))?;
        let gathered = gather_anchors(&features, &anchors)?;
        let mut mean = vec![0.0; feature_dim];
        for r in 0..gathered.rows() {
            for (m, &v) in mean.iter_mut().zip(gathered.row(r)) {
                *m += v;
            }
        }
        let inv = 1.0 / gathered.rows() as f64;
        let target: Vec<f64> = (0..cfg.out_dim)
            .map(|c| (0..feature_dim).map(|d| mean[d] * inv * map[(d, c)]).sum())
            .collect();
        samples.push(ToySample {
            features,
            attn,
            target,
        });
    }
    Ok(samples)
}

fn sample_loss_and_grad(
    sample: &ToySample,
    cfg: &ConnectorConfig,
    w: &AggregatorWeights,
) -> Result<(f64, crate::connector::AggregatorGrads)> {
    let trace = acformer_forward_with_trace(&sample.features, &sample.attn, cfg, w)?;
    let out = &trace.output;
    let rows = out.rows() as f64;
    let dim = out.cols() as f64;
    let mut pred = vec![0.0; out.cols()];
    for r in 0..out.rows() {
        for (p, &v) in pred.iter_mut().zip(out.row(r)) {
            *p += v;
        }
    }
    for p in pred.iter_mut() {
        *p /= rows;
    }
    let mut loss = 0.0;
    for (p, t) in pred.iter().zip(&sample.target) {
        loss += (p - t) * (p - t);
    }
    loss /= dim;
    let grad_out = Matrix::from_fn(out.rows(), out.cols(), |_, c| {
        2.0 * (pred[c] - sample.target[c]) / (dim * rows)
    });
    let grads = acformer_backward(&grad_out, &trace, cfg, w)?;
    Ok((loss, grads))
}

fn dataset_loss(dataset: &[ToySample], cfg: &ConnectorConfig, w: &AggregatorWeights) -> Result<f64> {
    let mut total = 0.0;
    for s in dataset {
        let trace = acformer_forward_with_trace(&s.features, &s.attn, cfg, w)?;
        let out = &trace.output;
        let rows = out.rows() as f64;
        let mut pred = vec![0.0; out.cols()];
        for r in 0..out.rows() {
            for (p, &v) in pred.iter_mut().zip(out.row(r)) {
                *p += v;
            }
        }
        let mut loss = 0.0;
        for (p, t) in pred.iter().zip(&s.target) {
            let p = p / rows;
            loss += (p - t) * (p - t);
        }
        total += loss / out.cols() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Whole-dataset gradient descent on the anchor-regression task. Weights are
/// initialized from `seed`; the run is deterministic given seed and inputs.
pub fn toy_train(
    cfg: &ConnectorConfig,
    dataset: &[ToySample],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<ToyTrainResult> {
    if dataset.is_empty() {
        return Err(Error::config("toy training needs at least one sample"));
    }
    if cfg.variant != Variant::AcFormer {
        return Err(Error::config(
            "toy training drives the anchor-selected variant",
        ));
    }
    let feature_dim = dataset[0].features.dim();
    let mut rng = Rng::new(seed);
    let mut weights = AggregatorWeights::init(cfg, feature_dim, &mut rng)?;
    let mut losses = Vec::with_capacity(steps + 1);
    let inv_n = 1.0 / dataset.len() as f64;

    for step in 0..steps {
        let mut step_loss = 0.0;
        let mut batch: Option<crate::connector::AggregatorGrads> = None;
        for sample in dataset {
            let (loss, grads) = sample_loss_and_grad(sample, cfg, &weights)?;
            step_loss += loss;
            match &mut batch {
                Some(acc) => acc.add_assign(&grads)?,
                None => batch = Some(grads),
            }
        }
        step_loss *= inv_n;
        if !step_loss.is_finite() {
            return Err(Error::numeric(format!(
                "loss became non-finite at step {step} (lr {lr})"
            )));
        }
        losses.push(step_loss);
        let mut batch = batch.expect("nonempty dataset");
        batch.scale(inv_n);
        weights.sgd_step(&batch, lr);
    }

    let final_loss = dataset_loss(dataset, cfg, &weights)?;
    if !final_loss.is_finite() {
        return Err(Error::numeric("final loss is non-finite"));
    }
    losses.push(final_loss);
    Ok(ToyTrainResult { losses, weights })
}
