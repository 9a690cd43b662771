//! Synthetic feature/attention generation. Planted mode concentrates
//! attention mass on known visual indices so selection has a ground truth.

use acformer_core::error::{Error, Result};
use acformer_core::kernel::{Matrix, Rng};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    /// Total token count including [CLS].
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    /// Number of planted anchors; None for unstructured attention.
    pub planted: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthResult {
    pub features: Matrix,
    pub attention: Matrix,
    /// Planted anchors in sequence coordinates ([CLS] = 0, patch j at j+1),
    /// strongest first.
    pub planted_seq: Option<Vec<usize>>,
}

/// Attention rows are nonnegative and normalized to sum one, so they pass
/// the raw-softmax check. Planted indices get boosts far above the noise
/// floor, with a strict ordering among themselves.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthResult> {
    if spec.tokens < 2 {
        return Err(Error::config("need a [CLS] token plus at least one patch"));
    }
    if spec.heads == 0 || spec.dim == 0 {
        return Err(Error::config("heads and dim must be positive"));
    }
    let visual = spec.tokens - 1;
    if let Some(k) = spec.planted {
        if k == 0 || k > visual {
            return Err(Error::config(format!(
                "cannot plant {k} anchors among {visual} patches"
            )));
        }
    }
    let mut rng = Rng::new(spec.seed);
    let features = Matrix::from_fn(spec.tokens, spec.dim, |_, _| rng.normal());

    let planted: Option<Vec<usize>> = spec.planted.map(|k| rng.sample_distinct(visual, k));
    let mut attention = Matrix::from_fn(spec.heads, visual, |_, _| rng.uniform() * 0.4);
    if let Some(indices) = &planted {
        for h in 0..spec.heads {
            for (rank, &j) in indices.iter().enumerate() {
                attention[(h, j)] = 1.0 + 0.01 * (indices.len() - rank) as f64;
            }
        }
    }
    for h in 0..spec.heads {
        let sum: f64 = attention.row(h).iter().sum();
        for v in attention.row_mut(h) {
            *v /= sum;
        }
    }
    Ok(SynthResult {
        features,
        attention,
        planted_seq: planted.map(|v| v.iter().map(|&j| j + 1).collect()),
    })
}
