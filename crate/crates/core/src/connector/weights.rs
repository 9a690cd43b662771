use crate::connector::ConnectorConfig;
use crate::error::{Error, Result};
use crate::kernel::{AttentionWeights, Matrix, Rng, INIT_STD};

/// Default layer-norm epsilon used throughout the stack.
pub const LN_EPS: f64 = 1e-5;

/// Borrowed view of one named parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum TensorRef<'a> {
    Mat(&'a Matrix),
    Vec(&'a [f64]),
}

impl TensorRef<'_> {
    pub fn values(&self) -> &[f64] {
        match self {
            TensorRef::Mat(m) => m.as_slice(),
            TensorRef::Vec(v) => v,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            TensorRef::Mat(m) => vec![m.rows(), m.cols()],
            TensorRef::Vec(v) => vec![v.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    pub fn unit(dim: usize) -> LayerNormParams {
        LayerNormParams {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }
}

/// One pre-LN residual block: shared LN feeding the cross-attention on both
/// the query and key/value sides, then a second LN feeding the feedforward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln_attn: LayerNormParams,
    pub attn: AttentionWeights,
    pub ln_ff: LayerNormParams,
    pub ff_w1: Matrix,
    pub ff_b1: Vec<f64>,
    pub ff_w2: Matrix,
    pub ff_b2: Vec<f64>,
}

/// Every learnable parameter of the aggregation stack: the shared D -> model
/// dim input adapter, the residual blocks, the two-layer output projector,
/// and (for the learnable-query variant) the query bank.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorWeights {
    pub adapter_w: Matrix,
    pub adapter_b: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub proj_w1: Matrix,
    pub proj_b1: Vec<f64>,
    pub proj_w2: Matrix,
    pub proj_b2: Vec<f64>,
    pub query_bank: Option<Matrix>,
}

impl AggregatorWeights {
    /// Training initialization: truncated-normal projections, unit layer
    /// norms, zero residual-branch outputs (attention wo and feedforward w2)
    /// so the untrained stack is the identity on its adapted queries.
    pub fn init(cfg: &ConnectorConfig, feature_dim: usize, rng: &mut Rng) -> Result<AggregatorWeights> {
        Self::build(cfg, feature_dim, rng, false)
    }

    /// All weights random, residual outputs included. Gradient checks use
    /// this so every parameter carries signal.
    pub fn init_random(
        cfg: &ConnectorConfig,
        feature_dim: usize,
        rng: &mut Rng,
    ) -> Result<AggregatorWeights> {
        Self::build(cfg, feature_dim, rng, true)
    }

    fn build(
        cfg: &ConnectorConfig,
        feature_dim: usize,
        rng: &mut Rng,
        dense: bool,
    ) -> Result<AggregatorWeights> {
        cfg.validate()?;
        if feature_dim == 0 {
            return Err(Error::config("feature dim must be positive"));
        }
        let dm = cfg.model_dim;
        let trunc = |rows: usize, cols: usize, rng: &mut Rng| {
            Matrix::from_fn(rows, cols, |_, _| rng.normal_trunc(INIT_STD))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let attn = if dense {
                AttentionWeights::init_random(dm, dm, dm, rng)
            } else {
                AttentionWeights::init(dm, dm, dm, rng)
            };
            let ff_w2 = if dense {
                trunc(cfg.ff_dim, dm, rng)
            } else {
                Matrix::zeros(cfg.ff_dim, dm)
            };
            layers.push(LayerWeights {
                ln_attn: LayerNormParams::unit(dm),
                attn,
                ln_ff: LayerNormParams::unit(dm),
                ff_w1: trunc(dm, cfg.ff_dim, rng),
                ff_b1: vec![0.0; cfg.ff_dim],
                ff_w2,
                ff_b2: vec![0.0; dm],
            });
        }
        let query_bank = match cfg.variant {
            crate::connector::Variant::Pr => Some(Matrix::from_fn(
                cfg.token_budget,
                feature_dim,
                |_, _| rng.normal_trunc(INIT_STD),
            )),
            _ => None,
        };
        Ok(AggregatorWeights {
            adapter_w: trunc(feature_dim, dm, rng),
            adapter_b: vec![0.0; dm],
            layers,
            proj_w1: trunc(dm, cfg.out_dim, rng),
            proj_b1: vec![0.0; cfg.out_dim],
            proj_w2: trunc(cfg.out_dim, cfg.out_dim, rng),
            proj_b2: vec![0.0; cfg.out_dim],
            query_bank,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.adapter_w.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.adapter_w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.proj_w2.cols()
    }

    /// Checks that these weights fit the given config and input width.
    pub fn check_compatible(&self, cfg: &ConnectorConfig, feature_dim: usize) -> Result<()> {
        cfg.validate()?;
        if self.feature_dim() != feature_dim {
            return Err(Error::config(format!(
                "weights expect {}-dim features, got {feature_dim}",
                self.feature_dim()
            )));
        }
        if self.model_dim() != cfg.model_dim || self.out_dim() != cfg.out_dim {
            return Err(Error::config(format!(
                "weights are {}->{} wide, config wants {}->{}",
                self.model_dim(),
                self.out_dim(),
                cfg.model_dim,
                cfg.out_dim
            )));
        }
        if self.layers.len() != cfg.layers {
            return Err(Error::config(format!(
                "weights have {} layers, config wants {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        for lw in &self.layers {
            if lw.ff_w1.cols() != cfg.ff_dim || lw.ff_w2.rows() != cfg.ff_dim {
                return Err(Error::config(format!(
                    "layer feedforward width {} vs config {}",
                    lw.ff_w1.cols(),
                    cfg.ff_dim
                )));
            }
        }
        Ok(())
    }

    /// All tensors in checkpoint order, with their record names.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out: Vec<(String, TensorRef<'_>)> = vec![
            ("adapter.w".into(), TensorRef::Mat(&self.adapter_w)),
            ("adapter.b".into(), TensorRef::Vec(&self.adapter_b)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln_attn.gain"), TensorRef::Vec(&l.ln_attn.gain)));
            out.push((format!("layers.{i}.ln_attn.bias"), TensorRef::Vec(&l.ln_attn.bias)));
            out.push((format!("layers.{i}.attn.wq"), TensorRef::Mat(&l.attn.wq)));
            out.push((format!("layers.{i}.attn.bq"), TensorRef::Vec(&l.attn.bq)));
            out.push((format!("layers.{i}.attn.wk"), TensorRef::Mat(&l.attn.wk)));
            out.push((format!("layers.{i}.attn.bk"), TensorRef::Vec(&l.attn.bk)));
            out.push((format!("layers.{i}.attn.wv"), TensorRef::Mat(&l.attn.wv)));
            out.push((format!("layers.{i}.attn.bv"), TensorRef::Vec(&l.attn.bv)));
            out.push((format!("layers.{i}.attn.wo"), TensorRef::Mat(&l.attn.wo)));
            out.push((format!("layers.{i}.attn.bo"), TensorRef::Vec(&l.attn.bo)));
            out.push((format!("layers.{i}.ln_ff.gain"), TensorRef::Vec(&l.ln_ff.gain)));
            out.push((format!("layers.{i}.ln_ff.bias"), TensorRef::Vec(&l.ln_ff.bias)));
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

    /// Total parameter count across all tensors.
    pub fn param_len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.values().len()).sum()
    }

    /// Overwrite every parameter from a flat vector laid out in `tensors()`
    /// order. The gradient checker perturbs parameters this way.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::config(format!(
                "flat parameter vector has {} entries, weights need {}",
                flat.len(),
                self.param_len()
            )));
        }
        let mut offset = 0usize;
        let take = |dst: &mut [f64], offset: &mut usize| {
            dst.copy_from_slice(&flat[*offset..*offset + dst.len()]);
            *offset += dst.len();
        };
        take(self.adapter_w.as_mut_slice(), &mut offset);
        take(&mut self.adapter_b, &mut offset);
        for l in &mut self.layers {
            take(&mut l.ln_attn.gain, &mut offset);
            take(&mut l.ln_attn.bias, &mut offset);
            take(l.attn.wq.as_mut_slice(), &mut offset);
            take(&mut l.attn.bq, &mut offset);
            take(l.attn.wk.as_mut_slice(), &mut offset);
            take(&mut l.attn.bk, &mut offset);
            take(l.attn.wv.as_mut_slice(), &mut offset);
            take(&mut l.attn.bv, &mut offset);
            take(l.attn.wo.as_mut_slice(), &mut offset);
            take(&mut l.attn.bo, &mut offset);
            take(&mut l.ln_ff.gain, &mut offset);
            take(&mut l.ln_ff.bias, &mut offset);
            take(l.ff_w1.as_mut_slice(), &mut offset);
            take(&mut l.ff_b1, &mut offset);
            take(l.ff_w2.as_mut_slice(), &mut offset);
            take(&mut l.ff_b2, &mut offset);
        }
        take(self.proj_w1.as_mut_slice(), &mut offset);
        take(&mut self.proj_b1, &mut offset);
        take(self.proj_w2.as_mut_slice(), &mut offset);
        take(&mut self.proj_b2, &mut offset);
        if let Some(bank) = &mut self.query_bank {
            take(bank.as_mut_slice(), &mut offset);
        }
        Ok(())
    }

    /// In-place SGD step over every tensor present in `grads`.
    pub fn sgd_step(&mut self, grads: &super::AggregatorGrads, lr: f64) {
        fn step_m(w: &mut Matrix, g: &Matrix, lr: f64) {
            for (w, g) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *w -= lr * g;
            }
        }
        fn step_v(w: &mut [f64], g: &[f64], lr: f64) {
            for (w, g) in w.iter_mut().zip(g) {
                *w -= lr * g;
            }
        }
        step_m(&mut self.adapter_w, &grads.adapter_w, lr);
        step_v(&mut self.adapter_b, &grads.adapter_b, lr);
        for (lw, lg) in self.layers.iter_mut().zip(&grads.layers) {
            step_v(&mut lw.ln_attn.gain, &lg.ln_attn_gain, lr);
            step_v(&mut lw.ln_attn.bias, &lg.ln_attn_bias, lr);
            step_m(&mut lw.attn.wq, &lg.attn.wq, lr);
            step_v(&mut lw.attn.bq, &lg.attn.bq, lr);
            step_m(&mut lw.attn.wk, &lg.attn.wk, lr);
            step_v(&mut lw.attn.bk, &lg.attn.bk, lr);
            step_m(&mut lw.attn.wv, &lg.attn.wv, lr);
            step_v(&mut lw.attn.bv, &lg.attn.bv, lr);
            step_m(&mut lw.attn.wo, &lg.attn.wo, lr);
            step_v(&mut lw.attn.bo, &lg.attn.bo, lr);
            step_v(&mut lw.ln_ff.gain, &lg.ln_ff_gain, lr);
            step_v(&mut lw.ln_ff.bias, &lg.ln_ff_bias, lr);
            step_m(&mut lw.ff_w1, &lg.ff_w1, lr);
            step_v(&mut lw.ff_b1, &lg.ff_b1, lr);
            step_m(&mut lw.ff_w2, &lg.ff_w2, lr);
            step_v(&mut lw.ff_b2, &lg.ff_b2, lr);
        }
        step_m(&mut self.proj_w1, &grads.proj_w1, lr);
        step_v(&mut self.proj_b1, &grads.proj_b1, lr);
        step_m(&mut self.proj_w2, &grads.proj_w2, lr);
        step_v(&mut self.proj_b2, &grads.proj_b2, lr);
        if let (Some(bank), Some(g)) = (&mut self.query_bank, &grads.query_bank) {
            step_m(bank, g, lr);
        }
    }
}
