//! The connector itself: gathered visual anchors act as cross-attention
//! queries over the full feature map through a stack of pre-LN residual
//! blocks, followed by an MLP projector into the language-model width.

mod backward;
mod forward;
mod train;
mod weights;

pub use backward::{acformer_backward, AggregatorGrads, LayerGrads};
pub use forward::{
    acformer_forward, acformer_forward_with_trace, aggregate_stack, aggregate_stack_with_trace,
    aggregator_layer_forward, direct_proj, ForwardTrace, LayerTrace,
};
pub use train::{make_toy_dataset, toy_train, ToySample, ToyTrainResult};
pub use weights::{AggregatorWeights, LayerNormParams, LayerWeights, TensorRef, LN_EPS};

use crate::error::{Error, Result};
use crate::kernel::Matrix;

/// Vision-encoder output for one image: N tokens of width D, row 0 being
/// the [CLS] token.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    values: Matrix,
}

impl FeatureMap {
    pub fn new(values: Matrix) -> Result<FeatureMap> {
        if values.rows() < 2 {
            return Err(Error::data(format!(
                "feature map needs a [CLS] token plus at least one patch, got {} rows",
                values.rows()
            )));
        }
        if !values.is_finite() {
            return Err(Error::data("feature map contains non-finite values"));
        }
        Ok(FeatureMap { values })
    }

    /// Total token count including [CLS].
    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn visual_tokens(&self) -> usize {
        self.values.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    /// Patch rows only (everything but [CLS]).
    pub fn patches(&self) -> Matrix {
        self.values
            .gather_rows(&(1..self.tokens()).collect::<Vec<_>>())
            .expect("patch rows in range")
    }
}

/// Connector family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    AcFormer,
    Pr,
    Pooling,
    PoolingPr,
    RandomPr,
    TopPDirect,
    EvitDirect,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "acformer" => Ok(Variant::AcFormer),
            "pr" => Ok(Variant::Pr),
            "pooling" => Ok(Variant::Pooling),
            "pooling-pr" => Ok(Variant::PoolingPr),
            "random-pr" => Ok(Variant::RandomPr),
            "top-p" => Ok(Variant::TopPDirect),
            "evit" => Ok(Variant::EvitDirect),
            other => Err(Error::config(format!("unknown connector variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::AcFormer => "acformer",
            Variant::Pr => "pr",
            Variant::Pooling => "pooling",
            Variant::PoolingPr => "pooling-pr",
            Variant::RandomPr => "random-pr",
            Variant::TopPDirect => "top-p",
            Variant::EvitDirect => "evit",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dimensions and budget of the aggregation stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectorConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    /// Language-model embedding width the projector maps into.
    pub out_dim: usize,
    /// Output token count including [CLS].
    pub token_budget: usize,
    pub variant: Variant,
}

impl ConnectorConfig {
    /// 6 layers, 512 hidden, 8 heads of 64, 2048 feedforward, 4096-wide
    /// projector output.
    pub fn base(token_budget: usize, variant: Variant) -> ConnectorConfig {
        ConnectorConfig {
            layers: 6,
            model_dim: 512,
            heads: 8,
            head_dim: 64,
            ff_dim: 2048,
            out_dim: 4096,
            token_budget,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.heads * self.head_dim != self.model_dim {
            return Err(Error::config(format!(
                "{} heads x {} head dim != model dim {}",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        if self.token_budget == 0 {
            return Err(Error::config("token budget must be at least 1"));
        }
        if self.model_dim == 0 || self.out_dim == 0 || self.ff_dim == 0 {
            return Err(Error::config("all dims must be positive"));
        }
        Ok(())
    }

    /// Rows this variant hands to the language model; EViT appends one
    /// fused summary row on top of the budget.
    pub fn output_tokens(&self) -> usize {
        match self.variant {
            Variant::EvitDirect => self.token_budget + 1,
            _ => self.token_budget,
        }
    }
}

/// Concatenated multimodal embedding sequence: visual rows first.
#[derive(Debug, Clone)]
pub struct MultimodalInput {
    visual_rows: usize,
    concatenated: Matrix,
}

impl MultimodalInput {
    pub fn concatenated(&self) -> &Matrix {
        &self.concatenated
    }

    pub fn visual_part(&self) -> Matrix {
        self.concatenated
            .gather_rows(&(0..self.visual_rows).collect::<Vec<_>>())
            .expect("visual rows in range")
    }

    pub fn text_part(&self) -> Matrix {
        self.concatenated
            .gather_rows(&(self.visual_rows..self.concatenated.rows()).collect::<Vec<_>>())
            .expect("text rows in range")
    }
}

/// Row-concatenation of projected visual tokens and text embeddings,
/// visual first.
pub fn build_lm_input(visual: &Matrix, text: &Matrix) -> Result<MultimodalInput> {
    if text.rows() > 0 && visual.cols() != text.cols() {
        return Err(Error::shape(format!(
            "lm input: visual width {} vs text width {}",
            visual.cols(),
            text.cols()
        )));
    }
    Ok(MultimodalInput {
        visual_rows: visual.rows(),
        concatenated: Matrix::concat_rows(visual, text)?,
    })
}
