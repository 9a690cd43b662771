//! Analytic FLOP accounting: connector forward cost plus language-model
//! prefill cost as a function of the visual token count, reported as a
//! speed ratio against a plain linear connector fed all source tokens.
//!
//! Multiply-adds count as two FLOPs. KV caching, kernel efficiency and the
//! backward pass are deliberately outside the model; the ratios check
//! direction and rough magnitude, not wall clocks.

use crate::connector::{ConnectorConfig, Variant};
use crate::error::{Error, Result};

/// Transformer shape of the language model whose prefill dominates cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlmCostSpec {
    pub layers: usize,
    pub hidden: usize,
    /// Feedforward width as a multiple of the hidden width (gate/up/down).
    pub ff_mult: f64,
    pub text_tokens: usize,
}

impl LlmCostSpec {
    /// 7B-class decoder: 32 layers, 4096 hidden, 11008-wide feedforward.
    pub fn decoder_7b(text_tokens: usize) -> LlmCostSpec {
        LlmCostSpec {
            layers: 32,
            hidden: 4096,
            ff_mult: 2.6875,
            text_tokens,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.ff_mult <= 0.0 {
            return Err(Error::config("llm cost spec needs positive shape"));
        }
        Ok(())
    }
}

/// Where the visual tokens come from: count (with [CLS]) and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisionSourceSpec {
    pub tokens: usize,
    pub dim: usize,
}

impl Default for VisionSourceSpec {
    /// ViT-L/14 at 336px: 24x24 patches plus [CLS], 1024 wide.
    fn default() -> VisionSourceSpec {
        VisionSourceSpec {
            tokens: 577,
            dim: 1024,
        }
    }
}

/// Source token count the baseline feeds the LLM directly.
pub const BASELINE_VISUAL_TOKENS: usize = 577;

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub variant: String,
    pub visual_tokens: usize,
    pub connector_flops: f64,
    pub llm_prefill_flops: f64,
    pub total: f64,
    pub speed_ratio_vs_baseline: f64,
}

/// Prefill FLOPs over a sequence of `seq` tokens:
/// per layer 2·s·(4h² + 2sh) for attention plus 6·ff_mult·s·h² for the MLP.
pub fn llm_prefill_flops(llm: &LlmCostSpec, seq: usize) -> f64 {
    let s = seq as f64;
    let h = llm.hidden as f64;
    let attn = 2.0 * s * (4.0 * h * h + 2.0 * s * h);
    let ff = 6.0 * llm.ff_mult * s * h * h;
    llm.layers as f64 * (attn + ff)
}

/// Two-layer MLP connector applied per source token (the baseline path).
pub fn linear_connector_flops(tokens: usize, feature_dim: usize, out_dim: usize) -> f64 {
    let madds = tokens as f64 * (feature_dim as f64 * out_dim as f64 + (out_dim * out_dim) as f64);
    2.0 * madds
}

/// Multiply-add count of the configured variant's forward, mirrored off the
/// actual call sequence, times two.
pub fn connector_flops(cfg: &ConnectorConfig, src: &VisionSourceSpec) -> f64 {
    let t = cfg.token_budget as f64;
    let n = src.tokens as f64;
    let d = src.dim as f64;
    let dm = cfg.model_dim as f64;
    let ff = cfg.ff_dim as f64;
    let out = cfg.out_dim as f64;
    let layers = cfg.layers as f64;

    let stack = |queries: f64| {
        let adapter = (queries + n) * d * dm;
        let per_layer = 2.0 * queries * dm * dm   // q and o projections
            + 2.0 * n * dm * dm                   // k and v projections
            + 2.0 * queries * n * dm              // scores and context
            + 2.0 * queries * dm * ff;            // feedforward
        let proj = queries * dm * out + queries * out * out;
        adapter + layers * per_layer + proj
    };
    let direct = |rows: f64, extra: f64| {
        // adapter + projector only; `extra` counts row-construction work
        rows * d * dm + rows * dm * out + rows * out * out + extra
    };

    let madds = match cfg.variant {
        Variant::AcFormer | Variant::Pr | Variant::RandomPr => stack(t),
        Variant::PoolingPr => stack(t) + (n - 1.0) * d + (t - 1.0) * d,
        Variant::Pooling => direct(t, (n - 1.0) * d + (t - 1.0) * d),
        Variant::TopPDirect => direct(t, 0.0),
        Variant::EvitDirect => direct(t + 1.0, (n - t) * d),
    };
    2.0 * madds
}

fn baseline_total(llm: &LlmCostSpec, src: &VisionSourceSpec, out_dim: usize) -> f64 {
    linear_connector_flops(BASELINE_VISUAL_TOKENS, src.dim, out_dim)
        + llm_prefill_flops(llm, BASELINE_VISUAL_TOKENS + llm.text_tokens)
}

/// Cost of running `cfg`'s variant so that `visual_tokens` rows reach the
/// LLM, against the linear-connector baseline at 577 source tokens.
pub fn estimate_cost(
    cfg: &ConnectorConfig,
    llm: &LlmCostSpec,
    src: &VisionSourceSpec,
    visual_tokens: usize,
) -> Result<CostReport> {
    cfg.validate()?;
    llm.validate()?;
    if visual_tokens == 0 {
        return Err(Error::config("visual token count must be positive"));
    }
    let budget = match cfg.variant {
        Variant::EvitDirect => visual_tokens
            .checked_sub(1)
            .ok_or_else(|| Error::config("fused variant needs at least 2 visual tokens"))?,
        _ => visual_tokens,
    };
    let effective = ConnectorConfig {
        token_budget: budget,
        ..*cfg
    };
    let connector = connector_flops(&effective, src);
    let prefill = llm_prefill_flops(llm, visual_tokens + llm.text_tokens);
    let total = connector + prefill;
    Ok(CostReport {
        variant: cfg.variant.name().to_string(),
        visual_tokens,
        connector_flops: connector,
        llm_prefill_flops: prefill,
        total,
        speed_ratio_vs_baseline: baseline_total(llm, src, cfg.out_dim) / total,
    })
}

/// The baseline's own row: a linear connector handing all 577 source tokens
/// to the LLM. Its ratio is exactly 1.
pub fn estimate_linear_baseline(
    llm: &LlmCostSpec,
    src: &VisionSourceSpec,
    out_dim: usize,
) -> Result<CostReport> {
    llm.validate()?;
    let connector = linear_connector_flops(BASELINE_VISUAL_TOKENS, src.dim, out_dim);
    let prefill = llm_prefill_flops(llm, BASELINE_VISUAL_TOKENS + llm.text_tokens);
    let total = connector + prefill;
    Ok(CostReport {
        variant: "linear".to_string(),
        visual_tokens: BASELINE_VISUAL_TOKENS,
        connector_flops: connector,
        llm_prefill_flops: prefill,
        total,
        speed_ratio_vs_baseline: 1.0,
    })
}

/// One report per budget, holding the variant and dims of `base_cfg` fixed.
pub fn cost_table(
    base_cfg: &ConnectorConfig,
    budgets: &[usize],
    llm: &LlmCostSpec,
    src: &VisionSourceSpec,
) -> Result<Vec<CostReport>> {
    if budgets.is_empty() {
        return Err(Error::config("cost table needs at least one budget"));
    }
    budgets
        .iter()
        .map(|&b| estimate_cost(base_cfg, llm, src, b))
        .collect()
}

/// TSV rendering, stable column order.
pub fn reports_to_tsv(reports: &[CostReport]) -> String {
    let mut out = String::from("variant\tvisual_tokens\tconnector_flops\tllm_flops\tratio\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{:.6e}\t{:.6e}\t{:.4}\n",
            r.variant, r.visual_tokens, r.connector_flops, r.llm_prefill_flops, r.speed_ratio_vs_baseline
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(budget: usize) -> ConnectorConfig {
        ConnectorConfig::base(budget, Variant::AcFormer)
    }

    #[test]
    fn baseline_against_itself_is_one() {
        let llm = LlmCostSpec::decoder_7b(64);
        let r = estimate_linear_baseline(&llm, &VisionSourceSpec::default(), 4096).unwrap();
        assert_eq!(r.speed_ratio_vs_baseline, 1.0);
        assert_eq!(r.visual_tokens, 577);
    }

    #[test]
    fn seven_b_ratios_fall_in_sanity_bands() {
        let llm = LlmCostSpec::decoder_7b(64);
        let src = VisionSourceSpec::default();
        let r145 = estimate_cost(&cfg(145), &llm, &src, 145).unwrap();
        assert!(
            (1.8..=4.0).contains(&r145.speed_ratio_vs_baseline),
            "145-token ratio {} outside [1.8, 4.0]",
            r145.speed_ratio_vs_baseline
        );
        let r257 = estimate_cost(&cfg(257), &llm, &src, 257).unwrap();
        assert!(
            (1.3..=2.5).contains(&r257.speed_ratio_vs_baseline),
            "257-token ratio {} outside [1.3, 2.5]",
            r257.speed_ratio_vs_baseline
        );
    }

    #[test]
    fn ratios_strictly_decrease_with_token_count() {
        let llm = LlmCostSpec::decoder_7b(64);
        let src = VisionSourceSpec::default();
        let reports = cost_table(&cfg(145), &[65, 145, 257, 577], &llm, &src).unwrap();
        assert_eq!(reports.len(), 4);
        for pair in reports.windows(2) {
            assert!(
                pair[0].speed_ratio_vs_baseline > pair[1].speed_ratio_vs_baseline,
                "{} !> {}",
                pair[0].speed_ratio_vs_baseline,
                pair[1].speed_ratio_vs_baseline
            );
        }
    }

    #[test]
    fn duplicate_budgets_give_identical_rows() {
        let llm = LlmCostSpec::decoder_7b(64);
        let src = VisionSourceSpec::default();
        let reports = cost_table(&cfg(145), &[145, 145], &llm, &src).unwrap();
        assert_eq!(reports[0], reports[1]);
    }

    #[test]
    fn linear_connector_is_linear_in_tokens() {
        let one = linear_connector_flops(1, 1024, 4096);
        for t in [2usize, 10, 577] {
            assert_eq!(linear_connector_flops(t, 1024, 4096), one * t as f64);
        }
    }

    #[test]
    fn connector_cost_below_prefill_savings_at_paper_scale() {
        let llm = LlmCostSpec::decoder_7b(64);
        let src = VisionSourceSpec::default();
        let r = estimate_cost(&cfg(145), &llm, &src, 145).unwrap();
        let savings = llm_prefill_flops(&llm, 577 + 64) - r.llm_prefill_flops;
        assert!(r.connector_flops < savings);
    }

    #[test]
    fn stack_madds_hand_count() {
        // T=2, N=4, D=3, dm=4, ff=8, out=5, L=1:
        //   adapter (2+4)*3*4 = 72
        //   layer   2*2*16 + 2*4*16 + 2*2*4*4 + 2*2*4*8 = 64+128+64+128 = 384
        //   proj    2*4*5 + 2*25 = 90
        let cfg = ConnectorConfig {
            layers: 1,
            model_dim: 4,
            heads: 2,
            head_dim: 2,
            ff_dim: 8,
            out_dim: 5,
            token_budget: 2,
            variant: Variant::AcFormer,
        };
        let src = VisionSourceSpec { tokens: 4, dim: 3 };
        assert_eq!(connector_flops(&cfg, &src), 2.0 * (72.0 + 384.0 + 90.0));
    }

    #[test]
    fn evit_counts_one_extra_row() {
        let llm = LlmCostSpec::decoder_7b(64);
        let src = VisionSourceSpec::default();
        let cfg_evit = ConnectorConfig::base(145, Variant::EvitDirect);
        let r = estimate_cost(&cfg_evit, &llm, &src, 146).unwrap();
        assert_eq!(r.visual_tokens, 146);
        assert!(r.connector_flops > 0.0);
    }

    #[test]
    fn tsv_has_header_and_one_line_per_row() {
        let llm = LlmCostSpec::decoder_7b(64);
        let src = VisionSourceSpec::default();
        let reports = cost_table(&cfg(145), &[65, 145], &llm, &src).unwrap();
        let tsv = reports_to_tsv(&reports);
        let lines: Vec<&str> = tsv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("variant\tvisual_tokens"));
        assert!(lines[1].starts_with("acformer\t65\t"));
    }
}
