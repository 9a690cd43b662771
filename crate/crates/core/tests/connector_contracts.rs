//! Structural contracts of the aggregation stack: identity at zero residual
//! weights, key/value permutation invariance, budget/shape guarantees,
//! trainability on the toy task, and checkpoint-exact forwards.

use acformer_core::connector::{
    acformer_forward_with_trace, aggregate_stack, aggregate_stack_with_trace,
    aggregator_layer_forward, build_lm_input, make_toy_dataset, toy_train, AggregatorWeights,
    ConnectorConfig, FeatureMap, LayerNormParams, LayerWeights, Variant, LN_EPS,
};
use acformer_core::io::{weights_from_bytes, weights_to_bytes};
use acformer_core::kernel::{gelu_scalar, AttentionWeights, Matrix, Rng};
use acformer_core::selector::AttentionMap;

fn tiny_cfg(budget: usize) -> ConnectorConfig {
    ConnectorConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        head_dim: 8,
        ff_dim: 32,
        out_dim: 8,
        token_budget: budget,
        variant: Variant::AcFormer,
    }
}

fn random_inputs(rng: &mut Rng, n: usize, d: usize, heads: usize) -> (FeatureMap, AttentionMap) {
    let fm = FeatureMap::new(Matrix::from_fn(n, d, |_, _| rng.normal())).unwrap();
    let attn = AttentionMap::new(Matrix::from_fn(heads, n - 1, |_, _| rng.uniform())).unwrap();
    (fm, attn)
}

#[test]
fn zero_residual_weights_make_the_stack_an_identity() {
    let cfg = tiny_cfg(4);
    let mut rng = Rng::new(3);
    let (fm, attn) = random_inputs(&mut rng, 10, 12, 2);
    // training init zeroes both residual-branch output projections
    let w = AggregatorWeights::init(&cfg, 12, &mut rng).unwrap();
    let trace = acformer_forward_with_trace(&fm, &attn, &cfg, &w).unwrap();
    assert_eq!(trace.pre_proj, trace.q_adapted);
}

#[test]
fn aggregator_layer_invariant_under_joint_kv_permutation() {
    let mut rng = Rng::new(5);
    let dm = 8;
    let lw = random_layer(dm, 24, &mut rng);
    let ia = Matrix::from_fn(3, dm, |_, _| rng.normal());
    let rv = Matrix::from_fn(9, dm, |_, _| rng.normal());
    let out = aggregator_layer_forward(&ia, &rv, &lw, 2).unwrap();
    for _ in 0..20 {
        let perm = rng.sample_distinct(9, 9);
        let rv_p = rv.gather_rows(&perm).unwrap();
        let out_p = aggregator_layer_forward(&ia, &rv_p, &lw, 2).unwrap();
        assert!(out.max_abs_diff(&out_p) <= 1e-12);
    }
}

#[test]
fn stack_invariant_under_feature_row_permutation_with_fixed_queries() {
    let cfg = tiny_cfg(4);
    let mut rng = Rng::new(11);
    let fm = FeatureMap::new(Matrix::from_fn(10, 12, |_, _| rng.normal())).unwrap();
    let mut w = AggregatorWeights::init_random(&cfg, 12, &mut rng).unwrap();
    w.query_bank = None;
    let queries = Matrix::from_fn(4, 12, |_, _| rng.normal());
    let out = aggregate_stack(&queries, &fm, &cfg, &w).unwrap();
    let perm = rng.sample_distinct(10, 10);
    let fm_p = FeatureMap::new(fm.matrix().gather_rows(&perm).unwrap()).unwrap();
    let out_p = aggregate_stack(&queries, &fm_p, &cfg, &w).unwrap();
    assert!(out.max_abs_diff(&out_p) <= 1e-12);
}

fn random_layer(dm: usize, ff: usize, rng: &mut Rng) -> LayerWeights {
    let noisy = |rows: usize, cols: usize, rng: &mut Rng| {
        Matrix::from_fn(rows, cols, |_, _| rng.normal() * 0.3)
    };
    LayerWeights {
        ln_attn: LayerNormParams {
            gain: (0..dm).map(|_| 0.7 + rng.uniform()).collect(),
            bias: (0..dm).map(|_| rng.normal() * 0.1).collect(),
        },
        attn: AttentionWeights {
            wq: noisy(dm, dm, rng),
            bq: (0..dm).map(|_| rng.normal() * 0.1).collect(),
            wk: noisy(dm, dm, rng),
            bk: (0..dm).map(|_| rng.normal() * 0.1).collect(),
            wv: noisy(dm, dm, rng),
            bv: (0..dm).map(|_| rng.normal() * 0.1).collect(),
            wo: noisy(dm, dm, rng),
            bo: (0..dm).map(|_| rng.normal() * 0.1).collect(),
        },
        ln_ff: LayerNormParams {
            gain: (0..dm).map(|_| 0.7 + rng.uniform()).collect(),
            bias: (0..dm).map(|_| rng.normal() * 0.1).collect(),
        },
        ff_w1: noisy(dm, ff, rng),
        ff_b1: (0..ff).map(|_| rng.normal() * 0.1).collect(),
        ff_w2: noisy(ff, dm, rng),
        ff_b2: (0..dm).map(|_| rng.normal() * 0.1).collect(),
    }
}

#[test]
fn layer_matches_straight_line_oracle() {
    let mut rng = Rng::new(17);
    let dm = 6;
    let ff = 10;
    let heads = 2;
    let head_dim = dm / heads;
    let lw = random_layer(dm, ff, &mut rng);
    let ia = Matrix::from_fn(3, dm, |_, _| rng.normal());
    let rv = Matrix::from_fn(9, dm, |_, _| rng.normal());
    let got = aggregator_layer_forward(&ia, &rv, &lw, heads).unwrap();

    // scalar-loop re-derivation of the whole block
    let ln = |x: &Matrix, p: &LayerNormParams| {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            let row = x.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            p.gain[c] * (row[c] - mean) / (var + LN_EPS).sqrt() + p.bias[c]
        })
    };
    let proj = |x: &Matrix, w: &Matrix, b: &[f64]| {
        Matrix::from_fn(x.rows(), w.cols(), |r, c| {
            let mut acc = b[c];
            for k in 0..x.cols() {
                acc += x[(r, k)] * w[(k, c)];
            }
            acc
        })
    };
    let qn = ln(&ia, &lw.ln_attn);
    let kvn = ln(&rv, &lw.ln_attn);
    let q = proj(&qn, &lw.attn.wq, &lw.attn.bq);
    let k = proj(&kvn, &lw.attn.wk, &lw.attn.bk);
    let v = proj(&kvn, &lw.attn.wv, &lw.attn.bv);
    let mut ctx = Matrix::zeros(3, dm);
    for h in 0..heads {
        for i in 0..3 {
            let mut logits = [0.0; 9];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for t in 0..head_dim {
                    acc += q[(i, h * head_dim + t)] * k[(j, h * head_dim + t)];
                }
                *l = acc / (head_dim as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for t in 0..head_dim {
                let mut acc = 0.0;
                for j in 0..9 {
                    acc += exps[j] / denom * v[(j, h * head_dim + t)];
                }
                ctx[(i, h * head_dim + t)] = acc;
            }
        }
    }
    let attn_out = proj(&ctx, &lw.attn.wo, &lw.attn.bo);
    let a_out = ia.add(&attn_out).unwrap();
    let ffn_in = ln(&a_out, &lw.ln_ff);
    let h1 = proj(&ffn_in, &lw.ff_w1, &lw.ff_b1).map(gelu_scalar);
    let expected = a_out.add(&proj(&h1, &lw.ff_w2, &lw.ff_b2)).unwrap();
    assert!(got.max_abs_diff(&expected) <= 1e-10);
}

#[test]
fn budget_one_emits_single_cls_row() {
    let cfg = tiny_cfg(1);
    let mut rng = Rng::new(23);
    let (fm, attn) = random_inputs(&mut rng, 10, 12, 2);
    let w = AggregatorWeights::init(&cfg, 12, &mut rng).unwrap();
    let trace = acformer_forward_with_trace(&fm, &attn, &cfg, &w).unwrap();
    assert_eq!(trace.output.rows(), 1);
    assert_eq!(trace.anchors.unwrap().indices(), &[0]);
}

#[test]
fn selection_reads_only_the_attention_map() {
    let cfg = tiny_cfg(5);
    let mut rng = Rng::new(29);
    let (fm, attn) = random_inputs(&mut rng, 12, 8, 2);
    let w = AggregatorWeights::init(&cfg, 8, &mut rng).unwrap();
    let a = acformer_forward_with_trace(&fm, &attn, &cfg, &w).unwrap();
    let doubled = FeatureMap::new(fm.matrix().scale(2.0)).unwrap();
    let b = acformer_forward_with_trace(&doubled, &attn, &cfg, &w).unwrap();
    assert_eq!(a.anchors.unwrap(), b.anchors.unwrap());
}

#[test]
fn output_rows_always_equal_the_budget() {
    let mut rng = Rng::new(31);
    for &(n, budget) in &[(10usize, 1usize), (10, 4), (26, 17), (26, 25)] {
        let cfg = tiny_cfg(budget);
        let (fm, attn) = random_inputs(&mut rng, n, 9, 2);
        let w = AggregatorWeights::init(&cfg, 9, &mut rng).unwrap();
        let trace = acformer_forward_with_trace(&fm, &attn, &cfg, &w).unwrap();
        assert_eq!(trace.output.shape(), (budget, cfg.out_dim));
    }
}

#[test]
fn toy_train_zero_lr_keeps_loss_constant() {
    let cfg = tiny_cfg(4);
    let dataset = make_toy_dataset(&cfg, 12, 10, 4, 2024).unwrap();
    let r = toy_train(&cfg, &dataset, 20, 0.0, 7).unwrap();
    assert_eq!(r.losses.len(), 21);
    for &l in &r.losses {
        assert_eq!(l, r.losses[0]);
    }
}

#[test]
fn toy_train_converges_ten_fold() {
    let cfg = tiny_cfg(4);
    let dataset = make_toy_dataset(&cfg, 12, 10, 8, 2024).unwrap();
    let r = toy_train(&cfg, &dataset, 500, 0.3, 7).unwrap();
    let initial = r.losses[0];
    let last = *r.losses.last().unwrap();
    assert!(
        last <= 0.1 * initial,
        "loss went {initial} -> {last}, less than 10x"
    );
}

#[test]
fn toy_train_traces_are_bit_identical_across_runs() {
    let cfg = tiny_cfg(4);
    let dataset = make_toy_dataset(&cfg, 12, 10, 4, 99).unwrap();
    let a = toy_train(&cfg, &dataset, 50, 0.3, 13).unwrap();
    let b = toy_train(&cfg, &dataset, 50, 0.3, 13).unwrap();
    assert_eq!(a.losses.len(), b.losses.len());
    for (x, y) in a.losses.iter().zip(&b.losses) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn reloaded_checkpoint_reproduces_the_forward_bit_for_bit() {
    let cfg = tiny_cfg(4);
    let mut rng = Rng::new(41);
    let (fm, attn) = random_inputs(&mut rng, 10, 12, 2);
    let w = AggregatorWeights::init_random(&cfg, 12, &mut rng).unwrap();
    let before = acformer_forward_with_trace(&fm, &attn, &cfg, &w).unwrap().output;
    let loaded = weights_from_bytes(&weights_to_bytes(&w)).unwrap();
    let after = acformer_forward_with_trace(&fm, &attn, &cfg, &loaded)
        .unwrap()
        .output;
    assert_eq!(before, after);
}

#[test]
fn checkpoints_interchange_across_variants_with_identical_dims() {
    // weights initialized for the pooled-query variant drive the anchor
    // variant unchanged; only the query construction differs
    let mut rng = Rng::new(43);
    let cfg_pool = ConnectorConfig {
        variant: Variant::PoolingPr,
        ..tiny_cfg(5)
    };
    let w = AggregatorWeights::init_random(&cfg_pool, 12, &mut rng).unwrap();
    let loaded = weights_from_bytes(&weights_to_bytes(&w)).unwrap();
    let cfg_ac = tiny_cfg(5);
    let (fm, attn) = random_inputs(&mut rng, 17, 12, 2); // 16 = 4x4 patches
    let out = acformer_forward_with_trace(&fm, &attn, &cfg_ac, &loaded)
        .unwrap()
        .output;
    assert_eq!(out.shape(), (5, 8));
}

#[test]
fn trace_rejects_mismatched_loss_gradient() {
    let cfg = tiny_cfg(4);
    let mut rng = Rng::new(47);
    let (fm, attn) = random_inputs(&mut rng, 10, 12, 2);
    let w = AggregatorWeights::init(&cfg, 12, &mut rng).unwrap();
    let trace = acformer_forward_with_trace(&fm, &attn, &cfg, &w).unwrap();
    let bad = Matrix::zeros(3, cfg.out_dim);
    assert!(acformer_core::connector::acformer_backward(&bad, &trace, &cfg, &w).is_err());
}

#[test]
fn lm_input_matches_the_budget_plus_text_arithmetic() {
    let mut rng = Rng::new(53);
    let visual = Matrix::from_fn(145, 16, |_, _| rng.normal());
    let text = Matrix::from_fn(32, 16, |_, _| rng.normal());
    let lm = build_lm_input(&visual, &text).unwrap();
    assert_eq!(lm.concatenated().rows(), 177);
}

#[test]
fn stack_requires_matching_query_width() {
    let cfg = tiny_cfg(4);
    let mut rng = Rng::new(59);
    let fm = FeatureMap::new(Matrix::from_fn(10, 12, |_, _| rng.normal())).unwrap();
    let w = AggregatorWeights::init(&cfg, 12, &mut rng).unwrap();
    let queries = Matrix::zeros(4, 11);
    assert!(aggregate_stack_with_trace(&queries, &fm, &cfg, &w).is_err());
}
