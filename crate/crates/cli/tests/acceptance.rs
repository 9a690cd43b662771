//! Acceptance suite. Each criterion runs as its own test and prints one
//! pass/fail line; run with
//! `cargo test -p acformer-cli --test acceptance -- --nocapture`.

use acformer_cli::synth::{synthesize, SynthSpec};
use acformer_cli::tensorfile::TensorFile;
use acformer_core::analysis::{overlap_ratio, pca3};
use acformer_core::baselines::evit_fuse;
use acformer_core::connector::{
    acformer_forward_with_trace, aggregate_stack, make_toy_dataset, toy_train,
    AggregatorWeights, ConnectorConfig, FeatureMap, Variant,
};
use acformer_core::costmodel::{estimate_cost, LlmCostSpec, VisionSourceSpec};
use acformer_core::gradcheck::check_connector_gradients;
use acformer_core::io::{weights_from_bytes, weights_to_bytes};
use acformer_core::kernel::{Matrix, Rng};
use acformer_core::selector::{
    select_anchors, selection_oracle, AttentionMap, SelectionBudget,
};
use std::time::Instant;

fn report(id: &str, result: Result<String, String>) {
    match result {
        Ok(detail) => println!("acceptance {id}: PASS ({detail})"),
        Err(msg) => {
            println!("acceptance {id}: FAIL - {msg}");
            panic!("acceptance {id} failed: {msg}");
        }
    }
}

fn tiny_cfg() -> ConnectorConfig {
    ConnectorConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        head_dim: 8,
        ff_dim: 32,
        out_dim: 8,
        token_budget: 4,
        variant: Variant::AcFormer,
    }
}

/// Attention instances across the head/token grid, a third of them with few
/// distinct score levels and a third with identical rows across heads, both
/// of which force deep duplicate-skipping walks.
fn selector_instance(rng: &mut Rng, heads: usize, n: usize, mode: usize) -> AttentionMap {
    let weights = match mode {
        0 => Matrix::from_fn(heads, n, |_, _| rng.uniform()),
        1 => Matrix::from_fn(heads, n, |_, _| (rng.below(4) as f64) * 0.25),
        _ => {
            let row: Vec<f64> = (0..n).map(|_| (rng.below(3) as f64) * 0.5).collect();
            Matrix::from_fn(heads, n, |_, c| row[c])
        }
    };
    AttentionMap::new(weights).unwrap()
}

#[test]
fn criterion_01_selector_oracle_equivalence() {
    report("01 selector-oracle-equivalence", (|| {
        let start = Instant::now();
        let mut rng = Rng::new(0xACC1);
        let mut instances = 0usize;
        for &heads in &[1usize, 2, 4, 8] {
            for &n in &[16usize, 64, 576] {
                for rep in 0..84 {
                    let mode = rep % 3;
                    let attn = selector_instance(&mut rng, heads, n, mode);
                    let t_n = match rep {
                        0 => 0,
                        1 => n,
                        2 => n - 1,
                        _ => rng.below(n + 1),
                    };
                    let budget = SelectionBudget::new(t_n);
                    let fast = select_anchors(&attn, budget).map_err(|e| e.to_string())?;
                    let naive = selection_oracle(&attn, budget).map_err(|e| e.to_string())?;
                    if fast.indices() != naive.indices() {
                        return Err(format!(
                            "sequence mismatch at heads={heads} n={n} t_n={t_n} mode={mode}"
                        ));
                    }
                    instances += 1;
                }
            }
        }
        let elapsed = start.elapsed();
        if instances < 1000 {
            return Err(format!("only {instances} instances"));
        }
        if elapsed.as_secs_f64() >= 10.0 {
            return Err(format!("took {elapsed:?}, budget is 10 s"));
        }
        Ok(format!("{instances} instances in {elapsed:.2?}"))
    })());
}

#[test]
fn criterion_02_selector_invariants() {
    report("02 selector-invariants", (|| {
        let mut rng = Rng::new(0xACC2);
        let mut checked = 0usize;
        for rep in 0..300 {
            let heads = [1usize, 2, 4, 8][rng.below(4)];
            let n = [16usize, 64, 576][rng.below(3)];
            let attn = selector_instance(&mut rng, heads, n, rep % 3);
            let t_n = rng.below(n + 1);
            let list = select_anchors(&attn, SelectionBudget::new(t_n))
                .map_err(|e| e.to_string())?;
            let idx = list.indices();
            if idx.len() != t_n + 1 {
                return Err(format!("length {} != {}", idx.len(), t_n + 1));
            }
            if idx[0] != 0 {
                return Err("CLS not first".into());
            }
            let mut seen = vec![false; n + 1];
            for &i in idx {
                if i > n || seen[i] {
                    return Err(format!("bad or duplicate index {i}"));
                }
                seen[i] = true;
            }
            // positive per-head rescaling cannot move anything
            let mut scaled = attn.weights().clone();
            for h in 0..heads {
                let factor = 0.01 + rng.uniform() * 100.0;
                for v in scaled.row_mut(h) {
                    *v *= factor;
                }
            }
            let rescaled = AttentionMap::new(scaled).unwrap();
            let again = select_anchors(&rescaled, SelectionBudget::new(t_n))
                .map_err(|e| e.to_string())?;
            if again.indices() != idx {
                return Err("rescaling changed the selection".into());
            }
            checked += 1;
        }
        Ok(format!("{checked} randomized outputs, all invariants hold"))
    })());
}

#[test]
fn criterion_03_planted_anchor_recovery() {
    report("03 planted-anchor-recovery", (|| {
        for seed in 0..100u64 {
            let heads = [1usize, 2, 4, 8][(seed % 4) as usize];
            let k = 1 + (seed % 7) as usize;
            let spec = SynthSpec {
                seed,
                tokens: 40 + (seed % 30) as usize,
                dim: 6,
                heads,
                planted: Some(k),
            };
            let synth = synthesize(&spec).map_err(|e| e.to_string())?;
            let attn = AttentionMap::from_raw_softmax(synth.attention)
                .map_err(|e| e.to_string())?;
            let list = select_anchors(&attn, SelectionBudget::new(k))
                .map_err(|e| e.to_string())?;
            let mut got: Vec<usize> = list.indices()[1..].to_vec();
            let mut want = synth.planted_seq.unwrap();
            if heads == 1 && got != want {
                return Err(format!("seed {seed}: order {got:?} vs planted {want:?}"));
            }
            got.sort_unstable();
            want.sort_unstable();
            if got != want {
                return Err(format!("seed {seed}: recovered {got:?}, planted {want:?}"));
            }
        }
        Ok("100 seeds recovered exactly".into())
    })());
}

#[test]
fn criterion_04_gradient_verification() {
    report("04 gradient-verification", (|| {
        let start = Instant::now();
        let r = check_connector_gradients(&tiny_cfg(), 12, 10, 300, 0xACC4)
            .map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        if r.max_rel_err > 1e-4 {
            return Err(format!("max rel err {} at {}", r.max_rel_err, r.worst_site));
        }
        if elapsed.as_secs_f64() >= 60.0 {
            return Err(format!("took {elapsed:?}, budget is 60 s"));
        }
        Ok(format!(
            "300 probes, max rel err {:.2e} in {elapsed:.2?}",
            r.max_rel_err
        ))
    })());
}

#[test]
fn criterion_05_shape_compression_contract() {
    report("05 shape-compression-contract", (|| {
        let mut rng = Rng::new(0xACC5);
        let features = FeatureMap::new(Matrix::from_fn(577, 1024, |_, _| rng.normal()))
            .map_err(|e| e.to_string())?;
        let attn = AttentionMap::new(Matrix::from_fn(8, 576, |_, _| rng.uniform()))
            .map_err(|e| e.to_string())?;
        for budget in [65usize, 145, 257] {
            let cfg = ConnectorConfig::base(budget, Variant::AcFormer);
            let w = AggregatorWeights::init(&cfg, 1024, &mut rng).map_err(|e| e.to_string())?;
            let trace =
                acformer_forward_with_trace(&features, &attn, &cfg, &w).map_err(|e| e.to_string())?;
            if trace.output.shape() != (budget, cfg.out_dim) {
                return Err(format!(
                    "budget {budget}: output {:?}",
                    trace.output.shape()
                ));
            }
            if budget == 145 {
                // the fused direct-in variant adds exactly one summary row
                let cfg_evit = ConnectorConfig {
                    variant: Variant::EvitDirect,
                    ..cfg
                };
                let out = evit_fuse(&features, &attn, &cfg_evit, &w).map_err(|e| e.to_string())?;
                if out.rows() != 146 {
                    return Err(format!("fused variant gave {} rows, wanted 146", out.rows()));
                }
            }
        }
        Ok("577 tokens compressed to 65/145/257 rows, fused variant 146".into())
    })());
}

#[test]
fn criterion_06_permutation_invariance() {
    report("06 permutation-invariance", (|| {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(0xACC6);
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let n = 8 + rng.below(20);
            let fm = FeatureMap::new(Matrix::from_fn(n, 12, |_, _| rng.normal())).unwrap();
            let mut w =
                AggregatorWeights::init_random(&cfg, 12, &mut rng).map_err(|e| e.to_string())?;
            w.query_bank = None;
            let queries = Matrix::from_fn(cfg.token_budget, 12, |_, _| rng.normal());
            let out = aggregate_stack(&queries, &fm, &cfg, &w).map_err(|e| e.to_string())?;
            let perm = rng.sample_distinct(n, n);
            let fm_p = FeatureMap::new(fm.matrix().gather_rows(&perm).unwrap()).unwrap();
            let out_p = aggregate_stack(&queries, &fm_p, &cfg, &w).map_err(|e| e.to_string())?;
            let diff = out.max_abs_diff(&out_p);
            worst = worst.max(diff);
            if diff > 1e-12 {
                return Err(format!("trial {trial}: drift {diff}"));
            }
        }
        Ok(format!("100 trials, worst drift {worst:.2e}"))
    })());
}

/// Independent dense oracle for the PCA check: naive covariance, orthogonal
/// iteration with Gram-Schmidt, Rayleigh eigenvalues.
fn oracle_top3_eigenvalues(x: &Matrix) -> [f64; 3] {
    let (n, d) = x.shape();
    let mut means = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in means.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for r in 0..n {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[(r, i)] - means[i]) * (x[(r, j)] - means[j]) / n as f64;
            }
        }
    }
    let mut rng = Rng::new(0xFEED);
    let mut q = Matrix::from_fn(d, 3, |_, _| rng.normal());
    let orthonormalize = |m: &mut Matrix| {
        for c in 0..3 {
            for prev in 0..c {
                let dot: f64 = (0..m.rows()).map(|r| m[(r, c)] * m[(r, prev)]).sum();
                for r in 0..m.rows() {
                    m[(r, c)] -= dot * m[(r, prev)];
                }
            }
            let norm: f64 = (0..m.rows()).map(|r| m[(r, c)] * m[(r, c)]).sum::<f64>().sqrt();
            for r in 0..m.rows() {
                m[(r, c)] /= norm;
            }
        }
    };
    orthonormalize(&mut q);
    for _ in 0..1500 {
        let mut z = Matrix::zeros(d, 3);
        for i in 0..d {
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += cov[(i, j)] * q[(j, c)];
                }
                z[(i, c)] = acc;
            }
        }
        orthonormalize(&mut z);
        q = z;
    }
    let mut vals = [0.0; 3];
    for (c, val) in vals.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..d {
            let mut cq = 0.0;
            for j in 0..d {
                cq += cov[(i, j)] * q[(j, c)];
            }
            acc += q[(i, c)] * cq;
        }
        *val = acc;
    }
    vals
}

#[test]
fn criterion_07_pca_oracle() {
    report("07 pca-oracle", (|| {
        let mut rng = Rng::new(0xACC7);
        for trial in 0..50 {
            let n = 12 + rng.below(53); // rows <= 64
            let d = 4 + rng.below(29); // dims <= 32
            let x = Matrix::from_fn(n, d, |_, _| rng.normal());
            let p = pca3(&x).map_err(|e| e.to_string())?;
            let oracle = oracle_top3_eigenvalues(&x);
            let scale = oracle[0].max(1.0);
            for (c, (ev, ov)) in p.explained_variance.iter().zip(&oracle).enumerate() {
                let diff = (ev - ov).abs();
                if diff > 1e-8 * scale {
                    return Err(format!(
                        "trial {trial}: eigenvalue {c}: {ev} vs oracle {ov} (diff {diff:.2e})"
                    ));
                }
            }
        }
        // degenerate behavior: rank-1 and zero-variance inputs
        let dir: Vec<f64> = vec![0.6, -0.8, 0.0, 0.0];
        let rank1 = Matrix::from_fn(10, 4, |r, c| (r as f64 - 4.5) * dir[c]);
        let p = pca3(&rank1).map_err(|e| e.to_string())?;
        let cos: f64 = p.components.row(0).iter().zip(&dir).map(|(a, b)| a * b).sum();
        if cos.abs() < 1.0 - 1e-8 || !p.degenerate {
            return Err("rank-1 case not handled".into());
        }
        if p.explained_variance[1].abs() > 1e-10 || p.explained_variance[2].abs() > 1e-10 {
            return Err("rank-1 trailing variances not zero".into());
        }
        let constant = Matrix::from_fn(8, 4, |_, c| c as f64);
        let p = pca3(&constant).map_err(|e| e.to_string())?;
        if !p.degenerate || p.explained_variance.iter().any(|&v| v != 0.0) {
            return Err("zero-variance case not flagged".into());
        }
        Ok("50 instances within 1e-8, degenerate cases as specified".into())
    })());
}

#[test]
fn criterion_08_toy_trainability() {
    report("08 toy-trainability", (|| {
        let start = Instant::now();
        let cfg = tiny_cfg();
        let dataset = make_toy_dataset(&cfg, 12, 10, 8, 2024).map_err(|e| e.to_string())?;
        let a = toy_train(&cfg, &dataset, 500, 0.3, 7).map_err(|e| e.to_string())?;
        let initial = a.losses[0];
        let final_loss = *a.losses.last().unwrap();
        if final_loss > 0.1 * initial {
            return Err(format!(
                "loss {initial:.4} -> {final_loss:.4}, under 10x reduction"
            ));
        }
        let b = toy_train(&cfg, &dataset, 500, 0.3, 7).map_err(|e| e.to_string())?;
        for (x, y) in a.losses.iter().zip(&b.losses) {
            if x.to_bits() != y.to_bits() {
                return Err("rerun trace not bit-identical".into());
            }
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 120.0 {
            return Err(format!("took {elapsed:?}, budget is 120 s"));
        }
        Ok(format!(
            "MSE {initial:.3} -> {final_loss:.4} ({:.1}x) in {elapsed:.2?}, deterministic",
            initial / final_loss
        ))
    })());
}

#[test]
fn criterion_09_cost_model_sanity_bands() {
    report("09 cost-model-sanity-bands", (|| {
        let llm = LlmCostSpec::decoder_7b(64);
        let src = VisionSourceSpec::default();
        let cfg = ConnectorConfig::base(145, Variant::AcFormer);
        let r145 = estimate_cost(&cfg, &llm, &src, 145).map_err(|e| e.to_string())?;
        if !(1.8..=4.0).contains(&r145.speed_ratio_vs_baseline) {
            return Err(format!(
                "ratio(145 vs 577) = {} outside [1.8, 4.0]",
                r145.speed_ratio_vs_baseline
            ));
        }
        let r257 = estimate_cost(&cfg, &llm, &src, 257).map_err(|e| e.to_string())?;
        if !(1.3..=2.5).contains(&r257.speed_ratio_vs_baseline) {
            return Err(format!(
                "ratio(257 vs 577) = {} outside [1.3, 2.5]",
                r257.speed_ratio_vs_baseline
            ));
        }
        let mut prev = f64::INFINITY;
        for budget in [65usize, 145, 257, 577] {
            let r = estimate_cost(&cfg, &llm, &src, budget).map_err(|e| e.to_string())?;
            if r.speed_ratio_vs_baseline >= prev {
                return Err(format!("ratio not strictly decreasing at {budget}"));
            }
            prev = r.speed_ratio_vs_baseline;
        }
        Ok(format!(
            "ratio(145)={:.2}, ratio(257)={:.2}, strictly decreasing",
            r145.speed_ratio_vs_baseline, r257.speed_ratio_vs_baseline
        ))
    })());
}

#[test]
fn criterion_10_round_trips() {
    report("10 round-trips", (|| {
        // tensor file: parse-then-write is byte-identical
        let mut rng = Rng::new(0xACCA);
        let m = Matrix::from_fn(9, 7, |_, _| rng.normal());
        let bytes = TensorFile::from_matrix(&m).to_bytes();
        let reparsed = TensorFile::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if reparsed.to_bytes() != bytes {
            return Err("tensor file bytes changed across a round trip".into());
        }

        // checkpoint: byte-identical, and the forward after reload matches bitwise
        let cfg = tiny_cfg();
        let fm = FeatureMap::new(Matrix::from_fn(10, 12, |_, _| rng.normal())).unwrap();
        let attn = AttentionMap::new(Matrix::from_fn(2, 9, |_, _| rng.uniform())).unwrap();
        let w = AggregatorWeights::init_random(&cfg, 12, &mut rng).map_err(|e| e.to_string())?;
        let ck = weights_to_bytes(&w);
        let loaded = weights_from_bytes(&ck).map_err(|e| e.to_string())?;
        if weights_to_bytes(&loaded) != ck {
            return Err("checkpoint bytes changed across a round trip".into());
        }
        let before = acformer_forward_with_trace(&fm, &attn, &cfg, &w)
            .map_err(|e| e.to_string())?
            .output;
        let after = acformer_forward_with_trace(&fm, &attn, &cfg, &loaded)
            .map_err(|e| e.to_string())?
            .output;
        for (a, b) in before.as_slice().iter().zip(after.as_slice()) {
            if a.to_bits() != b.to_bits() {
                return Err("forward after reload not bit-identical".into());
            }
        }
        Ok("tensor file and checkpoint byte-exact, reforward bit-identical".into())
    })());
}

#[test]
fn criterion_11_overlap_metric() {
    report("11 overlap-metric", (|| {
        let identical = overlap_ratio(&[3, 1, 4], &[4, 3, 1]).map_err(|e| e.to_string())?;
        if identical != 1.0 {
            return Err(format!("identical sets gave {identical}"));
        }
        let disjoint = overlap_ratio(&[0, 1], &[2, 3]).map_err(|e| e.to_string())?;
        if disjoint != 0.0 {
            return Err(format!("disjoint sets gave {disjoint}"));
        }
        let hand = overlap_ratio(&[0, 1, 2, 3], &[1, 2, 3, 7]).map_err(|e| e.to_string())?;
        if hand != 0.75 {
            return Err(format!("3-of-4 case gave {hand}"));
        }
        Ok("identical 1.0, disjoint 0.0, hand case 0.75".into())
    })());
}
