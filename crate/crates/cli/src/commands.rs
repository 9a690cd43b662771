//! Subcommand definitions and their implementations. Every command prints a
//! machine-readable JSON summary on stdout and writes artifacts atomically.

use crate::config::RunConfig;
use crate::synth::{synthesize, SynthSpec};
use crate::tensorfile::{read_matrix, TensorFile};
use acformer_core::analysis::{
    activated_set, overlap_ratio, pca3, render_attention_heatmap, render_feature_rgb,
    salient_set, HeadSelect,
};
use acformer_core::baselines::connector_forward;
use acformer_core::connector::{
    make_toy_dataset, toy_train, AggregatorWeights, ConnectorConfig, FeatureMap, Variant,
};
use acformer_core::costmodel::{cost_table, reports_to_tsv, LlmCostSpec, VisionSourceSpec};
use acformer_core::error::{Error, Result};
use acformer_core::gradcheck::check_connector_gradients;
use acformer_core::io::{atomic_write, load_weights, matrix_hash, save_weights, write_ppm};
use acformer_core::kernel::Rng;
use acformer_core::selector::{select_anchors, AttentionMap, SelectionBudget};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "acformer",
    version,
    about = "Anchor-driven vision-language connector toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate synthetic feature and attention tensors
    Synth {
        /// Seed; falls back to ACFORMER_SEED, then 0
        #[arg(long)]
        seed: Option<u64>,
        /// Token count including [CLS]
        #[arg(long, default_value_t = 577)]
        tokens: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        /// Plant this many high-attention anchors and record them in a sidecar
        #[arg(long)]
        planted: Option<usize>,
        /// Output directory for features.vtf, attn.vtf and planted.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the progressive anchor selection over an attention tensor
    Select {
        #[arg(long)]
        attn: PathBuf,
        /// Output token budget including [CLS]
        #[arg(long)]
        budget: usize,
    },
    /// Run a connector forward pass
    Forward {
        /// Feature tensor; may instead come from the run config
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        attn: Option<PathBuf>,
        /// acformer|pr|pooling|pooling-pr|random-pr|top-p|evit
        #[arg(long)]
        connector: Option<String>,
        /// Output token budget including [CLS]
        #[arg(long)]
        budget: Option<usize>,
        /// JSON run config; flags override its fields
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Load weights from an ACFW checkpoint instead of seeding new ones
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        save_weights: Option<PathBuf>,
        /// Write the projected tokens as a tensor file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the PCA feature image and the attention heatmap
    Viz {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        attn: Option<PathBuf>,
        /// Head index or "mean"
        #[arg(long, default_value = "mean")]
        head: String,
        /// Output directory for feature.ppm / attention.ppm
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlap between PCA-activated tokens and attention-salient tokens
    Overlap {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        attn: PathBuf,
        /// Set size; defaults to budget - 1 when --budget is given
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Finite-difference check of the connector backward pass
    Gradcheck {
        #[arg(long, default_value_t = 300)]
        probes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Gradient-descent run on the synthetic anchor-regression task
    Train {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// FLOP cost table across token budgets
    Cost {
        #[arg(long, default_value_t = 32)]
        llm_layers: usize,
        #[arg(long, default_value_t = 4096)]
        llm_hidden: usize,
        #[arg(long, default_value_t = 2.6875)]
        ff_mult: f64,
        #[arg(long, default_value_t = 64)]
        text_tokens: usize,
        /// Comma-separated output token budgets
        #[arg(long, default_value = "65,145,257,577")]
        budgets: String,
        #[arg(long, default_value = "acformer")]
        connector: String,
        #[arg(long, default_value_t = 577)]
        src_tokens: usize,
        #[arg(long, default_value_t = 1024)]
        src_dim: usize,
        /// Write the TSV table to this file
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the TSV table instead of the JSON summary
        #[arg(long, default_value_t = false)]
        tsv: bool,
    },
}

/// Seed precedence: flag, then run config, then ACFORMER_SEED, then zero.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    resolve_seed_with(flag, None)
}

fn resolve_seed_with(flag: Option<u64>, config_seed: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config_seed) {
        return Ok(s);
    }
    match std::env::var("ACFORMER_SEED") {
        Ok(text) => text
            .parse()
            .map_err(|_| Error::config(format!("ACFORMER_SEED '{text}' is not an integer"))),
        Err(_) => Ok(0),
    }
}

/// The small configuration the gradient check and toy training default to.
pub fn tiny_config() -> ConnectorConfig {
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

const TINY_FEATURE_DIM: usize = 12;
const TINY_TOKENS: usize = 10;

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_attention(path: &Path) -> Result<AttentionMap> {
    AttentionMap::new(read_matrix(path)?)
}

fn load_features(path: &Path) -> Result<FeatureMap> {
    FeatureMap::new(read_matrix(path)?)
}

/// Everything a command prints/stores; stdout gets the JSON summary.
pub fn run(command: &Command) -> Result<Value> {
    match command {
        Command::Synth {
            seed,
            tokens,
            dim,
            heads,
            planted,
            out,
        } => cmd_synth(resolve_seed(*seed)?, *tokens, *dim, *heads, *planted, out),
        Command::Select { attn, budget } => cmd_select(attn, *budget),
        Command::Forward {
            features,
            attn,
            connector,
            budget,
            config,
            seed,
            weights,
            save_weights,
            out,
        } => cmd_forward(
            features.as_deref(),
            attn.as_deref(),
            connector.as_deref(),
            *budget,
            config,
            *seed,
            weights.as_deref(),
            save_weights.as_deref(),
            out.as_deref(),
        ),
        Command::Viz {
            features,
            attn,
            head,
            out,
        } => cmd_viz(features, attn.as_deref(), head, out),
        Command::Overlap {
            features,
            attn,
            k,
            budget,
        } => cmd_overlap(features, attn, *k, *budget),
        Command::Gradcheck {
            probes,
            seed,
            config,
        } => cmd_gradcheck(*probes, *seed, config),
        Command::Train {
            steps,
            lr,
            samples,
            seed,
            config,
            save_weights,
        } => cmd_train(*steps, *lr, *samples, *seed, config, save_weights.as_deref()),
        Command::Cost {
            llm_layers,
            llm_hidden,
            ff_mult,
            text_tokens,
            budgets,
            connector,
            src_tokens,
            src_dim,
            out,
            tsv,
        } => cmd_cost(
            *llm_layers,
            *llm_hidden,
            *ff_mult,
            *text_tokens,
            budgets,
            connector,
            *src_tokens,
            *src_dim,
            out.as_deref(),
            *tsv,
        ),
    }
}

fn cmd_synth(
    seed: u64,
    tokens: usize,
    dim: usize,
    heads: usize,
    planted: Option<usize>,
    out: &Path,
) -> Result<Value> {
    let result = synthesize(&SynthSpec {
        seed,
        tokens,
        dim,
        heads,
        planted,
    })?;
    std::fs::create_dir_all(out)?;
    let features_path = out.join("features.vtf");
    let attn_path = out.join("attn.vtf");
    TensorFile::from_matrix(&result.features).write(&features_path)?;
    TensorFile::from_matrix(&result.attention).write(&attn_path)?;
    let mut summary = json!({
        "command": "synth",
        "seed": seed,
        "tokens": tokens,
        "dim": dim,
        "heads": heads,
        "structure": if planted.is_some() { "planted-anchors" } else { "random" },
        "features": features_path,
        "attn": attn_path,
    });
    if let Some(seq) = &result.planted_seq {
        let sidecar = out.join("planted.json");
        atomic_write(
            &sidecar,
            serde_json::to_string_pretty(&json!({ "planted_seq_indices": seq }))
                .expect("json encodes")
                .as_bytes(),
        )?;
        summary["planted"] = json!(seq);
        summary["sidecar"] = json!(sidecar);
    }
    Ok(summary)
}

fn cmd_select(attn_path: &Path, budget: usize) -> Result<Value> {
    if budget == 0 {
        return Err(Error::config("budget must include the [CLS] token"));
    }
    let attn = load_attention(attn_path)?;
    let list = select_anchors(&attn, SelectionBudget::new(budget - 1))?;
    Ok(json!({
        "command": "select",
        "budget": budget,
        "t_n": budget - 1,
        "indices": list.indices(),
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_forward(
    features_path: Option<&Path>,
    attn_path: Option<&Path>,
    connector: Option<&str>,
    budget: Option<usize>,
    config: &Option<PathBuf>,
    seed: Option<u64>,
    weights_path: Option<&Path>,
    save_weights_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<Value> {
    let rc = load_run_config(config)?;
    let mut cfg = rc.apply(ConnectorConfig::base(145, Variant::AcFormer))?;
    if let Some(name) = connector {
        cfg.variant = Variant::parse(name)?;
    }
    if let Some(b) = budget {
        cfg.token_budget = b;
    }
    cfg.validate()?;
    let seed = resolve_seed_with(seed, rc.seed)?;

    let features_path = features_path
        .or(rc.features.as_deref())
        .ok_or_else(|| Error::config("forward needs --features (flag or run config)"))?;
    let attn_path = attn_path.or(rc.attn.as_deref());
    let weights_path = weights_path.or(rc.weights.as_deref());

    let features = load_features(features_path)?;
    let attn = match attn_path {
        Some(p) => {
            let a = load_attention(p)?;
            if a.visual_tokens() != features.visual_tokens() {
                return Err(Error::shape(format!(
                    "attention covers {} patches, features have {}",
                    a.visual_tokens(),
                    features.visual_tokens()
                )));
            }
            Some(a)
        }
        None => None,
    };

    let mut rng = Rng::new(seed);
    let weights = match weights_path {
        Some(p) => {
            let w = load_weights(p)?;
            w.check_compatible(&cfg, features.dim())?;
            w
        }
        None => AggregatorWeights::init(&cfg, features.dim(), &mut rng)?,
    };

    // peek at the row indices the variant will use, where that is defined
    let indices: Option<Vec<usize>> = match cfg.variant {
        Variant::AcFormer | Variant::TopPDirect | Variant::EvitDirect => {
            let a = attn.as_ref().ok_or_else(|| {
                Error::config(format!("variant '{}' needs --attn", cfg.variant))
            })?;
            Some(
                select_anchors(a, SelectionBudget::new(cfg.token_budget - 1))?
                    .indices()
                    .to_vec(),
            )
        }
        Variant::RandomPr => {
            let mut peek = rng.clone();
            let mut list = vec![0usize];
            list.extend(
                peek.sample_distinct(features.visual_tokens(), cfg.token_budget - 1)
                    .into_iter()
                    .map(|j| j + 1),
            );
            Some(list)
        }
        _ => None,
    };

    let output = connector_forward(&features, attn.as_ref(), &cfg, &weights, Some(&mut rng))?;
    if !output.is_finite() {
        return Err(Error::numeric("forward produced non-finite values"));
    }

    let mut summary = json!({
        "command": "forward",
        "connector": cfg.variant.name(),
        "budget": cfg.token_budget,
        "output_shape": [output.rows(), output.cols()],
        "seed": seed,
    });
    if let Some(list) = indices {
        summary["indices"] = json!(list);
    }
    if let Some(path) = out {
        TensorFile::from_matrix(&output).write(path)?;
        summary["out"] = json!(path);
    }
    if let Some(path) = save_weights_path {
        save_weights(path, &weights)?;
        summary["weights"] = json!(path);
    }
    Ok(summary)
}

fn cmd_viz(
    features_path: &Path,
    attn_path: Option<&Path>,
    head: &str,
    out: &Path,
) -> Result<Value> {
    let features = load_features(features_path)?;
    std::fs::create_dir_all(out)?;
    let patches = features.patches();
    let projection = pca3(&patches)?;
    let feature_img = render_feature_rgb(&projection)?;
    let feature_out = out.join("feature.ppm");
    write_ppm(&feature_out, &feature_img, matrix_hash(features.matrix()))?;
    let mut summary = json!({
        "command": "viz",
        "feature_image": feature_out,
        "explained_variance": projection.explained_variance,
        "degenerate": projection.degenerate,
    });
    if let Some(p) = attn_path {
        let attn = load_attention(p)?;
        let select = if head == "mean" {
            HeadSelect::Mean
        } else {
            let idx: usize = head
                .parse()
                .map_err(|_| Error::config(format!("--head must be an index or 'mean', got '{head}'")))?;
            HeadSelect::Index(idx)
        };
        let heat = render_attention_heatmap(&attn, select)?;
        let attn_out = out.join("attention.ppm");
        write_ppm(&attn_out, &heat, matrix_hash(attn.weights()))?;
        summary["attention_image"] = json!(attn_out);
        summary["head"] = json!(head);
    }
    Ok(summary)
}

fn cmd_overlap(
    features_path: &Path,
    attn_path: &Path,
    k: Option<usize>,
    budget: Option<usize>,
) -> Result<Value> {
    let features = load_features(features_path)?;
    let attn = load_attention(attn_path)?;
    let k = match (k, budget) {
        (Some(k), _) => k,
        (None, Some(b)) if b >= 2 => b - 1,
        _ => return Err(Error::config("need --k, or --budget of at least 2")),
    };
    if k == 0 || k > features.visual_tokens() {
        return Err(Error::config(format!(
            "k {k} outside [1, {}]",
            features.visual_tokens()
        )));
    }
    let projection = pca3(&features.patches())?;
    let activated = activated_set(&projection, k);
    let salient = salient_set(&attn, k);
    let ratio = overlap_ratio(&activated, &salient)?;
    // report in sequence coordinates (patch j at j + 1)
    let to_seq = |v: &[usize]| v.iter().map(|&j| j + 1).collect::<Vec<_>>();
    Ok(json!({
        "command": "overlap",
        "k": k,
        "ratio": ratio,
        "activated": to_seq(&activated),
        "salient": to_seq(&salient),
    }))
}

fn cmd_gradcheck(probes: usize, seed: Option<u64>, config: &Option<PathBuf>) -> Result<Value> {
    let rc = load_run_config(config)?;
    let cfg = rc.apply(tiny_config())?;
    let seed = resolve_seed_with(seed, rc.seed)?;
    let report = check_connector_gradients(&cfg, TINY_FEATURE_DIM, TINY_TOKENS, probes, seed)?;
    if !report.max_rel_err.is_finite() {
        return Err(Error::numeric("gradient check produced a non-finite error"));
    }
    Ok(json!({
        "command": "gradcheck",
        "probes": report.probes,
        "max_rel_err": report.max_rel_err,
        "worst_site": report.worst_site,
        "seed": seed,
    }))
}

fn cmd_train(
    steps: usize,
    lr: f64,
    samples: usize,
    seed: Option<u64>,
    config: &Option<PathBuf>,
    save_weights_path: Option<&Path>,
) -> Result<Value> {
    let rc = load_run_config(config)?;
    let cfg = rc.apply(tiny_config())?;
    let seed = resolve_seed_with(seed, rc.seed)?;
    let dataset = make_toy_dataset(&cfg, TINY_FEATURE_DIM, TINY_TOKENS, samples, seed ^ 0x9E37)?;
    let result = toy_train(&cfg, &dataset, steps, lr, seed)?;
    let initial = result.losses[0];
    let final_loss = *result.losses.last().expect("nonempty trace");
    let mut summary = json!({
        "command": "train",
        "steps": steps,
        "lr": lr,
        "seed": seed,
        "initial_loss": initial,
        "final_loss": final_loss,
        "loss_trace": result.losses,
    });
    if let Some(path) = save_weights_path {
        save_weights(path, &result.weights)?;
        summary["weights"] = json!(path);
    }
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn cmd_cost(
    llm_layers: usize,
    llm_hidden: usize,
    ff_mult: f64,
    text_tokens: usize,
    budgets: &str,
    connector: &str,
    src_tokens: usize,
    src_dim: usize,
    out: Option<&Path>,
    tsv: bool,
) -> Result<Value> {
    let llm = LlmCostSpec {
        layers: llm_layers,
        hidden: llm_hidden,
        ff_mult,
        text_tokens,
    };
    let src = VisionSourceSpec {
        tokens: src_tokens,
        dim: src_dim,
    };
    let budgets: Vec<usize> = budgets
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad budget '{s}'")))
        })
        .collect::<Result<_>>()?;
    let cfg = ConnectorConfig::base(145, Variant::parse(connector)?);
    let reports = cost_table(&cfg, &budgets, &llm, &src)?;
    let table = reports_to_tsv(&reports);
    if let Some(path) = out {
        atomic_write(path, table.as_bytes())?;
    }
    if tsv {
        print!("{table}");
    }
    let rows: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "variant": r.variant,
                "visual_tokens": r.visual_tokens,
                "connector_flops": r.connector_flops,
                "llm_flops": r.llm_prefill_flops,
                "ratio": r.speed_ratio_vs_baseline,
            })
        })
        .collect();
    let mut summary = json!({ "command": "cost", "rows": rows });
    if let Some(path) = out {
        summary["out"] = json!(path);
    }
    Ok(summary)
}
