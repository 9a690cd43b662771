//! JSON run configuration mirroring the connector config plus a seed.
//! Unknown keys are rejected; dims are validated before anything executes.

use acformer_core::connector::{ConnectorConfig, Variant};
use acformer_core::error::{Error, Result};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub layers: Option<usize>,
    pub model_dim: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub out_dim: Option<usize>,
    pub token_budget: Option<usize>,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    /// Input paths; the matching command-line flags take precedence.
    pub features: Option<PathBuf>,
    pub attn: Option<PathBuf>,
    pub weights: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("bad run config {}: {e}", path.display())))
    }

    /// Overlay this config onto a base; present fields win.
    pub fn apply(&self, base: ConnectorConfig) -> Result<ConnectorConfig> {
        let variant = match &self.variant {
            Some(name) => Variant::parse(name)?,
            None => base.variant,
        };
        let cfg = ConnectorConfig {
            layers: self.layers.unwrap_or(base.layers),
            model_dim: self.model_dim.unwrap_or(base.model_dim),
            heads: self.heads.unwrap_or(base.heads),
            head_dim: self.head_dim.unwrap_or(base.head_dim),
            ff_dim: self.ff_dim.unwrap_or(base.ff_dim),
            out_dim: self.out_dim.unwrap_or(base.out_dim),
            token_budget: self.token_budget.unwrap_or(base.token_budget),
            variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
