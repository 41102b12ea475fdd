//! Architecture configuration.

use crate::error::{Error, Result};

/// Which attention mechanism the model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Attention multiplied post-softmax by the EWR edge graph, node
    /// features modulated by centrality embeddings.
    Gramformer,
    /// Plain multi-head softmax attention.
    Vanilla,
    /// Pre-softmax additive edge bias from an MLP over q-NN endpoint
    /// features, with centrality encoding.
    Graphormer,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Gramformer => "gramformer",
            Variant::Vanilla => "vanilla",
            Variant::Graphormer => "graphormer",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "gramformer" => Ok(Variant::Gramformer),
            "vanilla" => Ok(Variant::Vanilla),
            "graphormer" => Ok(Variant::Graphormer),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected gramformer, vanilla or graphormer)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Node feature channels C.
    pub channels: usize,
    /// Attention heads S.
    pub heads: usize,
    /// Transformer layers L.
    pub layers: usize,
    /// Fraction of nodes selected as nearest neighbors.
    pub q: f64,
    /// In-degree bound; the centrality bank holds m+1 vectors.
    pub m: usize,
    /// Edge regularization weight λ.
    pub lambda: f64,
    /// Patch stride of the encoder.
    pub patch: usize,
    /// Gaussian width of the density supervision, in image pixels.
    pub sigma: f64,
    pub variant: Variant,
    /// Ablation switches for the gramformer variant.
    pub use_ewr: bool,
    pub use_centrality: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            heads: 4,
            layers: 2,
            q: 0.3,
            m: 18,
            lambda: 0.1,
            patch: 8,
            sigma: 2.0,
            variant: Variant::Gramformer,
            use_ewr: true,
            use_centrality: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.channels % 4 != 0 {
            return Err(Error::config(format!(
                "channels ({}) must be divisible by 4 for the regression head",
                self.channels
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("layers must be >= 1".to_string()));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::config(format!("q must be in (0,1], got {}", self.q)));
        }
        if self.m < 1 {
            return Err(Error::config("m must be >= 1".to_string()));
        }
        if self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.patch == 0 || self.patch % 2 != 0 {
            return Err(Error::config(format!(
                "patch stride must be a positive even number, got {}",
                self.patch
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Whether the attention graph (EWR) path is active.
    pub fn has_ewr(&self) -> bool {
        matches!(self.variant, Variant::Gramformer) && self.use_ewr
    }

    /// Whether centrality embeddings are added to the node features.
    pub fn has_centrality(&self) -> bool {
        match self.variant {
            Variant::Gramformer => self.use_centrality,
            Variant::Vanilla => false,
            Variant::Graphormer => true,
        }
    }

    /// Whether the pre-softmax q-NN edge bias is active.
    pub fn has_edge_bias(&self) -> bool {
        matches!(self.variant, Variant::Graphormer)
    }

    /// Whether the q-NN neighboring graph is needed at all.
    pub fn needs_knn(&self) -> bool {
        self.has_centrality() || self.has_edge_bias()
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}
