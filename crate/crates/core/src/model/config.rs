use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    RmsNorm,
    None,
}

/// Shape of a decoder-only transformer. The MLP intermediate units
/// (`d_mlp` per layer) are the neurons under study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub norm: Norm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_mlp: 128,
            vocab_size: 96,
            max_seq_len: 64,
            activation: Activation::Relu,
            norm: Norm::RmsNorm,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            ensure!(v >= 1, Config, "{name} must be at least 1");
        }
        ensure!(
            self.d_model % self.n_heads == 0,
            Config,
            "n_heads ({}) must divide d_model ({})",
            self.n_heads,
            self.d_model
        );
        ensure!(self.vocab_size <= u32::MAX as usize, Config, "vocab_size does not fit a token id");
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total neuron count `n_layers × d_mlp`.
    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_mlp
    }

    pub fn layout(&self) -> NeuronLayout {
        NeuronLayout { n_layers: self.n_layers, d_mlp: self.d_mlp }
    }
}

/// Layer-major neuron layout: flat index = `layer * d_mlp + index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeuronLayout {
    pub n_layers: usize,
    pub d_mlp: usize,
}

impl NeuronLayout {
    pub fn len(&self) -> usize {
        self.n_layers * self.d_mlp
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_neurons(), 512);
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig { n_heads: 5, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { d_mlp: 0, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
