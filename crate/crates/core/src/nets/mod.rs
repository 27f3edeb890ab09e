//! Network architectures: the per-token-time DiT stack, the ARDiT wrapper with
//! its key/value cache, the convolutional refiner used by the frame decoder and
//! a small MLP velocity model for one-dimensional toy problems.

mod ardit_net;
mod conv;
mod dit;
mod kv;
mod mlp;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use ardit_net::ArditNet;
pub use conv::{ConvRefiner, ConvRefinerConfig};
pub use dit::{full_keys, DiTBlock, DiTStack, FinalLayer, StackOut, TimeEmbed};
pub use kv::KvSession;
pub use mlp::MlpVelocity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            embed_dim: 128,
            ffn_dim: 512,
            dropout: 0.0,
        }
    }
}

impl NetConfig {
    /// Small model used by the desk-scale pipeline.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            embed_dim: 64,
            ffn_dim: 128,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_layers >= 1, Config, "need at least one layer");
        ensure!(self.n_heads >= 1, Config, "need at least one head");
        ensure!(
            self.embed_dim % self.n_heads == 0,
            Config,
            "embed_dim {} not divisible by {} heads",
            self.embed_dim,
            self.n_heads
        );
        ensure!(self.head_dim() % 2 == 0, Config, "head width {} must be even", self.head_dim());
        ensure!(self.ffn_dim >= 1, Config, "ffn_dim must be positive");
        ensure!(self.dropout == 0.0, Config, "dropout is not supported (got {})", self.dropout);
        Ok(())
    }
}
