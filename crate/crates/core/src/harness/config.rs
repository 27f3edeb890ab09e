use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::language::LanguageSpec;
use crate::ardit::BLOCK_INF;
use crate::error::{ensure, Error, Result};
use crate::latentae::AeConfig;
use crate::nets::NetConfig;

/// Tokens per generation block; `inf` covers the whole sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSize(pub usize);

impl BlockSize {
    pub const INF: Self = Self(BLOCK_INF);
}

impl FromStr for BlockSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") {
            return Ok(Self::INF);
        }
        let n: usize = s.parse().map_err(|_| Error::Config(format!("block size `{s}` is neither a positive integer nor `inf`")))?;
        ensure!(n >= 1, Config, "block size must be positive");
        Ok(Self(n))
    }
}

impl fmt::Display for BlockSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == BLOCK_INF {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for BlockSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == BLOCK_INF {
            s.serialize_str("inf")
        } else {
            s.serialize_u64(self.0 as u64)
        }
    }
}

impl<'de> Deserialize<'de> for BlockSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => BlockSize::from_str(&n.to_string()),
            Raw::Str(s) => BlockSize::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Every knob of the pipeline. Files are flat `key = value` lines; omitted
/// keys keep their defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub alphabet: usize,
    pub frames_per_symbol: usize,
    pub variable_length: bool,
    pub noise_std: f32,
    pub n_train: usize,
    pub n_test: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,

    pub ae_layers: usize,
    pub ae_heads: usize,
    pub ae_dim: usize,
    pub ae_ffn: usize,
    pub d_latent: usize,
    pub refiner_channels: usize,
    pub ae_steps: usize,
    pub ae_masked_steps: usize,
    pub ae_batch: usize,
    pub ae_lr: f32,
    pub beta_mi: f32,
    pub decoder_ode_steps: usize,

    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub block_size: BlockSize,
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f32,
    pub fim_prob: f64,
    pub ode_steps: usize,

    pub dmd_rounds: usize,
    pub dmd_phase1_rounds: usize,
    pub beta_reg_phase1: f32,
    pub beta_reg_phase2: f32,
    pub dmd_batch: usize,
    pub dmd_lr: f32,
    pub dmd_shared_fake_noise: bool,
    pub dmd_fake_updates: usize,

    pub n_samples: usize,
    pub sample_distilled: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alphabet: 8,
            frames_per_symbol: 8,
            variable_length: false,
            noise_std: 0.05,
            n_train: 1000,
            n_test: 40,
            min_symbols: 3,
            max_symbols: 8,
            ae_layers: 2,
            ae_heads: 4,
            ae_dim: 64,
            ae_ffn: 128,
            d_latent: 16,
            refiner_channels: 16,
            ae_steps: 1500,
            ae_masked_steps: 300,
            ae_batch: 8,
            ae_lr: 1e-3,
            beta_mi: 0.035,
            decoder_ode_steps: 16,
            n_layers: 2,
            n_heads: 4,
            embed_dim: 64,
            ffn_dim: 128,
            block_size: BlockSize(1),
            train_steps: 3000,
            train_batch: 8,
            train_lr: 1e-3,
            fim_prob: 0.5,
            ode_steps: 16,
            dmd_rounds: 200,
            dmd_phase1_rounds: 150,
            beta_reg_phase1: 2.0,
            beta_reg_phase2: 0.1,
            dmd_batch: 4,
            dmd_lr: 1e-4,
            dmd_shared_fake_noise: false,
            dmd_fake_updates: 1,
            n_samples: 40,
            sample_distilled: false,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Flat `key = value` text that parses back to `self`.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn language(&self) -> LanguageSpec {
        let mut spec = if self.variable_length {
            LanguageSpec::variable(self.alphabet)
        } else {
            LanguageSpec::fixed(self.alphabet, self.frames_per_symbol)
        };
        spec.noise_std = self.noise_std;
        spec
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            net: NetConfig {
                n_layers: self.ae_layers,
                n_heads: self.ae_heads,
                embed_dim: self.ae_dim,
                ffn_dim: self.ae_ffn,
                dropout: 0.0,
            },
            d_latent: self.d_latent,
            refiner_channels: self.refiner_channels,
            beta_mi: self.beta_mi,
            ..AeConfig::default()
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            embed_dim: self.embed_dim,
            ffn_dim: self.ffn_dim,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.language().validate()?;
        self.net_config().validate()?;
        self.ae_config().net.validate()?;
        ensure!(self.min_symbols >= 1 && self.min_symbols <= self.max_symbols, Config, "bad symbol count range");
        ensure!(self.n_train >= 1 && self.n_test >= 1, Config, "datasets must be nonempty");
        ensure!(self.ode_steps >= 1 && self.decoder_ode_steps >= 1, Config, "ODE steps must be positive");
        ensure!(self.train_batch >= 1 && self.ae_batch >= 1 && self.dmd_batch >= 1, Config, "batch sizes must be positive");
        ensure!(self.dmd_fake_updates >= 1, Config, "dmd_fake_updates must be positive");
        ensure!((0.0..=1.0).contains(&self.fim_prob), Config, "fim_prob must lie in [0, 1]");
        ensure!(self.beta_mi >= 0.0, Config, "beta_mi must be nonnegative");
        ensure!(self.beta_reg_phase1 >= 0.0 && self.beta_reg_phase2 >= 0.0, Config, "beta_reg must be nonnegative");
        ensure!(self.d_latent >= 1 && self.refiner_channels >= 1, Config, "latent and refiner widths must be positive");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_block_sizes() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let c = ExperimentConfig::parse("seed = 7\nblock_size = \"inf\"\n").unwrap();
        assert_eq!((c.seed, c.block_size), (7, BlockSize::INF));
        assert_eq!(ExperimentConfig::parse("block_size = 4").unwrap().block_size, BlockSize(4));
        let c = ExperimentConfig {
            block_size: BlockSize::INF,
            ..cfg
        };
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!("INF".parse::<BlockSize>().unwrap(), BlockSize::INF);
        assert!("0".parse::<BlockSize>().is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        for text in ["nonsense_key = 1", "block_size = 0", "embed_dim = 30", "fim_prob = 2.0", "seed = ="] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
