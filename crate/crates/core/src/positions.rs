//! Rotary position embeddings with fractional positions.
//!
//! Text symbol `i` sits at position `i`; latent token `i` sits at `i * rate`
//! with `rate = n_text / n_latent`, so both streams span the same range and the
//! requested latent length alone fixes the speaking rate.

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    freqs: Vec<f64>,
}

impl RopeConfig {
    /// Geometric schedule `base^(-2k / head_dim)` with base 10000.
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_base(head_dim, 10_000.0)
    }

    pub fn with_base(head_dim: usize, base: f64) -> Result<Self> {
        ensure!(head_dim > 0 && head_dim % 2 == 0, Config, "rotary head width {head_dim} must be even and positive");
        ensure!(base > 1.0, Config, "rotary base must exceed 1");
        let freqs = (0..head_dim / 2)
            .map(|k| base.powf(-2.0 * k as f64 / head_dim as f64))
            .collect();
        Ok(Self { head_dim, freqs })
    }

    pub fn from_freqs(freqs: Vec<f64>) -> Result<Self> {
        ensure!(!freqs.is_empty(), Config, "rotary table needs at least one frequency");
        ensure!(freqs.iter().all(|&f| f > 0.0 && f.is_finite()), Config, "rotary frequencies must be positive");
        Ok(Self {
            head_dim: 2 * freqs.len(),
            freqs,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }
}

/// Rotate each pair `(2k, 2k+1)` of `v` by angle `n * freqs[k]`.
pub fn rope_rotate(v: &[f32], n: f64, cfg: &RopeConfig) -> Result<Vec<f32>> {
    ensure!(v.len() == cfg.head_dim, Input, "vector width {} vs rotary head width {}", v.len(), cfg.head_dim);
    let mut out = v.to_vec();
    for (k, &f) in cfg.freqs.iter().enumerate() {
        let (s, c) = (n * f).sin_cos();
        let (a, b) = (v[2 * k] as f64, v[2 * k + 1] as f64);
        out[2 * k] = (a * c - b * s) as f32;
        out[2 * k + 1] = (a * s + b * c) as f32;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionAssignment {
    n_text: usize,
    n_latent: usize,
    rate: f64,
}

impl PositionAssignment {
    pub fn new(n_text: usize, n_latent: usize) -> Result<Self> {
        ensure!(n_text >= 1, Input, "transcript must be nonempty");
        ensure!(n_latent >= 1, Input, "latent length must be positive");
        Ok(Self {
            n_text,
            n_latent,
            rate: n_text as f64 / n_latent as f64,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn text_position(&self, i: usize) -> f64 {
        i as f64
    }

    pub fn speech_position(&self, i: usize) -> f64 {
        i as f64 * self.rate
    }

    pub fn text_positions(&self) -> Vec<f64> {
        (0..self.n_text).map(|i| self.text_position(i)).collect()
    }

    pub fn speech_positions(&self) -> Vec<f64> {
        (0..self.n_latent).map(|i| self.speech_position(i)).collect()
    }
}

pub fn assign_positions(n_text: usize, n_latent: usize) -> Result<PositionAssignment> {
    PositionAssignment::new(n_text, n_latent)
}
