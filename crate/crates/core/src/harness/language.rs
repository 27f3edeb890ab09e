use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// A toy "speech" language: each symbol renders as a fixed sinusoid pattern
/// of frames, shifted by a per-utterance speaker offset and observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub alphabet: usize,
    /// Frames per symbol, indexed by symbol.
    pub frame_lengths: Vec<usize>,
    pub d_mel: usize,
    pub offset_range: f32,
    pub noise_std: f32,
}

impl Default for LanguageSpec {
    fn default() -> Self {
        Self::fixed(8, 8)
    }
}

impl LanguageSpec {
    pub fn fixed(alphabet: usize, frames: usize) -> Self {
        Self {
            alphabet,
            frame_lengths: vec![frames; alphabet],
            d_mel: 16,
            offset_range: 0.5,
            noise_std: 0.05,
        }
    }

    /// Symbols cycle through 6, 8 and 10 frames.
    pub fn variable(alphabet: usize) -> Self {
        Self {
            frame_lengths: (0..alphabet).map(|k| [6, 8, 10][k % 3]).collect(),
            ..Self::fixed(alphabet, 8)
        }
    }

    pub fn is_fixed_length(&self) -> bool {
        self.frame_lengths.windows(2).all(|w| w[0] == w[1])
    }

    pub fn frames_of(&self, symbol: usize) -> usize {
        self.frame_lengths[symbol]
    }

    pub fn mean_frames(&self) -> f64 {
        self.frame_lengths.iter().sum::<usize>() as f64 / self.alphabet as f64
    }

    /// `sin(2 pi (a l / L + b d / D))` with symbol-specific integer `a`, `b`.
    /// Every column sums to zero over the segment, so the frame mean of a
    /// whole-symbol region is the speaker offset.
    pub fn template(&self, symbol: usize) -> Tensor {
        let l_len = self.frame_lengths[symbol];
        let a = 1 + symbol % 2;
        let b = 1 + symbol / 2;
        let mut t = Tensor::zeros(l_len, self.d_mel);
        for l in 0..l_len {
            for d in 0..self.d_mel {
                let phase = a as f64 * l as f64 / l_len as f64 + b as f64 * d as f64 / self.d_mel as f64;
                t.set(l, d, (2.0 * std::f64::consts::PI * phase).sin() as f32);
            }
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.alphabet >= 2, Config, "alphabet needs at least two symbols");
        ensure!(self.frame_lengths.len() == self.alphabet, Config, "one frame length per symbol required");
        ensure!(self.d_mel >= 2, Config, "feature dimension too small");
        ensure!(self.noise_std >= 0.0 && self.offset_range >= 0.0, Config, "noise and offset must be nonnegative");
        for &l in &self.frame_lengths {
            ensure!(l >= 3, Config, "symbols need at least 3 frames, got {l}");
        }
        ensure!(2 * (1 + (self.alphabet - 1) / 2) < self.d_mel, Config, "alphabet too large for {} features", self.d_mel);
        let margin = 6.0 * self.noise_std;
        for i in 0..self.alphabet {
            ensure!(2 * (1 + i % 2) < self.frame_lengths[i], Config, "symbol {i} pattern aliases");
            let ti = self.template(i);
            for j in 0..i {
                if self.frame_lengths[i] != self.frame_lengths[j] {
                    continue;
                }
                let dist = ti.sub(&self.template(j))?.sum_sq().sqrt();
                ensure!(dist > margin, Config, "symbols {j} and {i} separated by only {dist}");
            }
        }
        Ok(())
    }

    /// Render a transcript with the given offset; returns frames and segment
    /// boundaries (`len + 1` entries).
    pub fn render<R: Rng>(&self, transcript: &[usize], offset: &[f32], rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        ensure!(offset.len() == self.d_mel, Input, "offset has {} dims, expected {}", offset.len(), self.d_mel);
        let mut bounds = vec![0];
        let mut parts = Vec::with_capacity(transcript.len());
        for &s in transcript {
            ensure!(s < self.alphabet, Input, "symbol {s} outside alphabet of {}", self.alphabet);
            parts.push(self.template(s));
            bounds.push(bounds.last().unwrap() + self.frames_of(s));
        }
        let mut frames = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
        let noise = if self.noise_std > 0.0 {
            Some(Normal::new(0.0f32, self.noise_std).expect("valid std"))
        } else {
            None
        };
        for r in 0..frames.rows() {
            for (v, &o) in frames.row_mut(r).iter_mut().zip(offset) {
                *v += o;
                if let Some(n) = &noise {
                    *v += n.sample(rng);
                }
            }
        }
        Ok((frames, bounds))
    }

    pub fn sample_offset<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        (0..self.d_mel)
            .map(|_| if self.offset_range > 0.0 { rng.gen_range(-self.offset_range..=self.offset_range) } else { 0.0 })
            .collect()
    }
}
