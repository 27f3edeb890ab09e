use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, KeyLists, KvPrefix, Var};
use crate::error::{ensure, Result};
use crate::params::{Bound, Linear, ParamBuilder};
use crate::positions::RopeConfig;
use crate::tensor::{Real, Tensor};

use super::NetConfig;

/// Sinusoidal features of `1000 t` followed by a two-layer perceptron.
///
/// Inputs live in `[-1, 1]`: text uses -1, clean tokens 0 and noisy tokens
/// their ODE time.
#[derive(Clone, Debug)]
pub struct TimeEmbed {
    freq_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbed {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, freq_dim: usize, dim: usize) -> Self {
        pb.scoped(name, |pb| Self {
            freq_dim,
            fc1: Linear::new(pb, "fc1", freq_dim, dim),
            fc2: Linear::new(pb, "fc2", dim, dim),
        })
    }

    pub fn features<F: Real>(&self, times: &[f32]) -> Result<Tensor<F>> {
        let half = self.freq_dim / 2;
        let mut out = Tensor::zeros(times.len(), self.freq_dim);
        for (r, &t) in times.iter().enumerate() {
            ensure!((-1.0..=1.0).contains(&t), Input, "time {t} outside [-1, 1]");
            let row = out.row_mut(r);
            for k in 0..half {
                let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
                let arg = 1000.0 * t as f64 * freq;
                row[k] = F::lit(arg.cos());
                row[half + k] = F::lit(arg.sin());
            }
        }
        Ok(out)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, times: &[f32]) -> Result<Var> {
        let x = g.constant(self.features(times)?);
        let h = self.fc1.forward(g, p, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Transformer block with adaLN-Zero modulation computed per token.
#[derive(Clone, Debug)]
pub struct DiTBlock {
    heads: usize,
    dim: usize,
    ada: Linear,
    qkv: Linear,
    out: Linear,
    fc1: Linear,
    fc2: Linear,
}

pub struct BlockOut {
    pub hidden: Var,
    pub keys: Var,
    pub values: Var,
}

impl DiTBlock {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: &NetConfig) -> Self {
        let d = cfg.embed_dim;
        pb.scoped(name, |pb| Self {
            heads: cfg.n_heads,
            dim: d,
            ada: Linear::zero(pb, "ada", d, 6 * d),
            qkv: Linear::new(pb, "qkv", d, 3 * d),
            out: Linear::new(pb, "out", d, d),
            fc1: Linear::new(pb, "fc1", d, cfg.ffn_dim),
            fc2: Linear::new(pb, "fc2", cfg.ffn_dim, d),
        })
    }

    /// `cond` is the activated time embedding of each row of `x`. Keys in
    /// `keys[i]` index `[prefix ; rows of x]`. Returns the updated hidden state
    /// plus this layer's rotated keys and values for the rows of `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        cond: Var,
        positions: &[f64],
        rope: &RopeConfig,
        keys: KeyLists,
        prefix: Option<KvPrefix<F>>,
    ) -> Result<BlockOut> {
        let d = self.dim;
        let m = self.ada.forward(g, p, cond)?;
        let chunk = |g: &mut Graph<F>, i: usize| g.slice_cols(m, i * d, (i + 1) * d);
        let (shift_a, scale_a, gate_a) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
        let (shift_m, scale_m, gate_m) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

        let h = g.layer_norm(x);
        let h = g.modulate(h, scale_a, shift_a)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, 2 * d)?;
        let v = g.slice_cols(qkv, 2 * d, 3 * d)?;
        let q = g.rope(q, self.heads, positions, rope.freqs())?;
        let k = g.rope(k, self.heads, positions, rope.freqs())?;
        let a = g.attention(q, k, v, self.heads, keys, prefix)?;
        let a = self.out.forward(g, p, a)?;
        let a = g.mul(gate_a, a)?;
        let x = g.add(x, a)?;

        let h = g.layer_norm(x);
        let h = g.modulate(h, scale_m, shift_m)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        let h = g.mul(gate_m, h)?;
        let hidden = g.add(x, h)?;
        Ok(BlockOut { hidden, keys: k, values: v })
    }
}

/// adaLN shift/scale followed by a zero-initialized projection.
#[derive(Clone, Debug)]
pub struct FinalLayer {
    dim: usize,
    ada: Linear,
    proj: Linear,
}

impl FinalLayer {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize, d_out: usize) -> Self {
        pb.scoped(name, |pb| Self {
            dim,
            ada: Linear::zero(pb, "ada", dim, 2 * dim),
            proj: Linear::zero(pb, "proj", dim, d_out),
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, hidden: Var, cond: Var) -> Result<Var> {
        let m = self.ada.forward(g, p, cond)?;
        let shift = g.slice_cols(m, 0, self.dim)?;
        let scale = g.slice_cols(m, self.dim, 2 * self.dim)?;
        let h = g.layer_norm(hidden);
        let h = g.modulate(h, scale, shift)?;
        self.proj.forward(g, p, h)
    }
}

/// Time embedding plus a stack of [`DiTBlock`]s sharing one rotary table.
#[derive(Clone, Debug)]
pub struct DiTStack {
    time: TimeEmbed,
    blocks: Vec<DiTBlock>,
    rope: RopeConfig,
}

pub struct StackOut {
    pub hidden: Var,
    /// Activated time embedding, reused by output heads.
    pub cond: Var,
    /// Per-layer rotated keys and values of the input rows.
    pub kv: Vec<(Var, Var)>,
}

impl DiTStack {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let rope = RopeConfig::new(cfg.head_dim())?;
        Ok(pb.scoped(name, |pb| Self {
            time: TimeEmbed::new(pb, "time", cfg.embed_dim, cfg.embed_dim),
            blocks: (0..cfg.n_layers)
                .map(|i| DiTBlock::new(pb, &format!("block{i}"), cfg))
                .collect(),
            rope,
        }))
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn time_embed(&self) -> &TimeEmbed {
        &self.time
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        times: &[f32],
        positions: &[f64],
        keys: KeyLists,
        prefixes: Option<&[KvPrefix<F>]>,
    ) -> Result<StackOut> {
        let n = g.value(x).rows();
        ensure!(times.len() == n && positions.len() == n, Input, "{n} rows vs {} times / {} positions", times.len(), positions.len());
        if let Some(pre) = prefixes {
            ensure!(pre.len() == self.blocks.len(), State, "cache has {} layers, model {}", pre.len(), self.blocks.len());
        }
        let temb = self.time.forward(g, p, times)?;
        let cond = g.silu(temb);
        let mut h = x;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let prefix = prefixes.map(|pre| pre[i].clone());
            let out = block.forward(g, p, h, cond, positions, &self.rope, Arc::clone(&keys), prefix)?;
            kv.push((out.keys, out.values));
            h = out.hidden;
        }
        Ok(StackOut { hidden: h, cond, kv })
    }
}

/// Every row may attend every row.
pub fn full_keys(n: usize) -> KeyLists {
    let all: Vec<u32> = (0..n as u32).collect();
    Arc::new(vec![all; n])
}
