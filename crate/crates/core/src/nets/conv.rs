use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvRefinerConfig {
    pub n_layers: usize,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    /// 1-based `(from, to)`: the activated output of layer `from` is added to
    /// the activated output of layer `to`.
    pub taps: Vec<(usize, usize)>,
    pub leak: f32,
}

impl Default for ConvRefinerConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            in_channels: 5,
            mid_channels: 32,
            out_channels: 1,
            taps: vec![(1, 3), (3, 5)],
            leak: 0.2,
        }
    }
}

/// Stack of 3x3 convolutions over a `channels x (height*width)` grid.
#[derive(Clone, Debug)]
pub struct ConvRefiner {
    cfg: ConvRefinerConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl ConvRefiner {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: ConvRefinerConfig) -> Result<Self> {
        ensure!(cfg.n_layers >= 2, Config, "refiner needs at least two layers");
        for &(a, b) in &cfg.taps {
            ensure!(a >= 1 && a < b && b < cfg.n_layers, Config, "bad residual tap {a}->{b}");
        }
        let layers = pb.scoped(name, |pb| {
            (0..cfg.n_layers)
                .map(|i| {
                    let c_in = if i == 0 { cfg.in_channels } else { cfg.mid_channels };
                    let last = i + 1 == cfg.n_layers;
                    let c_out = if last { cfg.out_channels } else { cfg.mid_channels };
                    pb.scoped(&format!("conv{}", i + 1), |pb| {
                        let w = if last {
                            pb.zeros("weight", c_out, c_in * 9)
                        } else {
                            // fan-in is c_in * 9; `normal` divides by rows.
                            pb.normal("weight", c_out, c_in * 9, 2.0 * c_out as f64 / (c_in * 9) as f64)
                        };
                        (w, pb.zeros("bias", c_out, 1))
                    })
                })
                .collect()
        });
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &ConvRefinerConfig {
        &self.cfg
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var, height: usize, width: usize) -> Result<Var> {
        ensure!(
            g.value(x).rows() == self.cfg.in_channels,
            Input,
            "refiner expects {} channels, got {}",
            self.cfg.in_channels,
            g.value(x).rows()
        );
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let layer = i + 1;
            h = g.conv3x3(h, p.var(w), p.var(b), height, width)?;
            if layer < self.cfg.n_layers {
                h = g.leaky_relu(h, F::lit(self.cfg.leak as f64));
            }
            for &(from, to) in &self.cfg.taps {
                if to == layer {
                    h = g.add(h, outs[from - 1])?;
                }
            }
            outs.push(h);
        }
        Ok(h)
    }
}
