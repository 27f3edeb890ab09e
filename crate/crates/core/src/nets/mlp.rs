use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::ardit::gaussian;
use crate::error::{ensure, Result};
use crate::flowmatch::sample_time;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bound, Linear, ParamBuilder, ParamSet};
use crate::tensor::{Real, Tensor};

const TIME_FEATURES: usize = 16;

/// Time-conditioned MLP velocity model `v(x, t)` for low-dimensional toys.
#[derive(Clone, Debug)]
pub struct MlpVelocity {
    dim: usize,
    layers: Vec<Linear>,
}

impl MlpVelocity {
    pub fn new<R: Rng>(dim: usize, hidden: usize, depth: usize, rng: &mut R) -> Result<(Self, ParamSet)> {
        ensure!(dim >= 1 && hidden >= 1 && depth >= 1, Config, "MLP sizes must be positive");
        let mut pb = ParamBuilder::new(rng);
        let mut layers = Vec::new();
        let mut d_in = dim + TIME_FEATURES;
        for i in 0..depth {
            layers.push(Linear::new(&mut pb, &format!("fc{i}"), d_in, hidden));
            d_in = hidden;
        }
        layers.push(Linear::new(&mut pb, "out", d_in, dim));
        Ok((Self { dim, layers }, pb.set))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn time_features<F: Real>(times: &[f32]) -> Tensor<F> {
        let mut out = Tensor::zeros(times.len(), TIME_FEATURES);
        for (r, &t) in times.iter().enumerate() {
            let row = out.row_mut(r);
            for k in 0..TIME_FEATURES / 2 {
                let a = t as f64 * std::f64::consts::PI * (k + 1) as f64 / 2.0;
                row[2 * k] = F::lit(a.cos());
                row[2 * k + 1] = F::lit(a.sin());
            }
        }
        out
    }

    /// Row `i` of `x` is evaluated at time `times[i]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var, times: &[f32]) -> Result<Var> {
        let (n, d) = g.value(x).shape();
        ensure!(d == self.dim && times.len() == n, Input, "MLP input {n}x{d} vs {} times", times.len());
        let tf = g.constant(Self::time_features(times));
        let mut h = concat_cols(g, x, tf)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i < last {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Flow-matching fit: each step draws a data batch, per-row times and
    /// noise, and regresses `noise - data`. Returns the last batch loss.
    pub fn fit<R: Rng>(
        &self,
        params: &mut ParamSet,
        steps: usize,
        lr: f32,
        rng: &mut R,
        mut batch: impl FnMut(&mut R) -> Tensor,
    ) -> Result<f32> {
        let mut opt = AdamW::new(AdamWConfig::with_lr(lr), params);
        let mut last = f32::NAN;
        for _ in 0..steps {
            let x = batch(rng);
            ensure!(x.cols() == self.dim, Input, "batch width {} vs model {}", x.cols(), self.dim);
            let times: Vec<f32> = (0..x.rows()).map(|_| sample_time(rng)).collect();
            let z = gaussian(x.rows(), self.dim, rng);
            let mut xt = x.clone();
            for (r, &t) in times.iter().enumerate() {
                for (v, &w) in xt.row_mut(r).iter_mut().zip(z.row(r)) {
                    *v = (1.0 - t) * *v + t * w;
                }
            }
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let xv = g.constant(xt);
            let v = self.forward(&mut g, &p, xv, &times)?;
            let target = g.constant(z.sub(&x)?);
            let diff = g.sub(v, target)?;
            let s = g.sum_sq(diff);
            let loss = g.scale(s, 1.0 / x.len() as f32);
            last = g.scalar(loss);
            let grads = g.backward(loss);
            opt.step(params, &p.grads(&g, &grads));
        }
        Ok(last)
    }

    pub fn velocity(&self, params: &ParamSet, x: &Tensor, t: f32) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let v = self.forward(&mut g, &p, xv, &vec![t; x.rows()])?;
        Ok(g.value(v).clone())
    }
}

/// Column concatenation `[x | c]` built from differentiable ops: `x` is lifted
/// through an identity-padded linear map so gradients reach it.
fn concat_cols<F: Real>(g: &mut Graph<F>, x: Var, c: Var) -> Result<Var> {
    let d = g.value(x).cols();
    let dc = g.value(c).cols();
    let mut lift = Tensor::zeros(d, d + dc);
    for i in 0..d {
        lift.set(i, i, F::one());
    }
    let mut pad = Tensor::zeros(dc, d + dc);
    for i in 0..dc {
        pad.set(i, d + i, F::one());
    }
    let lift = g.constant(lift);
    let pad = g.constant(pad);
    let a = g.matmul(x, lift)?;
    let b = g.matmul(c, pad)?;
    g.add(a, b)
}
