//! AdamW with decoupled weight decay, plus a parameter EMA.

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamSet) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let id = crate::params::ParamId(i);
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
    }
}

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f32,
    pub params: ParamSet,
}

impl Ema {
    pub fn new(decay: f32, params: &ParamSet) -> Self {
        Self {
            decay,
            params: params.clone(),
        }
    }

    pub fn update(&mut self, params: &ParamSet) {
        for i in 0..params.len() {
            let id = crate::params::ParamId(i);
            let src = params.get(id).clone();
            let dst = self.params.get_mut(id);
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = self.decay * *d + (1.0 - self.decay) * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = ParamSet::default();
        ps.push("w", Tensor::full(2, 2, 0.5));
        let before = ps.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        opt.step(&mut ps, &[Tensor::zeros(2, 2)]);
        assert!(ps.bit_equal(&before));
    }

    #[test]
    fn descends_quadratic() {
        let mut ps = ParamSet::default();
        let id = ps.push("w", Tensor::full(1, 1, 3.0));
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1), &ps);
        for _ in 0..200 {
            let w = ps.get(id).data()[0];
            opt.step(&mut ps, &[Tensor::full(1, 1, 2.0 * w)]);
        }
        assert!(ps.get(id).data()[0].abs() < 0.1);
    }

    #[test]
    fn ema_tracks() {
        let mut ps = ParamSet::default();
        let id = ps.push("w", Tensor::full(1, 1, 0.0));
        let mut ema = Ema::new(0.5, &ps);
        *ps.get_mut(id) = Tensor::full(1, 1, 1.0);
        ema.update(&ps);
        assert_eq!(ema.params.get(id).data()[0], 0.5);
    }
}
