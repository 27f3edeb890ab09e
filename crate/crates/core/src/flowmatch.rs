//! Flow-matching primitives on the linear interpolant
//! `x_t = (1 - t) x + t z`, with `x` data and `z` standard Gaussian noise.
//!
//! The regression target of the velocity network is `z - x`; samples are drawn
//! by integrating `dy = v(y, t) dt` backwards from `t = 1` to `t = 0` with
//! fixed-step Euler updates. The score of the noised marginal is an affine
//! function of the velocity, see [`velocity_to_score`] and
//! [`score_to_velocity`].

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

/// Returns `(1 - t) x + t z`. The endpoints return exact copies.
pub fn interpolate<F: Real>(x: &Tensor<F>, z: &Tensor<F>, t: F) -> Result<Tensor<F>> {
    x.check_same_shape(z)?;
    ensure!(
        t >= F::zero() && t <= F::one(),
        Input,
        "interpolation time {t:?} outside [0, 1]"
    );
    if t == F::zero() {
        return Ok(x.clone());
    }
    if t == F::one() {
        return Ok(z.clone());
    }
    let a = F::one() - t;
    x.zip_map(z, |xv, zv| a * xv + t * zv)
}

/// `|| v_pred - (z - x) ||^2`.
pub fn fm_loss<F: Real>(v_pred: &Tensor<F>, x: &Tensor<F>, z: &Tensor<F>) -> Result<F> {
    v_pred.check_same_shape(x)?;
    x.check_same_shape(z)?;
    Ok(v_pred
        .data()
        .iter()
        .zip(x.data())
        .zip(z.data())
        .map(|((&v, &xv), &zv)| {
            let d = v - (zv - xv);
            d * d
        })
        .sum())
}

/// Uniform training time on `[0, 1]`.
pub fn sample_time<R: Rng>(rng: &mut R) -> f32 {
    rng.gen_range(0.0..=1.0)
}

/// Uniform time on `(0, 1]`, used where a noisy input must not sit at `t = 0`.
pub fn sample_time_open_zero<R: Rng>(rng: &mut R) -> f32 {
    1.0 - rng.gen_range(0.0f32..1.0)
}

/// Fixed-size Euler schedule from `t = 1` down to `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OdeSchedule {
    n_steps: usize,
}

impl OdeSchedule {
    pub fn new(n_steps: usize) -> Result<Self> {
        ensure!(n_steps >= 1, Input, "ODE schedule needs at least one step");
        Ok(Self { n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step_size(&self) -> f32 {
        1.0 / self.n_steps as f32
    }

    /// Visited times `1, 1 - 1/n, ..., 0`; the last entry is exactly zero.
    pub fn times(&self) -> Vec<f32> {
        (0..=self.n_steps)
            .map(|k| (1.0 - k as f64 / self.n_steps as f64) as f32)
            .collect()
    }
}

impl Default for OdeSchedule {
    fn default() -> Self {
        Self { n_steps: 16 }
    }
}

/// A velocity field `v(x_t, t)` over whole tensors.
pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor, t: f32) -> Result<Tensor>;
}

impl<G> VelocityField for G
where
    G: Fn(&Tensor, f32) -> Result<Tensor>,
{
    fn velocity(&self, x_t: &Tensor, t: f32) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// Integrates the probability-flow ODE from `y_1 = w` to `t = 0` with
/// `y_{t-h} = y_t - h v(y_t, t)`.
pub fn euler_sample(model: &impl VelocityField, w: &Tensor, schedule: OdeSchedule) -> Result<Tensor> {
    let times = schedule.times();
    let mut y = w.clone();
    for k in 0..schedule.n_steps() {
        let (t, t_next) = (times[k], times[k + 1]);
        let v = model.velocity(&y, t)?;
        ensure!(
            v.shape() == y.shape(),
            Input,
            "velocity shape {:?} does not match state {:?}",
            v.shape(),
            y.shape()
        );
        y.axpy(-(t - t_next), &v);
    }
    Ok(y)
}

/// Score of the noised marginal from a velocity: `s = -((1 - t) v + x_t) / t`.
///
/// Undefined at `t = 0`; callers needing a score near zero should clamp `t`
/// to at least [`MIN_SCORE_TIME`].
pub fn velocity_to_score<F: Real>(v: &Tensor<F>, x_t: &Tensor<F>, t: F) -> Result<Tensor<F>> {
    v.check_same_shape(x_t)?;
    ensure!(t <= F::one() && t >= F::zero(), Input, "time {t:?} outside [0, 1]");
    if t == F::zero() {
        return Err(Error::Singularity("score is not recoverable from the velocity at t = 0".into()));
    }
    let a = F::one() - t;
    v.zip_map(x_t, |vv, xx| -(a * vv + xx) / t)
}

/// Velocity from a score: `v = -x_t / (1 - t) - t / (1 - t) * s`. Undefined at `t = 1`.
pub fn score_to_velocity<F: Real>(s: &Tensor<F>, x_t: &Tensor<F>, t: F) -> Result<Tensor<F>> {
    s.check_same_shape(x_t)?;
    ensure!(t <= F::one() && t >= F::zero(), Input, "time {t:?} outside [0, 1]");
    if t == F::one() {
        return Err(Error::Singularity("velocity is not recoverable from the score at t = 1".into()));
    }
    let a = F::one() - t;
    s.zip_map(x_t, |ss, xx| -xx / a - t / a * ss)
}

pub const MIN_SCORE_TIME: f32 = 1e-3;

/// Closed-form fields for standard-normal data, where `x_t ~ N(0, (1-t)^2 + t^2)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct StandardGaussianField;

impl StandardGaussianField {
    fn variance(t: f64) -> f64 {
        (1.0 - t) * (1.0 - t) + t * t
    }

    pub fn velocity_scalar(x: f64, t: f64) -> f64 {
        x * (2.0 * t - 1.0) / Self::variance(t)
    }

    pub fn score_scalar(x: f64, t: f64) -> f64 {
        -x / Self::variance(t)
    }

    pub fn score<F: Real>(x: &Tensor<F>, t: f64) -> Tensor<F> {
        x.map(|v| F::lit(Self::score_scalar(v.to_f64().unwrap(), t)))
    }
}

impl VelocityField for StandardGaussianField {
    fn velocity(&self, x_t: &Tensor, t: f32) -> Result<Tensor> {
        Ok(x_t.map(|v| Self::velocity_scalar(v as f64, t as f64) as f32))
    }
}
