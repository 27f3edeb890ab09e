//! Named parameter storage shared by every network in the crate.
//!
//! Architectures hold [`ParamId`] handles; the tensors themselves live in a
//! [`ParamSet`]. Several parameter sets of the same architecture (teacher,
//! generator, fake flow) can therefore share one network description.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamSet<F: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<F>>>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| t.as_ref()))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Arc::new(t));
        ParamId(self.tensors.len() - 1)
    }

    /// Flat view of element `idx` across all tensors in declaration order.
    pub fn flat_get(&self, idx: usize) -> F {
        let (t, e) = self.locate(idx);
        self.tensors[t].data()[e]
    }

    pub fn flat_set(&mut self, idx: usize, v: F) {
        let (t, e) = self.locate(idx);
        Arc::make_mut(&mut self.tensors[t]).data_mut()[e] = v;
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (t, tensor) in self.tensors.iter().enumerate() {
            if idx < tensor.len() {
                return (t, idx);
            }
            idx -= tensor.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }

    /// Replace tensors from `(name, tensor)` pairs, requiring an exact match
    /// of names and shapes.
    pub fn load_named(&mut self, named: &[(String, Tensor<F>)]) -> Result<()> {
        ensure!(
            named.len() == self.tensors.len(),
            Format,
            "expected {} tensors, found {}",
            self.tensors.len(),
            named.len()
        );
        for (i, (name, t)) in named.iter().enumerate() {
            ensure!(*name == self.names[i], Format, "tensor {i}: expected {}, found {name}", self.names[i]);
            ensure!(
                t.shape() == self.tensors[i].shape(),
                Format,
                "tensor {name}: shape {:?} vs expected {:?}",
                t.shape(),
                self.tensors[i].shape()
            );
            self.tensors[i] = Arc::new(t.clone());
        }
        Ok(())
    }

    /// Load every tensor into `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant_arc(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn zeros_like(&self) -> Vec<Tensor<F>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
    }

    pub fn bit_equal(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits_eq(*y)) && a.shape() == b.shape())
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<F: Real> BitsEq for F {
    fn to_bits_eq(self, other: Self) -> bool {
        // NaN-aware exact comparison via decode.
        self.integer_decode() == other.integer_decode()
    }
}

/// Graph variables for one bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in parameter order; zeros where none reached a parameter.
    pub fn grads<F: Real>(&self, g: &Graph<F>, grads: &Gradients<F>) -> Vec<Tensor<F>> {
        self.vars
            .iter()
            .map(|&v| {
                grads.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = g.value(v).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}

/// Collects parameters for one architecture under a shared name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub set: ParamSet<f32>,
    rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            set: ParamSet::default(),
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    /// Gaussian init with std `sqrt(gain / fan_in)`.
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, gain: f64) -> ParamId {
        let std = (gain / rows.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng) as f32).collect();
        let n = self.full_name(name);
        self.set.push(n, Tensor::from_vec(rows, cols, data).expect("shape"))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f32) -> ParamId {
        let n = self.full_name(name);
        self.set.push(n, Tensor::full(rows, cols, value))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.constant(name, rows, cols, 0.0)
    }
}

/// Dense layer handle.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scoped(name, |pb| Self {
            w: pb.normal("weight", d_in, d_out, 1.0),
            b: pb.zeros("bias", 1, d_out),
        })
    }

    pub fn zero<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scoped(name, |pb| Self {
            w: pb.zeros("weight", d_in, d_out),
            b: pb.zeros("bias", 1, d_out),
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}
