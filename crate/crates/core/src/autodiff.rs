//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Nodes built only from constants carry no backward state.

use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::tensor::{gemm_into, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Keys visible to each query row of an attention op, as sorted indices into
/// the concatenation `[cached keys ; new keys]`.
pub type KeyLists = Arc<Vec<Vec<u32>>>;

/// Previously computed (rotated) keys and values that new queries may attend.
#[derive(Clone, Debug)]
pub struct KvPrefix<F: Real> {
    pub keys: Arc<Tensor<F>>,
    pub values: Arc<Tensor<F>>,
}

enum Op<F: Real> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Gelu(Var),
    LeakyRelu(Var, F),
    LayerNorm {
        x: Var,
        rstd: Vec<F>,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<F>,
        sin: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: KeyLists,
        prefix: Option<KvPrefix<F>>,
        probs: Vec<F>,
        offsets: Vec<usize>,
    },
    SumSq(Var),
    Sum(Var),
    MeanPoolRows {
        x: Var,
        factor: usize,
    },
    RepeatRows {
        x: Var,
        factor: usize,
    },
    GaussKl {
        mu: Var,
        log_std: Var,
    },
    Reparam {
        mu: Var,
        log_std: Var,
        noise: Arc<Tensor<F>>,
    },
    FramesToChannels {
        x: Var,
        channels: usize,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        cols: Tensor<F>,
    },
}

struct Node<F: Real> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node; `None` where no gradient reached the node.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<F>> {
        self.nodes[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Arc<Tensor<F>>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor<F>>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a constant holding the current value of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value_arc(x);
        self.constant_arc(v)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        ensure!(
            xv.cols() == wv.rows(),
            Input,
            "linear: input width {} vs weight {:?}",
            xv.cols(),
            wv.shape()
        );
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        gemm_into(xv, false, wv, false, &mut out, F::one(), F::zero());
        if let Some(b) = b {
            let bv = self.value(b);
            ensure!(
                bv.len() == wv.cols(),
                Input,
                "linear: bias length {} vs {}",
                bv.len(),
                wv.cols()
            );
            for r in 0..out.rows() {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        let ng = self.ng(&ins);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(&[x]);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
        let a = F::lit(0.044715);
        let half = F::lit(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()));
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > F::zero() { v } else { slope * v });
        let ng = self.ng(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    /// Per-row normalisation to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let eps = F::lit(1e-6);
        let inv_d = F::one() / F::from_usize(d).unwrap();
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    /// `x * (1 + scale) + shift`, elementwise.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sv, hv) = (self.value(x), self.value(scale), self.value(shift));
        xv.check_same_shape(sv)?;
        xv.check_same_shape(hv)?;
        let mut out = xv.clone();
        for ((o, &s), &h) in out.data_mut().iter_mut().zip(sv.data()).zip(hv.data()) {
            *o = *o * (F::one() + s) + h;
        }
        let ng = self.ng(&[x, scale, shift]);
        Ok(self.push(out, Op::Modulate { x, scale, shift }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            start <= end && end <= xv.cols(),
            Input,
            "slice_cols {start}..{end} of {}",
            xv.cols()
        );
        let mut out = Tensor::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            start <= end && end <= xv.rows(),
            Input,
            "slice_rows {start}..{end} of {}",
            xv.rows()
        );
        let out = xv.slice_rows(start, end);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            idx.iter().all(|&i| i < xv.rows()),
            Input,
            "gather_rows index out of range"
        );
        let out = xv.gather_rows(idx);
        let ng = self.ng(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshape(rows, cols)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Rotary embedding applied independently to each of `heads` column
    /// chunks; row `r` is rotated by angle `positions[r] * freqs[k]` on pair `k`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[f64], freqs: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        ensure!(positions.len() == n, Input, "rope: {} positions for {n} rows", positions.len());
        ensure!(heads > 0 && d % heads == 0, Config, "rope: width {d} not divisible by {heads} heads");
        let hd = d / heads;
        ensure!(hd % 2 == 0 && freqs.len() == hd / 2, Config, "rope: head width {hd} vs {} freqs", freqs.len());
        let half = hd / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for &f in freqs {
                let a = p * f;
                cos.push(F::lit(a.cos()));
                sin.push(F::lit(a.sin()));
            }
        }
        let mut out = xv.clone();
        rotate_rows(&mut out, heads, &cos, &sin, false);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Rope { x, heads, cos, sin }, ng))
    }

    /// Multi-head scaled dot-product attention where query `i` only sees the
    /// keys listed in `keys[i]`. Key indices address `[prefix ; k]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: KeyLists,
        prefix: Option<KvPrefix<F>>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.shape();
        ensure!(kv.cols() == d && vv.cols() == d, Input, "attention: width mismatch");
        ensure!(kv.rows() == vv.rows(), Input, "attention: key/value row mismatch");
        ensure!(keys.len() == nq, Input, "attention: {} key lists for {nq} queries", keys.len());
        ensure!(heads > 0 && d % heads == 0, Config, "attention: width {d} vs {heads} heads");
        let n_pre = prefix.as_ref().map_or(0, |p| p.keys.rows());
        if let Some(p) = &prefix {
            ensure!(
                p.keys.cols() == d && p.values.shape() == p.keys.shape(),
                State,
                "attention: cached prefix shape mismatch"
            );
        }
        let n_keys = n_pre + kv.rows();
        let hd = d / heads;
        let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
        let mut offsets = Vec::with_capacity(nq + 1);
        offsets.push(0);
        for list in keys.iter() {
            ensure!(
                list.iter().all(|&j| (j as usize) < n_keys),
                Input,
                "attention: key index out of range"
            );
            offsets.push(offsets.last().unwrap() + list.len());
        }
        let total = *offsets.last().unwrap();
        let mut probs = vec![F::zero(); heads * total];
        let mut out = Tensor::zeros(nq, d);
        let key_row = |j: usize| -> &[F] {
            match &prefix {
                Some(p) if j < n_pre => p.keys.row(j),
                _ => kv.row(j - n_pre),
            }
        };
        let val_row = |j: usize| -> &[F] {
            match &prefix {
                Some(p) if j < n_pre => p.values.row(j),
                _ => vv.row(j - n_pre),
            }
        };
        for h in 0..heads {
            let cs = h * hd..(h + 1) * hd;
            for i in 0..nq {
                let list = &keys[i];
                if list.is_empty() {
                    continue;
                }
                let qi = &qv.row(i)[cs.clone()];
                let p = &mut probs[h * total + offsets[i]..h * total + offsets[i + 1]];
                let mut max = F::neg_infinity();
                for (slot, &j) in p.iter_mut().zip(list.iter()) {
                    let kj = &key_row(j as usize)[cs.clone()];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    *slot = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut z = F::zero();
                for s in p.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let oi = &mut out.row_mut(i)[cs.clone()];
                for (s, &j) in p.iter_mut().zip(list.iter()) {
                    *s = *s / z;
                    let vj = &val_row(j as usize)[cs.clone()];
                    for (o, &vvj) in oi.iter_mut().zip(vj) {
                        *o += *s * vvj;
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                prefix,
                probs,
                offsets,
            },
            ng,
        ))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_sq();
        let ng = self.ng(&[x]);
        self.push(Tensor::full(1, 1, s), Op::SumSq(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::full(1, 1, s), Op::Sum(x), ng)
    }

    /// Mean of consecutive groups of `factor` rows; trailing rows that do not
    /// fill a group are dropped.
    pub fn mean_pool_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        ensure!(factor >= 1, Input, "mean_pool_rows: factor must be positive");
        let n_out = xv.rows() / factor;
        let inv = F::one() / F::from_usize(factor).unwrap();
        let mut out = Tensor::zeros(n_out, xv.cols());
        for r in 0..n_out {
            for s in 0..factor {
                for (o, &v) in out.row_mut(r).iter_mut().zip(xv.row(r * factor + s)) {
                    *o += v * inv;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::MeanPoolRows { x, factor }, ng))
    }

    /// Each input row repeated `factor` times.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let idx: Vec<usize> = (0..xv.rows() * factor).map(|r| r / factor).collect();
        let out = xv.gather_rows(&idx);
        let ng = self.ng(&[x]);
        self.push(out, Op::RepeatRows { x, factor }, ng)
    }

    /// `sum 0.5 * (mu^2 + exp(2 log_std) - 1 - 2 log_std)`: KL to a standard normal.
    pub fn gauss_kl(&mut self, mu: Var, log_std: Var) -> Result<Var> {
        let (m, l) = (self.value(mu), self.value(log_std));
        m.check_same_shape(l)?;
        let half = F::lit(0.5);
        let two = F::lit(2.0);
        let s = m
            .data()
            .iter()
            .zip(l.data())
            .map(|(&mu, &ls)| half * (mu * mu + (two * ls).exp() - F::one() - two * ls))
            .sum::<F>();
        let ng = self.ng(&[mu, log_std]);
        Ok(self.push(Tensor::full(1, 1, s), Op::GaussKl { mu, log_std }, ng))
    }

    /// `mu + exp(log_std) * noise`.
    pub fn reparam(&mut self, mu: Var, log_std: Var, noise: Arc<Tensor<F>>) -> Result<Var> {
        let (m, l) = (self.value(mu), self.value(log_std));
        m.check_same_shape(l)?;
        m.check_same_shape(&noise)?;
        let mut out = m.clone();
        for ((o, &ls), &e) in out.data_mut().iter_mut().zip(l.data()).zip(noise.data()) {
            *o += ls.exp() * e;
        }
        let ng = self.ng(&[mu, log_std]);
        Ok(self.push(out, Op::Reparam { mu, log_std, noise }, ng))
    }

    /// `[n, channels * d]` per-frame features to a `[channels, n * d]` grid.
    pub fn frames_to_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, w) = xv.shape();
        ensure!(channels > 0 && w % channels == 0, Input, "frames_to_channels: {w} not divisible by {channels}");
        let d = w / channels;
        let mut out = Tensor::zeros(channels, n * d);
        for r in 0..n {
            for c in 0..channels {
                out.row_mut(c)[r * d..(r + 1) * d].copy_from_slice(&xv.row(r)[c * d..(c + 1) * d]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::FramesToChannels { x, channels }, ng))
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x` is `[c_in, height*width]`,
    /// `w` is `[c_out, c_in*9]`, `b` has `c_out` entries.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, height: usize, width: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let c_in = xv.rows();
        ensure!(xv.cols() == height * width, Input, "conv3x3: grid size {} vs {height}x{width}", xv.cols());
        ensure!(wv.cols() == c_in * 9, Input, "conv3x3: weight expects {} input channels, got {c_in}", wv.cols() / 9);
        ensure!(bv.len() == wv.rows(), Input, "conv3x3: bias length mismatch");
        let cols = im2col(xv, height, width);
        let mut out = Tensor::zeros(wv.rows(), height * width);
        gemm_into(wv, false, &cols, false, &mut out, F::one(), F::zero());
        for (o, &bb) in bv.data().iter().enumerate() {
            for v in out.row_mut(o) {
                *v += bb;
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            out,
            Op::Conv3x3 {
                x,
                w,
                b,
                height,
                width,
                cols,
            },
            ng,
        ))
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(Tensor::full(1, 1, F::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce(&mut Tensor<F>)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let (r, c) = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.acc_with(grads, *x, |gx| gemm_into(g, false, wv, true, gx, F::one(), F::one()));
                self.acc_with(grads, *w, |gw| gemm_into(xv, true, g, false, gw, F::one(), F::one()));
                if let Some(b) = b {
                    self.acc_with(grads, *b, |gb| {
                        for r in 0..g.rows() {
                            for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-F::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip_map(bv, |x, y| x * y).unwrap());
                self.acc(grads, *b, g.zip_map(av, |x, y| x * y).unwrap());
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.scale(*s)),
            Op::Silu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |v, gg| {
                        let s = sigmoid(v);
                        gg * s * (F::one() + v * (F::one() - s))
                    })
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
                let a = F::lit(0.044715);
                let half = F::lit(0.5);
                let three = F::lit(3.0);
                let gx = self
                    .value(*x)
                    .zip_map(g, |v, gg| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (F::one() + t)
                            + half * v * (F::one() - t * t) * c * (F::one() + three * a * v * v);
                        gg * d
                    })
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |v, gg| if v > F::zero() { gg } else { *slope * gg })
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let (n, d) = y.shape();
                let inv_d = F::one() / F::from_usize(d).unwrap();
                let mut gx = Tensor::zeros(n, d);
                for r in 0..n {
                    let (gy, yr) = (g.row(r), y.row(r));
                    let mean_g = gy.iter().copied().sum::<F>() * inv_d;
                    let mean_gy = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    for ((o, &a), &b) in gx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *o = rstd[r] * (a - mean_g - b * mean_gy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Modulate { x, scale, shift } => {
                let sv = self.value(*scale);
                let xv = self.value(*x);
                self.acc(grads, *x, g.zip_map(sv, |gg, s| gg * (F::one() + s)).unwrap());
                self.acc(grads, *scale, g.zip_map(xv, |gg, v| gg * v).unwrap());
                self.acc(grads, *shift, g.clone());
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        for (o, &v) in gx.row_mut(r)[start..start + g.cols()].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let start = *start;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        for (o, &v) in gx.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                self.acc_with(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    self.acc(grads, *p, g.slice_rows(start, start + n));
                    start += n;
                }
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, g.clone().reshape(r, c).unwrap());
            }
            Op::Rope { x, heads, cos, sin } => {
                let mut gx = g.clone();
                rotate_rows(&mut gx, *heads, cos, sin, true);
                self.acc(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                prefix,
                probs,
                offsets,
            } => self.attention_backward(g, *q, *k, *v, *heads, keys, prefix.as_ref(), probs, offsets, grads),
            Op::SumSq(x) => {
                let two_g = F::lit(2.0) * g.data()[0];
                self.acc(grads, *x, self.value(*x).scale(two_g));
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.acc(grads, *x, Tensor::full(r, c, g.data()[0]));
            }
            Op::MeanPoolRows { x, factor } => {
                let inv = F::one() / F::from_usize(*factor).unwrap();
                let factor = *factor;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        for s in 0..factor {
                            for (o, &v) in gx.row_mut(r * factor + s).iter_mut().zip(g.row(r)) {
                                *o += v * inv;
                            }
                        }
                    }
                });
            }
            Op::RepeatRows { x, factor } => {
                let factor = *factor;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        for (o, &v) in gx.row_mut(r / factor).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::GaussKl { mu, log_std } => {
                let s = g.data()[0];
                let two = F::lit(2.0);
                self.acc(grads, *mu, self.value(*mu).scale(s));
                self.acc(
                    grads,
                    *log_std,
                    self.value(*log_std).map(|l| s * ((two * l).exp() - F::one())),
                );
            }
            Op::Reparam { mu, log_std, noise } => {
                self.acc(grads, *mu, g.clone());
                let mut gl = self.value(*log_std).clone();
                for ((o, &gg), &e) in gl.data_mut().iter_mut().zip(g.data()).zip(noise.data()) {
                    *o = gg * o.exp() * e;
                }
                self.acc(grads, *log_std, gl);
            }
            Op::FramesToChannels { x, channels } => {
                let (n, w) = self.value(*x).shape();
                let d = w / channels;
                let mut gx = Tensor::zeros(n, w);
                for r in 0..n {
                    for c in 0..*channels {
                        gx.row_mut(r)[c * d..(c + 1) * d].copy_from_slice(&g.row(c)[r * d..(r + 1) * d]);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv3x3 {
                x,
                w,
                b,
                height,
                width,
                cols,
            } => {
                let wv = self.value(*w);
                self.acc_with(grads, *w, |gw| gemm_into(g, false, cols, true, gw, F::one(), F::one()));
                self.acc_with(grads, *b, |gb| {
                    for (o, val) in gb.data_mut().iter_mut().enumerate() {
                        *val += g.row(o).iter().copied().sum::<F>();
                    }
                });
                if self.nodes[x.0].needs_grad {
                    let mut gcols = Tensor::zeros(cols.rows(), cols.cols());
                    gemm_into(wv, true, g, false, &mut gcols, F::one(), F::zero());
                    let c_in = self.value(*x).rows();
                    self.acc(grads, *x, col2im(&gcols, c_in, *height, *width));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<F>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: &KeyLists,
        prefix: Option<&KvPrefix<F>>,
        probs: &[F],
        offsets: &[usize],
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.shape();
        let n_pre = prefix.map_or(0, |p| p.keys.rows());
        let hd = d / heads;
        let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
        let total = *offsets.last().unwrap();
        let mut gq = Tensor::zeros(nq, d);
        let mut gk = Tensor::zeros(kv.rows(), d);
        let mut gv = Tensor::zeros(vv.rows(), d);
        let key_row = |j: usize| -> &[F] {
            match prefix {
                Some(p) if j < n_pre => p.keys.row(j),
                _ => kv.row(j - n_pre),
            }
        };
        let val_row = |j: usize| -> &[F] {
            match prefix {
                Some(p) if j < n_pre => p.values.row(j),
                _ => vv.row(j - n_pre),
            }
        };
        let mut dp = Vec::new();
        for h in 0..heads {
            let cs = h * hd..(h + 1) * hd;
            for i in 0..nq {
                let list = &keys[i];
                if list.is_empty() {
                    continue;
                }
                let p = &probs[h * total + offsets[i]..h * total + offsets[i + 1]];
                let go = &g.row(i)[cs.clone()];
                dp.clear();
                let mut dot = F::zero();
                for (&pij, &j) in p.iter().zip(list.iter()) {
                    let j = j as usize;
                    let vj = &val_row(j)[cs.clone()];
                    let d_ij = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<F>();
                    dp.push(d_ij);
                    dot += pij * d_ij;
                    if j >= n_pre {
                        for (o, &gg) in gv.row_mut(j - n_pre)[cs.clone()].iter_mut().zip(go) {
                            *o += pij * gg;
                        }
                    }
                }
                let qi: Vec<F> = qv.row(i)[cs.clone()].to_vec();
                for ((&pij, &j), &d_ij) in p.iter().zip(list.iter()).zip(&dp) {
                    let j = j as usize;
                    let ds = pij * (d_ij - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let kj = &key_row(j)[cs.clone()];
                    for (o, &kk) in gq.row_mut(i)[cs.clone()].iter_mut().zip(kj) {
                        *o += ds * kk;
                    }
                    if j >= n_pre {
                        for (o, &qq) in gk.row_mut(j - n_pre)[cs.clone()].iter_mut().zip(&qi) {
                            *o += ds * qq;
                        }
                    }
                }
            }
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }
}

fn rotate_rows<F: Real>(t: &mut Tensor<F>, heads: usize, cos: &[F], sin: &[F], inverse: bool) {
    let (n, d) = t.shape();
    let hd = d / heads;
    let half = hd / 2;
    for r in 0..n {
        let row = t.row_mut(r);
        for h in 0..heads {
            for kk in 0..half {
                let c = cos[r * half + kk];
                let s = if inverse { -sin[r * half + kk] } else { sin[r * half + kk] };
                let i0 = h * hd + 2 * kk;
                let (a, b) = (row[i0], row[i0 + 1]);
                row[i0] = a * c - b * s;
                row[i0 + 1] = a * s + b * c;
            }
        }
    }
}

fn im2col<F: Real>(x: &Tensor<F>, height: usize, width: usize) -> Tensor<F> {
    let c_in = x.rows();
    let mut cols = Tensor::zeros(c_in * 9, height * width);
    for c in 0..c_in {
        let src = x.row(c);
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = cols.row_mut(c * 9 + ky * 3 + kx);
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for xx in 0..width {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        dst[y * width + xx] = src[sy as usize * width + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(cols: &Tensor<F>, c_in: usize, height: usize, width: usize) -> Tensor<F> {
    let mut x = Tensor::zeros(c_in, height * width);
    for c in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(c * 9 + ky * 3 + kx).to_vec();
                let dst = x.row_mut(c);
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for xx in 0..width {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        dst[sy as usize * width + sx as usize] += src[y * width + xx];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(build)/d(inputs) for a scalar-valued builder.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[n]).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
            for e in 0..input.len() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[e] += eps;
                let mut minus = inputs.clone();
                minus[n].data_mut()[e] -= eps;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.scalar(op) - gm.scalar(om)) / (2.0 * eps);
                let a = analytic.data()[e];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                    "input {n} elem {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn linear_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 5), rand_tensor(&mut rng, 1, 5)];
        check(ins, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let a = g.gelu(y);
            let b = g.silu(a);
            let c = g.leaky_relu(b, 0.2);
            g.sum_sq(c)
        });
    }

    #[test]
    fn layer_norm_modulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![rand_tensor(&mut rng, 3, 6), rand_tensor(&mut rng, 3, 6), rand_tensor(&mut rng, 3, 6), rand_tensor(&mut rng, 3, 6)];
        check(ins, |g, v| {
            let n = g.layer_norm(v[0]);
            let m = g.modulate(n, v[1], v[2]).unwrap();
            let p = g.mul(m, v[3]).unwrap();
            g.sum(p)
        });
    }

    #[test]
    fn row_and_column_plumbing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![rand_tensor(&mut rng, 8, 6), rand_tensor(&mut rng, 2, 6)];
        check(ins, |g, v| {
            let a = g.slice_cols(v[0], 1, 4).unwrap();
            let b = g.slice_rows(v[0], 2, 5).unwrap();
            let c = g.gather_rows(v[0], &[7, 0, 7]).unwrap();
            let d = g.concat_rows(&[v[1], v[1]]).unwrap();
            let e = g.mean_pool_rows(v[0], 4).unwrap();
            let f = g.repeat_rows(v[1], 3);
            let s1 = g.sum_sq(a);
            let s2 = g.sum_sq(b);
            let s3 = g.sum_sq(c);
            let s4 = g.sum_sq(d);
            let s5 = g.sum_sq(e);
            let s6 = g.sum_sq(f);
            let r = g.reshape(v[0], 6, 8).unwrap();
            let ch = g.frames_to_channels(r, 2).unwrap();
            let pw = g.mul(ch, ch).unwrap();
            let s7 = g.sum(pw);
            let t = g.add(s1, s2).unwrap();
            let t = g.add(t, s3).unwrap();
            let t = g.sub(t, s4).unwrap();
            let t = g.add(t, s5).unwrap();
            let t = g.add(t, s6).unwrap();
            let t = g.add(t, s7).unwrap();
            g.scale(t, 0.5)
        });
    }

    #[test]
    fn rope_and_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![rand_tensor(&mut rng, 5, 8), rand_tensor(&mut rng, 5, 8), rand_tensor(&mut rng, 5, 8), rand_tensor(&mut rng, 5, 8)];
        let keys: KeyLists = Arc::new(vec![vec![0], vec![0, 1], vec![0, 1, 2, 4], vec![3], vec![1, 2, 3, 4]]);
        check(ins, move |g, v| {
            let pos = [0.0, 0.5, 1.0, 3.0, -2.0];
            let freqs = [1.0, 0.1];
            let q = g.rope(v[0], 2, &pos, &freqs).unwrap();
            let k = g.rope(v[1], 2, &pos, &freqs).unwrap();
            let a = g.attention(q, k, v[2], 2, keys.clone(), None).unwrap();
            let m = g.mul(a, v[3]).unwrap();
            g.sum(m)
        });
    }

    #[test]
    fn attention_with_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prefix = KvPrefix {
            keys: Arc::new(rand_tensor(&mut rng, 3, 4)),
            values: Arc::new(rand_tensor(&mut rng, 3, 4)),
        };
        let ins = vec![rand_tensor(&mut rng, 2, 4), rand_tensor(&mut rng, 2, 4), rand_tensor(&mut rng, 2, 4)];
        let keys: KeyLists = Arc::new(vec![vec![0, 1, 2, 3], vec![1, 3, 4]]);
        check(ins, move |g, v| {
            let a = g.attention(v[0], v[1], v[2], 1, keys.clone(), Some(prefix.clone())).unwrap();
            g.sum_sq(a)
        });
    }

    #[test]
    fn gaussian_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = Arc::new(rand_tensor(&mut rng, 2, 3));
        let ins = vec![rand_tensor(&mut rng, 2, 3), rand_tensor(&mut rng, 2, 3)];
        check(ins, move |g, v| {
            let kl = g.gauss_kl(v[0], v[1]).unwrap();
            let z = g.reparam(v[0], v[1], noise.clone()).unwrap();
            let s = g.sum_sq(z);
            g.add(kl, s).unwrap()
        });
    }

    #[test]
    fn conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ins = vec![rand_tensor(&mut rng, 2, 12), rand_tensor(&mut rng, 3, 18), rand_tensor(&mut rng, 1, 3)];
        check(ins, |g, v| {
            let y = g.conv3x3(v[0], v[1], v[2], 3, 4).unwrap();
            g.sum_sq(y)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, 2, 12);
        let w = rand_tensor(&mut rng, 1, 18);
        let b = Tensor::zeros(1, 1);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b));
        let y = g.conv3x3(xv, wv, bv, 3, 4).unwrap();
        for yy in 0..3i32 {
            for xx in 0..4i32 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                            if (0..3).contains(&sy) && (0..4).contains(&sx) {
                                acc += w.get(0, (c as i32 * 9 + ky * 3 + kx) as usize) * x.get(c as usize, (sy * 4 + sx) as usize);
                            }
                        }
                    }
                }
                assert!((g.value(y).get(0, (yy * 4 + xx) as usize) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Arc::new(Tensor::full(1, 2, 3.0)));
        let d = g.detach(x);
        let s = g.add(x, d).unwrap();
        let l = g.sum_sq(s);
        let grads = g.backward(l);
        // d/dx (x + sg(x))^2 = 2 (x + x) = 12
        assert_eq!(grads.get(x).unwrap().data(), &[12.0, 12.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn empty_key_list_yields_zero_row() {
        let mut g = Graph::<f32>::new();
        let q = g.constant(Tensor::full(2, 2, 1.0));
        let keys: KeyLists = Arc::new(vec![vec![], vec![0, 1]]);
        let a = g.attention(q, q, q, 1, keys, None).unwrap();
        assert_eq!(g.value(a).row(0), &[0.0, 0.0]);
    }
}
