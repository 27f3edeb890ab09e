use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::blockplan::{AttentionPlan, SegmentKind};
use crate::error::{ensure, Result};
use crate::params::{Bound, Linear, ParamBuilder, ParamSet};
use crate::tensor::{Real, Tensor};

use super::{DiTStack, FinalLayer, NetConfig};

/// Velocity network over a `(text, speech tokens)` layout described by an
/// [`AttentionPlan`].
#[derive(Clone, Debug)]
pub struct ArditNet {
    cfg: NetConfig,
    vocab: usize,
    d_latent: usize,
    text_embed: Linear,
    token_embed: Linear,
    stack: DiTStack,
    head: FinalLayer,
}

impl ArditNet {
    pub fn new<R: Rng>(cfg: &NetConfig, vocab: usize, d_latent: usize, rng: &mut R) -> Result<(Self, ParamSet)> {
        ensure!(vocab >= 1 && d_latent >= 1, Config, "vocabulary and latent width must be positive");
        let mut pb = ParamBuilder::new(rng);
        let d = cfg.embed_dim;
        let text_embed = Linear::new(&mut pb, "text_embed", vocab, d);
        let token_embed = Linear::new(&mut pb, "token_embed", d_latent, d);
        let stack = DiTStack::new(&mut pb, "stack", cfg)?;
        let head = FinalLayer::new(&mut pb, "head", d, d_latent);
        Ok((
            Self {
                cfg: cfg.clone(),
                vocab,
                d_latent,
                text_embed,
                token_embed,
                stack,
                head,
            },
            pb.set,
        ))
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn d_latent(&self) -> usize {
        self.d_latent
    }

    pub fn n_layers(&self) -> usize {
        self.stack.n_layers()
    }

    pub(crate) fn stack(&self) -> &DiTStack {
        &self.stack
    }

    pub(crate) fn head(&self) -> &FinalLayer {
        &self.head
    }

    pub(crate) fn embed_text<F: Real>(&self, g: &mut Graph<F>, p: &Bound, text: &[usize]) -> Result<Var> {
        let mut one_hot = Tensor::zeros(text.len(), self.vocab);
        for (r, &s) in text.iter().enumerate() {
            ensure!(s < self.vocab, Input, "symbol {s} outside vocabulary of {}", self.vocab);
            one_hot.set(r, s, F::one());
        }
        let x = g.constant(one_hot);
        self.text_embed.forward(g, p, x)
    }

    pub(crate) fn embed_tokens<F: Real>(&self, g: &mut Graph<F>, p: &Bound, speech: Var) -> Result<Var> {
        ensure!(
            g.value(speech).cols() == self.d_latent,
            Input,
            "token width {} vs model latent width {}",
            g.value(speech).cols(),
            self.d_latent
        );
        self.token_embed.forward(g, p, speech)
    }

    /// Evaluate the whole layout and return predictions for `out_rows`.
    ///
    /// `speech` holds one row per non-text slot of `plan`, in layout order.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        text: &[usize],
        speech: Var,
        plan: &AttentionPlan,
        out_rows: &[usize],
    ) -> Result<Var> {
        let n_text = plan.indices_of(SegmentKind::Text).len();
        ensure!(n_text == text.len(), Config, "plan has {n_text} text slots, transcript {}", text.len());
        ensure!(
            g.value(speech).rows() == plan.len() - n_text,
            Config,
            "plan has {} speech slots, got {} token rows",
            plan.len() - n_text,
            g.value(speech).rows()
        );
        ensure!(
            plan.slots()[..n_text].iter().all(|s| s.kind == SegmentKind::Text),
            Config,
            "text must lead the layout"
        );
        let t = self.embed_text(g, p, text)?;
        let s = self.embed_tokens(g, p, speech)?;
        let x = g.concat_rows(&[t, s])?;
        let keys = Arc::new(plan.key_lists(0..plan.len(), plan.len()));
        let out = self
            .stack
            .forward(g, p, x, plan.time_tags(), plan.positions(), keys, None)?;
        let h = g.gather_rows(out.hidden, out_rows)?;
        let c = g.gather_rows(out.cond, out_rows)?;
        self.head.forward(g, p, h, c)
    }

    /// Velocities of every noisy slot in `plan` (constant inputs, no gradient).
    pub fn noisy_velocity(&self, params: &ParamSet, text: &[usize], speech: &Tensor, plan: &AttentionPlan) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let s = g.constant(speech.clone());
        let rows = plan.indices_of(SegmentKind::Noisy);
        let v = self.forward(&mut g, &p, text, s, plan, &rows)?;
        Ok(g.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockplan::{build_infer_step_plan, build_train_plan, BlockPartition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (ArditNet, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = NetConfig {
            n_layers: 2,
            n_heads: 2,
            embed_dim: 16,
            ffn_dim: 32,
            dropout: 0.0,
        };
        let (net, mut ps) = ArditNet::new(&cfg, 5, 3, &mut rng).unwrap();
        for i in 0..ps.numel() {
            let v = ps.flat_get(i) + 0.3 * rng.gen_range(-1.0f32..1.0);
            ps.flat_set(i, v);
        }
        (net, ps)
    }

    fn tokens(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shape() {
        let (net, ps) = model();
        let part = BlockPartition::new(5, 2, 0).unwrap();
        let plan = build_train_plan(3, &part, &[0.5; 3]).unwrap();
        let z = tokens(10, 1);
        let v = net.noisy_velocity(&ps, &[0, 1, 2], &z, &plan).unwrap();
        assert_eq!(v.shape(), (5, 3));
    }

    #[test]
    fn train_plan_matches_per_block_inference() {
        let (net, ps) = model();
        let text = [4, 0, 3];
        let clean = tokens(6, 2);
        let noisy = tokens(6, 3);
        let part = BlockPartition::new(6, 2, 1).unwrap();
        let t_vec = [0.2, 0.6, 0.9, 1.0];
        let plan = build_train_plan(3, &part, &t_vec).unwrap();
        let speech = Tensor::concat_rows(&[&clean, &noisy]).unwrap();
        let batched = net.noisy_velocity(&ps, &text, &speech, &plan).unwrap();
        for (m, r) in part.blocks().iter().enumerate() {
            let step = build_infer_step_plan(3, &part, m, t_vec[m]).unwrap();
            let inp = Tensor::concat_rows(&[&clean.slice_rows(0, r.start), &noisy.slice_rows(r.start, r.end)]).unwrap();
            let v = net.noisy_velocity(&ps, &text, &inp, &step).unwrap();
            assert!(v.max_abs_diff(&batched.slice_rows(r.start, r.end)) <= 1e-5);
        }
    }

    #[test]
    fn text_blind_plan_ignores_text() {
        let (net, ps) = model();
        let part = BlockPartition::new(4, 2, 0).unwrap();
        let plan = build_train_plan(2, &part, &[0.4, 0.8]).unwrap();
        let blind = plan.masked(|q, k| q < 2 || k >= 2);
        let z = tokens(8, 4);
        let a = net.noisy_velocity(&ps, &[0, 1], &z, &blind).unwrap();
        let b = net.noisy_velocity(&ps, &[3, 2], &z, &blind).unwrap();
        assert_eq!(a, b);
        let c = net.noisy_velocity(&ps, &[3, 2], &z, &plan).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn symbol_out_of_vocabulary() {
        let (net, ps) = model();
        let part = BlockPartition::new(2, 2, 0).unwrap();
        let plan = build_train_plan(1, &part, &[0.4]).unwrap();
        assert!(net.noisy_velocity(&ps, &[9], &tokens(4, 0), &plan).is_err());
    }
}
