use std::sync::Arc;

use crate::autodiff::{Graph, KvPrefix};
use crate::blockplan::{AttentionPlan, SegmentKind, Slot};
use crate::error::{ensure, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::ArditNet;

/// Incremental evaluation state for one generation request.
///
/// The cache holds, per layer, the rotated keys and values of every finalized
/// slot (text, context and generated tokens). Noisy tokens are evaluated
/// against the cache but never enter it; [`KvSession::extend`] appends tokens
/// only once they are final.
pub struct KvSession<'a> {
    net: &'a ArditNet,
    params: &'a ParamSet,
    text: Vec<usize>,
    slots: Vec<Slot>,
    layers: Vec<KvPrefix<f32>>,
}

impl<'a> KvSession<'a> {
    pub fn new(net: &'a ArditNet, params: &'a ParamSet, text: &[usize]) -> Self {
        let d = net.config().embed_dim;
        let empty = KvPrefix {
            keys: Arc::new(Tensor::zeros(0, d)),
            values: Arc::new(Tensor::zeros(0, d)),
        };
        Self {
            net,
            params,
            text: text.to_vec(),
            slots: Vec::new(),
            layers: vec![empty; net.n_layers()],
        }
    }

    /// Cached entries per layer.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn cached_slots(&self) -> &[Slot] {
        &self.slots
    }

    fn check_prefix(&self, plan: &AttentionPlan) -> Result<()> {
        let n = self.slots.len();
        if plan.len() < n || plan.slots()[..n] != self.slots[..] {
            return Err(Error::State(format!(
                "cache holds {n} entries that do not match the first slots of a {}-slot plan",
                plan.len()
            )));
        }
        Ok(())
    }

    /// Run rows `start..` of `plan` against the cache. Text rows among them
    /// are embedded from the session transcript; `speech` supplies the rest.
    fn run(&self, plan: &AttentionPlan, speech: &Tensor) -> Result<(Option<Tensor>, Vec<(Tensor, Tensor)>)> {
        let start = self.slots.len();
        let new = &plan.slots()[start..];
        let n_text_new = new.iter().take_while(|s| s.kind == SegmentKind::Text).count();
        ensure!(
            new[n_text_new..].iter().all(|s| s.kind != SegmentKind::Text),
            State,
            "text slots must precede speech slots"
        );
        ensure!(
            speech.rows() == new.len() - n_text_new,
            State,
            "{} token rows for {} new speech slots",
            speech.rows(),
            new.len() - n_text_new
        );
        let text_ids: Vec<usize> = new[..n_text_new].iter().map(|s| s.index).collect();
        ensure!(
            text_ids.iter().all(|&i| i < self.text.len()),
            State,
            "plan references text beyond the session transcript"
        );
        let text: Vec<usize> = text_ids.iter().map(|&i| self.text[i]).collect();

        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut parts = Vec::new();
        if !text.is_empty() {
            parts.push(self.net.embed_text(&mut g, &p, &text)?);
        }
        if speech.rows() > 0 {
            let s = g.constant(speech.clone());
            parts.push(self.net.embed_tokens(&mut g, &p, s)?);
        }
        let x = g.concat_rows(&parts)?;
        let keys = Arc::new(plan.key_lists(start..plan.len(), plan.len()));
        let times = &plan.time_tags()[start..];
        let positions = &plan.positions()[start..];
        let out = self
            .net
            .stack()
            .forward(&mut g, &p, x, times, positions, keys, Some(&self.layers))?;
        let velocity = if new.iter().any(|s| s.kind == SegmentKind::Noisy) {
            let v = self.net.head().forward(&mut g, &p, out.hidden, out.cond)?;
            Some(g.value(v).clone())
        } else {
            None
        };
        let kv = out
            .kv
            .iter()
            .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect();
        Ok((velocity, kv))
    }

    /// Velocities for a plan whose slots are the cached ones followed by the
    /// noisy block only.
    pub fn velocity(&self, plan: &AttentionPlan, noisy: &Tensor) -> Result<Tensor> {
        self.check_prefix(plan)?;
        let new = &plan.slots()[self.slots.len()..];
        ensure!(
            !new.is_empty() && new.iter().all(|s| s.kind == SegmentKind::Noisy),
            State,
            "expected only noisy slots beyond the cache"
        );
        let (v, _) = self.run(plan, noisy)?;
        v.ok_or_else(|| Error::State("no noisy slots evaluated".into()))
    }

    /// Append the finalized slots beyond the cache in `plan` (which must hold no
    /// noisy slots) with their token values.
    pub fn extend(&mut self, plan: &AttentionPlan, speech: &Tensor) -> Result<()> {
        self.check_prefix(plan)?;
        let start = self.slots.len();
        ensure!(
            plan.slots()[start..].iter().all(|s| s.kind != SegmentKind::Noisy),
            State,
            "noisy tokens are never cached"
        );
        if plan.len() == start {
            return Ok(());
        }
        let (_, kv) = self.run(plan, speech)?;
        for (layer, (k, v)) in self.layers.iter_mut().zip(kv) {
            layer.keys = Arc::new(Tensor::concat_rows(&[&layer.keys, &k])?);
            layer.values = Arc::new(Tensor::concat_rows(&[&layer.values, &v])?);
        }
        self.slots.extend_from_slice(&plan.slots()[start..]);
        Ok(())
    }
}
