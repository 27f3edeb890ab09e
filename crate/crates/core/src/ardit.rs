//! Block-autoregressive training and generation on top of [`ArditNet`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::blockplan::{
    build_context_plan, build_fim_infer_plan, build_fim_train_plan, build_infer_step_plan, build_train_plan,
    sample_fim_split, AttentionPlan, BlockPartition, FimSplit, SegmentKind,
};
use crate::error::{ensure, Result};
use crate::flowmatch::{sample_time_open_zero, OdeSchedule};
use crate::nets::{ArditNet, KvSession};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Real, Tensor};

/// Block size that covers any sequence in one block.
pub const BLOCK_INF: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub text: Vec<usize>,
    pub tokens: Tensor,
}

impl Utterance {
    pub fn new(text: Vec<usize>, tokens: Tensor) -> Result<Self> {
        ensure!(!text.is_empty(), Input, "utterance transcript is empty");
        ensure!(tokens.rows() >= 1, Input, "utterance has no tokens");
        Ok(Self { text, tokens })
    }
}

pub fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Partition with a uniformly drawn shift. A block size covering the whole
/// sequence yields a single unshifted block.
pub fn sample_partition<R: Rng>(n: usize, block_size: usize, rng: &mut R) -> Result<BlockPartition> {
    ensure!(block_size >= 1, Input, "block size must be positive");
    if block_size >= n {
        return BlockPartition::unshifted(n, n);
    }
    let shift = rng.gen_range(0..block_size);
    BlockPartition::new(n, block_size, shift)
}

/// Randomness of one teacher-forced loss evaluation.
#[derive(Clone, Debug)]
pub struct TrainDraw {
    pub partition: BlockPartition,
    pub t_vec: Vec<f32>,
    /// Gaussian noise for every token.
    pub noise: Tensor,
}

impl TrainDraw {
    pub fn sample<R: Rng>(n: usize, d: usize, block_size: usize, rng: &mut R) -> Result<Self> {
        let partition = sample_partition(n, block_size, rng)?;
        let t_vec = (0..partition.len()).map(|_| sample_time_open_zero(rng)).collect();
        let noise = gaussian(n, d, rng);
        Ok(Self { partition, t_vec, noise })
    }
}

fn noised(clean: &Tensor, noise: &Tensor, times: &[f32]) -> Tensor {
    let mut out = clean.clone();
    for (r, &t) in times.iter().enumerate() {
        for (v, &w) in out.row_mut(r).iter_mut().zip(noise.row(r)) {
            *v = (1.0 - t) * *v + t * w;
        }
    }
    out
}

/// Mean over blocks of the per-block squared error, from one graph evaluation.
fn block_mean_loss<F: Real>(g: &mut Graph<F>, v: Var, target: Tensor<F>, partition: &BlockPartition) -> Result<Var> {
    let tgt = g.constant(target);
    let diff = g.sub(v, tgt)?;
    let mut per_block = Vec::with_capacity(partition.len());
    for r in partition.blocks() {
        let d = g.slice_rows(diff, r.start, r.end)?;
        per_block.push(g.sum_sq(d));
    }
    let all = g.concat_rows(&per_block)?;
    let s = g.sum(all);
    Ok(g.scale(s, F::lit(1.0 / partition.len() as f64)))
}

/// Teacher-forced loss over all blocks; generic so gradients can be checked
/// in double precision.
pub fn train_loss_graph<F: Real>(
    g: &mut Graph<F>,
    net: &ArditNet,
    p: &Bound,
    utt: &Utterance,
    draw: &TrainDraw,
) -> Result<Var> {
    let z = &utt.tokens;
    let plan = build_train_plan(utt.text.len(), &draw.partition, &draw.t_vec)?;
    let times = draw.partition.expand_times(&draw.t_vec);
    let noisy = noised(z, &draw.noise, &times);
    let speech = g.constant(Tensor::concat_rows(&[z, &noisy])?.cast());
    let rows = plan.indices_of(SegmentKind::Noisy);
    let v = net.forward(g, p, &utt.text, speech, &plan, &rows)?;
    block_mean_loss(g, v, draw.noise.sub(z)?.cast(), &draw.partition)
}

/// Randomness of one fill-in-the-middle loss evaluation.
#[derive(Clone, Debug)]
pub struct FimDraw {
    pub split: FimSplit,
    pub middle: BlockPartition,
    pub t_vec: Vec<f32>,
    /// Noise for the middle tokens.
    pub noise: Tensor,
}

impl FimDraw {
    pub fn sample<R: Rng>(n: usize, d: usize, block_size: usize, rng: &mut R) -> Result<Self> {
        let split = sample_fim_split(n, rng)?;
        Self::with_split(split, d, block_size, rng)
    }

    pub fn with_split<R: Rng>(split: FimSplit, d: usize, block_size: usize, rng: &mut R) -> Result<Self> {
        let middle = sample_partition(split.middle_len(), block_size, rng)?;
        let t_vec = (0..middle.len()).map(|_| sample_time_open_zero(rng)).collect();
        let noise = gaussian(split.middle_len(), d, rng);
        Ok(Self {
            split,
            middle,
            t_vec,
            noise,
        })
    }

    pub fn from_train_draw(draw: &TrainDraw) -> Result<Self> {
        let n = draw.partition.n_tokens();
        Ok(Self {
            split: FimSplit::new(0, n, n)?,
            middle: draw.partition.clone(),
            t_vec: draw.t_vec.clone(),
            noise: draw.noise.clone(),
        })
    }
}

pub fn fim_train_loss_graph(g: &mut Graph, net: &ArditNet, p: &Bound, utt: &Utterance, draw: &FimDraw) -> Result<Var> {
    let z = &utt.tokens;
    ensure!(draw.split.total() == z.rows(), Input, "split covers {} tokens, utterance {}", draw.split.total(), z.rows());
    let plan = build_fim_train_plan(utt.text.len(), &draw.split, &draw.middle, &draw.t_vec)?;
    let mid = draw.split.middle();
    let z_mid = z.slice_rows(mid.start, mid.end);
    let times = draw.middle.expand_times(&draw.t_vec);
    let noisy = noised(&z_mid, &draw.noise, &times);
    let speech = g.constant(Tensor::concat_rows(&[z, &noisy])?);
    let rows = plan.indices_of(SegmentKind::Noisy);
    let v = net.forward(g, p, &utt.text, speech, &plan, &rows)?;
    block_mean_loss(g, v, draw.noise.sub(&z_mid)?, &draw.middle)
}

pub fn train_loss<R: Rng>(net: &ArditNet, params: &ParamSet, utt: &Utterance, block_size: usize, rng: &mut R) -> Result<f32> {
    let draw = TrainDraw::sample(utt.tokens.rows(), utt.tokens.cols(), block_size, rng)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let l = train_loss_graph(&mut g, net, &p, utt, &draw)?;
    Ok(g.scalar(l))
}

pub fn fim_train_loss<R: Rng>(net: &ArditNet, params: &ParamSet, utt: &Utterance, block_size: usize, rng: &mut R) -> Result<f32> {
    let draw = FimDraw::sample(utt.tokens.rows(), utt.tokens.cols(), block_size, rng)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let l = fim_train_loss_graph(&mut g, net, &p, utt, &draw)?;
    Ok(g.scalar(l))
}

#[derive(Clone, Debug)]
pub struct ArditTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub block_size: usize,
    /// Probability that a batch item uses the fill-in-the-middle objective.
    pub fim_prob: f64,
}

impl Default for ArditTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 1e-3,
            block_size: 1,
            fim_prob: 0.0,
        }
    }
}

pub fn train_ardit<R: Rng>(
    net: &ArditNet,
    params: &mut ParamSet,
    data: &[Utterance],
    cfg: &ArditTrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(usize, f32),
) -> Result<()> {
    ensure!(!data.is_empty(), Input, "no training utterances");
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr), params);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let mut terms = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let utt = &data[rng.gen_range(0..data.len())];
            let (n, d) = utt.tokens.shape();
            let term = if cfg.fim_prob > 0.0 && rng.gen_bool(cfg.fim_prob) {
                let draw = FimDraw::sample(n, d, cfg.block_size, rng)?;
                fim_train_loss_graph(&mut g, net, &p, utt, &draw)?
            } else {
                let draw = TrainDraw::sample(n, d, cfg.block_size, rng)?;
                train_loss_graph(&mut g, net, &p, utt, &draw)?
            };
            terms.push(term);
        }
        let all = g.concat_rows(&terms)?;
        let s = g.sum(all);
        let loss = g.scale(s, 1.0 / cfg.batch as f32);
        let grads = g.backward(loss);
        opt.step(params, &p.grads(&g, &grads));
        on_step(step, g.scalar(loss));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub block_size: usize,
    pub schedule: OdeSchedule,
    pub use_cache: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            block_size: 1,
            schedule: OdeSchedule::default(),
            use_cache: true,
        }
    }
}

/// Shared block loop. Layouts are `[text, ctx, generated..., noisy]`;
/// `ctx_plan(m)` covers the finalized slots before block `m` and
/// `step_plan(m, t)` adds the noisy block `m` at time `t`.
#[allow(clippy::too_many_arguments)]
fn run_blocks<R: Rng>(
    net: &ArditNet,
    params: &ParamSet,
    text: &[usize],
    ctx: &Tensor,
    blocks: &BlockPartition,
    ctx_plan: impl Fn(usize) -> Result<AttentionPlan>,
    step_plan: impl Fn(usize, f32) -> Result<AttentionPlan>,
    opts: &GenerateOptions,
    rng: &mut R,
) -> Result<Tensor> {
    let d = net.d_latent();
    let times = opts.schedule.times();
    let h = opts.schedule.step_size();
    let mut generated = Tensor::zeros(0, d);
    let mut session = KvSession::new(net, params, text);
    if opts.use_cache {
        session.extend(&ctx_plan(0)?, ctx)?;
    }
    for (m, r) in blocks.blocks().iter().enumerate() {
        let mut y = gaussian(r.len(), d, rng);
        for &t in &times[..times.len() - 1] {
            let plan = step_plan(m, t)?;
            let v = if opts.use_cache {
                session.velocity(&plan, &y)?
            } else {
                let speech = Tensor::concat_rows(&[ctx, &generated, &y])?;
                net.noisy_velocity(params, text, &speech, &plan)?
            };
            y.axpy(-h, &v);
        }
        generated = Tensor::concat_rows(&[&generated, &y])?;
        if opts.use_cache && m + 1 < blocks.len() {
            session.extend(&ctx_plan(m + 1)?, &y)?;
        }
    }
    Ok(generated)
}

/// Generate exactly `n_latent` tokens block by block.
pub fn generate<R: Rng>(
    net: &ArditNet,
    params: &ParamSet,
    text: &[usize],
    n_latent: usize,
    opts: &GenerateOptions,
    rng: &mut R,
) -> Result<Tensor> {
    ensure!(n_latent >= 1, Input, "requested length must be positive");
    ensure!(!text.is_empty(), Input, "transcript is empty");
    let part = BlockPartition::unshifted(n_latent, opts.block_size.min(n_latent))?;
    let n_text = text.len();
    let ctx = Tensor::zeros(0, net.d_latent());
    run_blocks(
        net,
        params,
        text,
        &ctx,
        &part,
        |m| build_context_plan(n_text, &part, part.blocks().get(m).map_or(n_latent, |r| r.start)),
        |m, t| build_infer_step_plan(n_text, &part, m, t),
        opts,
        rng,
    )
}

/// Fill tokens `split.middle()` given the surrounding tokens of `context`
/// (its middle rows are ignored). Prefix and suffix are copied verbatim.
pub fn fim_generate<R: Rng>(
    net: &ArditNet,
    params: &ParamSet,
    text: &[usize],
    context: &Tensor,
    split: &FimSplit,
    opts: &GenerateOptions,
    rng: &mut R,
) -> Result<Tensor> {
    ensure!(
        context.rows() == split.total(),
        Input,
        "context has {} tokens, split expects {}",
        context.rows(),
        split.total()
    );
    ensure!(context.cols() == net.d_latent(), Input, "context width {} vs {}", context.cols(), net.d_latent());
    let mid = split.middle();
    let middle = BlockPartition::unshifted(mid.len(), opts.block_size.min(mid.len()))?;
    let prefix = context.slice_rows(0, mid.start);
    let suffix = context.slice_rows(mid.end, split.total());
    let ctx = Tensor::concat_rows(&[&prefix, &suffix])?;
    let n_text = text.len();
    let generated = run_blocks(
        net,
        params,
        text,
        &ctx,
        &middle,
        |m| build_fim_infer_plan(n_text, split, &middle, m, None),
        |m, t| build_fim_infer_plan(n_text, split, &middle, m, Some(t)),
        opts,
        rng,
    )?;
    Tensor::concat_rows(&[&prefix, &generated, &suffix])
}

/// Per-symbol duration statistics for total-length estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationModel {
    /// Mean seconds per ordinary symbol.
    pub rho: f64,
    /// Additive seconds for punctuation symbols; these do not count towards
    /// the ordinary-symbol total.
    pub punctuation: BTreeMap<usize, f64>,
    pub hop_seconds: f64,
    pub downsample: usize,
}

impl DurationModel {
    pub fn new(rho: f64, hop_seconds: f64, downsample: usize) -> Result<Self> {
        ensure!(rho > 0.0, Config, "mean symbol duration must be positive");
        ensure!(hop_seconds > 0.0 && downsample >= 1, Config, "invalid frame geometry");
        Ok(Self {
            rho,
            punctuation: BTreeMap::new(),
            hop_seconds,
            downsample,
        })
    }

    pub fn total_seconds(&self, transcript: &[usize]) -> Result<f64> {
        let n_plain = transcript.iter().filter(|s| !self.punctuation.contains_key(s)).count();
        ensure!(n_plain > 0, Input, "transcript has no ordinary symbols");
        let extra: f64 = transcript.iter().filter_map(|s| self.punctuation.get(s)).sum();
        Ok(self.rho * n_plain as f64 + extra)
    }

    /// Estimated latent length for `transcript`.
    pub fn estimate(&self, transcript: &[usize]) -> Result<usize> {
        let t = self.total_seconds(transcript)?;
        Ok((t / (self.hop_seconds * self.downsample as f64)).round() as usize)
    }
}

pub fn estimate_duration(dm: &DurationModel, transcript: &[usize]) -> Result<usize> {
    dm.estimate(transcript)
}

/// Pick the candidate whose sampled continuation lands closest to the true
/// next tokens.
///
/// Every candidate holds at least `n_right` tokens; tokens `..n_right` are the
/// conditioning prefix. The block starting at `n_right` is sampled from the
/// same noise for every candidate and compared to `truth_next` (which sets the
/// block length). Ties go to the lowest index.
#[allow(clippy::too_many_arguments)]
pub fn post_filter<R: Rng>(
    net: &ArditNet,
    params: &ParamSet,
    text: &[usize],
    candidates: &[Tensor],
    n_right: usize,
    n_latent: usize,
    truth_next: &Tensor,
    schedule: OdeSchedule,
    rng: &mut R,
) -> Result<usize> {
    ensure!(!candidates.is_empty(), Input, "post-filter needs at least one candidate");
    let b = truth_next.rows();
    ensure!(b >= 1 && n_right + b <= n_latent, Input, "continuation block out of range");
    ensure!(candidates.iter().all(|c| c.rows() >= n_right), Input, "candidate shorter than prefix");
    // Shift so a block starts exactly at `n_right`.
    let shift = (b - n_right % b) % b;
    let part = BlockPartition::new(n_latent, b, shift)?;
    let m = part.block_of(n_right);
    ensure!(part.blocks()[m] == (n_right..n_right + b), Input, "continuation must be a whole block");
    let noise = gaussian(b, net.d_latent(), rng);
    let times = schedule.times();
    let h = schedule.step_size();
    let mut best = (0, f32::INFINITY);
    for (i, cand) in candidates.iter().enumerate() {
        let prefix = cand.slice_rows(0, n_right);
        let mut y = noise.clone();
        for &t in &times[..times.len() - 1] {
            let plan = build_infer_step_plan(text.len(), &part, m, t)?;
            let speech = Tensor::concat_rows(&[&prefix, &y])?;
            let v = net.noisy_velocity(params, text, &speech, &plan)?;
            y.axpy(-h, &v);
        }
        let dist = y.sub(truth_next)?.sum_sq().sqrt();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> (ArditNet, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetConfig {
            n_layers: 2,
            n_heads: 2,
            embed_dim: 16,
            ffn_dim: 32,
            dropout: 0.0,
        };
        let (net, mut ps) = ArditNet::new(&cfg, 6, 3, &mut rng).unwrap();
        for i in 0..ps.numel() {
            let v = ps.flat_get(i) + 0.3 * rng.gen_range(-1.0f32..1.0);
            ps.flat_set(i, v);
        }
        (net, ps)
    }

    fn utt(n_text: usize, n: usize, seed: u64) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = (0..n_text).map(|_| rng.gen_range(0..6)).collect();
        Utterance::new(text, gaussian(n, 3, &mut rng)).unwrap()
    }

    #[test]
    fn partition_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_partition(5, BLOCK_INF, &mut rng).unwrap().len(), 1);
        assert_eq!(sample_partition(5, 5, &mut rng).unwrap().len(), 1);
        for _ in 0..20 {
            let p = sample_partition(9, 1, &mut rng).unwrap();
            assert_eq!((p.len(), p.shift()), (9, 0));
        }
    }

    #[test]
    fn batched_loss_equals_mean_of_block_losses() {
        let (net, ps) = model(1);
        let u = utt(3, 7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = TrainDraw::sample(7, 3, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let l = train_loss_graph(&mut g, &net, &p, &u, &draw).unwrap();
        let batched = g.scalar(l);
        let mut total = 0.0;
        for (m, r) in draw.partition.blocks().iter().enumerate() {
            let t = draw.t_vec[m];
            let plan = build_infer_step_plan(3, &draw.partition, m, t).unwrap();
            let x = u.tokens.slice_rows(r.start, r.end);
            let w = draw.noise.slice_rows(r.start, r.end);
            let xt = noised(&x, &w, &vec![t; r.len()]);
            let speech = Tensor::concat_rows(&[&u.tokens.slice_rows(0, r.start), &xt]).unwrap();
            let v = net.noisy_velocity(&ps, &u.text, &speech, &plan).unwrap();
            total += v.sub(&w.sub(&x).unwrap()).unwrap().sum_sq();
        }
        let mean = total / draw.partition.len() as f32;
        assert!((batched - mean).abs() <= 1e-4 * mean.max(1.0), "{batched} vs {mean}");
    }

    #[test]
    fn full_split_fim_loss_equals_plain_loss() {
        let (net, ps) = model(2);
        let u = utt(2, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = TrainDraw::sample(6, 3, 2, &mut rng).unwrap();
        let fim = FimDraw::from_train_draw(&draw).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let a = train_loss_graph(&mut g, &net, &p, &u, &draw).unwrap();
        let b = fim_train_loss_graph(&mut g, &net, &p, &u, &fim).unwrap();
        assert_eq!(g.scalar(a), g.scalar(b));
    }

    #[test]
    fn fim_loss_ignores_context_targets() {
        // Only middle noise enters the loss: context tokens have no noisy copy.
        let (net, ps) = model(3);
        let u = utt(2, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let split = FimSplit::new(2, 4, 6).unwrap();
        let draw = FimDraw::with_split(split, 3, 1, &mut rng).unwrap();
        assert_eq!(draw.noise.rows(), 2);
        let plan = build_fim_train_plan(2, &split, &draw.middle, &draw.t_vec).unwrap();
        assert_eq!(plan.indices_of(SegmentKind::Noisy).len(), 2);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let l = fim_train_loss_graph(&mut g, &net, &p, &u, &draw).unwrap();
        assert!(g.scalar(l).is_finite());
    }

    #[test]
    fn zero_loss_for_perfect_prediction() {
        // With zero-initialized output the prediction is 0; choosing clean
        // tokens equal to the noise makes the target 0 too.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (net, ps) = ArditNet::new(&NetConfig { n_layers: 1, n_heads: 2, embed_dim: 8, ffn_dim: 8, dropout: 0.0 }, 3, 2, &mut rng).unwrap();
        let draw = TrainDraw::sample(4, 2, 2, &mut rng).unwrap();
        let u = Utterance::new(vec![0, 1], draw.noise.clone()).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let l = train_loss_graph(&mut g, &net, &p, &u, &draw).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn cached_generation_matches_uncached() {
        let (net, ps) = model(4);
        let text = [1, 2, 5];
        for b in [1, 2, 3, BLOCK_INF] {
            let mut opts = GenerateOptions {
                block_size: b,
                schedule: OdeSchedule::new(4).unwrap(),
                use_cache: true,
            };
            let a = generate(&net, &ps, &text, 7, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            opts.use_cache = false;
            let c = generate(&net, &ps, &text, 7, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a.shape(), (7, 3));
            assert!(a.max_abs_diff(&c) <= 1e-5, "B={b}: {}", a.max_abs_diff(&c));
        }
    }

    #[test]
    fn fim_generation_copies_context_and_matches_uncached() {
        let (net, ps) = model(5);
        let u = utt(3, 8, 8);
        let split = FimSplit::new(2, 6, 8).unwrap();
        let mut opts = GenerateOptions {
            block_size: 2,
            schedule: OdeSchedule::new(3).unwrap(),
            use_cache: true,
        };
        let a = fim_generate(&net, &ps, &u.text, &u.tokens, &split, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        opts.use_cache = false;
        let b = fim_generate(&net, &ps, &u.text, &u.tokens, &split, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-5);
        for r in (0..2).chain(6..8) {
            assert_eq!(a.row(r), u.tokens.row(r));
        }
        assert!(FimSplit::new(3, 3, 8).is_err());
        let bad = Tensor::zeros(5, 3);
        assert!(fim_generate(&net, &ps, &u.text, &bad, &split, &opts, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn duration_examples() {
        let dm = DurationModel::new(0.1, 0.01, 4).unwrap();
        assert!((dm.total_seconds(&[0; 20]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(dm.estimate(&[0; 20]).unwrap(), 50);
        assert!(dm.estimate(&[]).is_err());
        let mut dm = DurationModel::new(0.08, 0.01, 4).unwrap();
        dm.punctuation.insert(7, 0.2);
        assert!(dm.estimate(&[7]).is_err());
        assert_eq!(dm.estimate(&[1, 2, 7]).unwrap(), 9);
    }

    #[test]
    fn post_filter_selection() {
        let (net, ps) = model(6);
        let u = utt(3, 6, 10);
        let sched = OdeSchedule::new(3).unwrap();
        let truth = u.tokens.slice_rows(3, 5);
        assert_eq!(
            post_filter(&net, &ps, &u.text, &[u.tokens.clone()], 3, 6, &truth, sched, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
            0
        );
        // Make the truth equal to candidate A's own continuation under the
        // shared noise; a distorted candidate B must lose.
        let good = u.tokens.clone();
        let mut bad = u.tokens.clone();
        for v in bad.data_mut()[..9].iter_mut() {
            *v += 5.0;
        }
        let shift = (2 - 3 % 2) % 2;
        let part = BlockPartition::new(6, 2, shift).unwrap();
        let m = part.block_of(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut y = gaussian(2, 3, &mut rng);
        let times = sched.times();
        for &t in &times[..times.len() - 1] {
            let plan = build_infer_step_plan(3, &part, m, t).unwrap();
            let speech = Tensor::concat_rows(&[&good.slice_rows(0, 3), &y]).unwrap();
            let v = net.noisy_velocity(&ps, &u.text, &speech, &plan).unwrap();
            y.axpy(-sched.step_size(), &v);
        }
        let pick = post_filter(&net, &ps, &u.text, &[bad, good], 3, 6, &y, sched, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(pick, 1);
        assert!(post_filter(&net, &ps, &u.text, &[], 3, 6, &y, sched, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }
}
