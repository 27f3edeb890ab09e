//! Distribution matching distillation into a one-evaluation-per-block
//! generator.
//!
//! Three parameter sets take part: a frozen teacher, the generator and a
//! "fake" velocity model that tracks the generator's output distribution.
//! All block loops run in parallel with the teacher-forced layout, so every
//! block is conditioned on the clean dataset prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ardit::{gaussian, generate, sample_partition, GenerateOptions, Utterance};
use crate::autodiff::{Graph, Var};
use crate::blockplan::{build_train_plan, BlockPartition, SegmentKind};
use crate::checkpoint::Container;
use crate::error::{ensure, Result};
use crate::flowmatch::{sample_time, sample_time_open_zero, OdeSchedule, StandardGaussianField};
use crate::nets::{ArditNet, MlpVelocity};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Real, Tensor};

/// A conditional velocity model evaluated on every block of an item at once.
pub trait BlockFlow {
    fn d_latent(&self) -> usize;

    /// Velocity for `noisy` (same shape as `item.tokens`); rows of block `m`
    /// sit at time `t_vec[m]` and see the clean tokens before their block.
    fn block_velocity(
        &self,
        g: &mut Graph,
        p: &Bound,
        item: &Utterance,
        partition: &BlockPartition,
        t_vec: &[f32],
        noisy: Var,
    ) -> Result<Var>;
}

impl BlockFlow for ArditNet {
    fn d_latent(&self) -> usize {
        ArditNet::d_latent(self)
    }

    fn block_velocity(
        &self,
        g: &mut Graph,
        p: &Bound,
        item: &Utterance,
        partition: &BlockPartition,
        t_vec: &[f32],
        noisy: Var,
    ) -> Result<Var> {
        let plan = build_train_plan(item.text.len(), partition, t_vec)?;
        let clean = g.constant(item.tokens.clone());
        let speech = g.concat_rows(&[clean, noisy])?;
        let rows = plan.indices_of(SegmentKind::Noisy);
        self.forward(g, p, &item.text, speech, &plan, &rows)
    }
}

/// Tokens are independent samples; conditioning is ignored.
impl BlockFlow for MlpVelocity {
    fn d_latent(&self) -> usize {
        self.dim()
    }

    fn block_velocity(
        &self,
        g: &mut Graph,
        p: &Bound,
        _item: &Utterance,
        partition: &BlockPartition,
        t_vec: &[f32],
        noisy: Var,
    ) -> Result<Var> {
        self.forward(g, p, noisy, &partition.expand_times(t_vec))
    }
}

/// One-dimensional analytic field for standard-normal data, parameter free.
#[derive(Clone, Copy, Debug, Default)]
pub struct AnalyticGaussianFlow;

impl BlockFlow for AnalyticGaussianFlow {
    fn d_latent(&self) -> usize {
        1
    }

    fn block_velocity(
        &self,
        g: &mut Graph,
        _p: &Bound,
        _item: &Utterance,
        partition: &BlockPartition,
        t_vec: &[f32],
        noisy: Var,
    ) -> Result<Var> {
        let (n, d) = g.value(noisy).shape();
        let times = partition.expand_times(t_vec);
        ensure!(times.len() == n, Input, "{} times for {n} rows", times.len());
        let mut factor = Tensor::zeros(n, d);
        for (r, &t) in times.iter().enumerate() {
            let f = StandardGaussianField::velocity_scalar(1.0, t as f64) as f32;
            factor.row_mut(r).fill(f);
        }
        let f = g.constant(factor);
        g.mul(noisy, f)
    }
}

/// Teacher, generator and fake-flow parameters.
#[derive(Clone, Debug)]
pub struct DistillTriplet {
    pub teacher: ParamSet,
    pub generator: ParamSet,
    pub fake: ParamSet,
}

impl DistillTriplet {
    /// All three start as exact copies of the teacher.
    pub fn from_teacher(teacher: ParamSet) -> Self {
        Self {
            generator: teacher.clone(),
            fake: teacher.clone(),
            teacher,
        }
    }

    /// For teachers whose architecture differs from the student (e.g. an
    /// analytic field): generator and fake flow both start from `student`.
    pub fn with_student(teacher: ParamSet, student: ParamSet) -> Self {
        Self {
            teacher,
            generator: student.clone(),
            fake: student,
        }
    }
}

/// Network roles. The generator and fake flow share the student
/// architecture.
#[derive(Clone, Copy)]
pub struct DmdModels<'a> {
    pub teacher: &'a dyn BlockFlow,
    pub student: &'a dyn BlockFlow,
}

impl<'a> DmdModels<'a> {
    pub fn shared(net: &'a dyn BlockFlow) -> Self {
        Self {
            teacher: net,
            student: net,
        }
    }
}

fn ones_times(partition: &BlockPartition) -> Vec<f32> {
    vec![1.0; partition.len()]
}

/// `w - v(w; 1)` for every block in parallel, as a graph node.
fn generator_graph(
    g: &mut Graph,
    flow: &dyn BlockFlow,
    p: &Bound,
    item: &Utterance,
    partition: &BlockPartition,
    w: &Tensor,
) -> Result<Var> {
    let wv = g.constant(w.clone());
    let v = flow.block_velocity(g, p, item, partition, &ones_times(partition), wv)?;
    g.sub(wv, v)
}

/// One-step generator output for every block of `item` given noise `w`.
pub fn generator_step(
    flow: &dyn BlockFlow,
    params: &ParamSet,
    item: &Utterance,
    partition: &BlockPartition,
    w: &Tensor,
) -> Result<Tensor> {
    ensure!(w.shape() == item.tokens.shape(), Input, "noise shape {:?} vs tokens {:?}", w.shape(), item.tokens.shape());
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = generator_graph(&mut g, flow, &p, item, partition, w)?;
    Ok(g.value(out).clone())
}

/// Euler-integrate every block's conditional ODE in parallel.
pub fn teacher_sample(
    flow: &dyn BlockFlow,
    params: &ParamSet,
    item: &Utterance,
    partition: &BlockPartition,
    w: &Tensor,
    schedule: OdeSchedule,
) -> Result<Tensor> {
    let times = schedule.times();
    let h = schedule.step_size();
    let mut y = w.clone();
    for &t in &times[..times.len() - 1] {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let v = flow.block_velocity(&mut g, &p, item, partition, &vec![t; partition.len()], yv)?;
        y.axpy(-h, g.value(v));
    }
    Ok(y)
}

/// Sample a whole sequence with the distilled generator: one network
/// evaluation per block.
pub fn one_step_generate<R: Rng>(
    net: &ArditNet,
    generator: &ParamSet,
    text: &[usize],
    n_latent: usize,
    block_size: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let opts = GenerateOptions {
        block_size,
        schedule: OdeSchedule::new(1)?,
        use_cache: true,
    };
    generate(net, generator, text, n_latent, &opts, rng)
}

/// Generator evaluations needed for `n_latent` tokens at block size `b`.
pub fn evaluations_for(n_latent: usize, block_size: usize) -> usize {
    n_latent.div_ceil(block_size.min(n_latent).max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub utterance: usize,
    pub block: usize,
    pub shift: usize,
    pub noise: Tensor,
    pub teacher: Tensor,
}

/// Noise/teacher-output pairs for every block of every cached utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryCache {
    pub block_size: usize,
    pub ode_steps: usize,
    pub entries: Vec<CacheEntry>,
}

/// One cached utterance reassembled across its blocks.
#[derive(Clone, Debug)]
pub struct CachedItem {
    pub utterance: usize,
    pub partition: BlockPartition,
    pub noise: Tensor,
    pub teacher: Tensor,
}

impl TrajectoryCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries grouped per utterance, in cache order.
    pub fn items(&self) -> Result<Vec<CachedItem>> {
        let mut out: Vec<CachedItem> = Vec::new();
        let mut i = 0;
        while i < self.entries.len() {
            let u = self.entries[i].utterance;
            let shift = self.entries[i].shift;
            let mut j = i;
            while j < self.entries.len() && self.entries[j].utterance == u {
                j += 1;
            }
            let group = &self.entries[i..j];
            let noise = Tensor::concat_rows(&group.iter().map(|e| &e.noise).collect::<Vec<_>>())?;
            let teacher = Tensor::concat_rows(&group.iter().map(|e| &e.teacher).collect::<Vec<_>>())?;
            let n = noise.rows();
            let partition = if self.block_size >= n {
                BlockPartition::unshifted(n, n)?
            } else {
                BlockPartition::new(n, self.block_size, shift)?
            };
            ensure!(partition.len() == group.len(), Format, "utterance {u}: {} cached blocks, expected {}", group.len(), partition.len());
            out.push(CachedItem {
                utterance: u,
                partition,
                noise,
                teacher,
            });
            i = j;
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.meta("kind", "trajectory-cache");
        c.meta("block_size", self.block_size);
        c.meta("ode_steps", self.ode_steps);
        c.meta("entries", self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let key = format!("{i:08}/u{}/b{}/s{}", e.utterance, e.block, e.shift);
            c.insert(format!("{key}/noise"), e.noise.clone());
            c.insert(format!("{key}/teacher"), e.teacher.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        ensure!(c.meta_get("kind")? == "trajectory-cache", Format, "not a trajectory cache");
        let parse = |k: &str| -> Result<usize> {
            c.meta_get(k)?
                .parse()
                .map_err(|_| crate::Error::Format(format!("bad metadata value for {k}")))
        };
        let block_size = parse("block_size")?;
        let ode_steps = parse("ode_steps")?;
        let n = parse("entries")?;
        let mut keys: Vec<&str> = c.tensors.keys().filter_map(|k| k.strip_suffix("/noise")).collect();
        keys.sort_unstable();
        ensure!(keys.len() == n, Format, "cache lists {n} entries, found {}", keys.len());
        let mut entries = Vec::with_capacity(n);
        for key in keys {
            let mut parts = key.split('/').skip(1);
            let mut field = |prefix: char| -> Result<usize> {
                parts
                    .next()
                    .and_then(|s| s.strip_prefix(prefix))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| crate::Error::Format(format!("bad cache key {key}")))
            };
            let utterance = field('u')?;
            let block = field('b')?;
            let shift = field('s')?;
            entries.push(CacheEntry {
                utterance,
                block,
                shift,
                noise: c.get(&format!("{key}/noise"))?.clone(),
                teacher: c.get(&format!("{key}/teacher"))?.clone(),
            });
        }
        Ok(Self {
            block_size,
            ode_steps,
            entries,
        })
    }
}

fn utterance_rng(seed: u64, u: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (u as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Cache one teacher trajectory endpoint per block of every utterance. Each
/// utterance draws its shift and noise from its own seeded stream.
pub fn cache_trajectories(
    flow: &dyn BlockFlow,
    teacher: &ParamSet,
    data: &[Utterance],
    block_size: usize,
    schedule: OdeSchedule,
    seed: u64,
) -> Result<TrajectoryCache> {
    ensure!(!data.is_empty(), Input, "no utterances to cache");
    let mut entries = Vec::new();
    for (u, item) in data.iter().enumerate() {
        let mut rng = utterance_rng(seed, u);
        let (n, d) = item.tokens.shape();
        let partition = sample_partition(n, block_size, &mut rng)?;
        let w = gaussian(n, d, &mut rng);
        let out = teacher_sample(flow, teacher, item, &partition, &w, schedule)?;
        for (m, r) in partition.blocks().iter().enumerate() {
            entries.push(CacheEntry {
                utterance: u,
                block: m,
                shift: partition.shift(),
                noise: w.slice_rows(r.start, r.end),
                teacher: out.slice_rows(r.start, r.end),
            });
        }
    }
    Ok(TrajectoryCache {
        block_size,
        ode_steps: schedule.n_steps(),
        entries,
    })
}

/// `beta * |z_tilde - z_hat|^2`.
pub fn regression_loss_graph<F: Real>(g: &mut Graph<F>, z_tilde: Var, z_hat: &Tensor<F>, beta: F) -> Result<Var> {
    let target = g.constant(z_hat.clone());
    let d = g.sub(z_tilde, target)?;
    let s = g.sum_sq(d);
    Ok(g.scale(s, beta))
}

/// `|z_tilde + sg(delta - z_tilde)|^2`; its gradient in `z_tilde` is `2 delta`.
pub fn ikl_loss_graph<F: Real>(g: &mut Graph<F>, z_tilde: Var, delta: &Tensor<F>) -> Result<Var> {
    let shifted = delta.sub(g.value(z_tilde))?;
    let c = g.constant(shifted);
    let s = g.add(z_tilde, c)?;
    Ok(g.sum_sq(s))
}

pub struct DmdOptimizers {
    pub generator: AdamW,
    pub fake: AdamW,
}

impl DmdOptimizers {
    pub fn new(cfg: AdamWConfig, triplet: &DistillTriplet) -> Self {
        Self {
            generator: AdamW::new(cfg, &triplet.generator),
            fake: AdamW::new(cfg, &triplet.fake),
        }
    }
}

fn mean_loss(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let all = g.concat_rows(terms)?;
    let s = g.sum(all);
    Ok(g.scale(s, 1.0 / terms.len() as f32))
}

/// One generator step on the cached regression targets of `items`. Returns
/// the loss; with `beta == 0` nothing changes.
pub fn regression_update(
    models: DmdModels<'_>,
    triplet: &mut DistillTriplet,
    data: &[Utterance],
    items: &[&CachedItem],
    beta: f32,
    opt: &mut AdamW,
) -> Result<f32> {
    ensure!(!items.is_empty(), Input, "regression update needs cached items");
    ensure!(beta >= 0.0, Config, "regression weight must be nonnegative");
    let mut g = Graph::new();
    let p = triplet.generator.bind(&mut g, true);
    let mut terms = Vec::with_capacity(items.len());
    for it in items {
        let item = data
            .get(it.utterance)
            .ok_or_else(|| crate::Error::Input(format!("cache refers to missing utterance {}", it.utterance)))?;
        let z_tilde = generator_graph(&mut g, models.student, &p, item, &it.partition, &it.noise)?;
        terms.push(regression_loss_graph(&mut g, z_tilde, &it.teacher, beta)?);
    }
    let loss = mean_loss(&mut g, &terms)?;
    if beta == 0.0 {
        return Ok(0.0);
    }
    let grads = g.backward(loss);
    opt.step(&mut triplet.generator, &p.grads(&g, &grads));
    Ok(g.scalar(loss))
}

/// One generator step on the integral-KL surrogate. Returns the loss.
pub fn ikl_update<R: Rng>(
    models: DmdModels<'_>,
    triplet: &mut DistillTriplet,
    batch: &[&Utterance],
    block_size: usize,
    opt: &mut AdamW,
    rng: &mut R,
) -> Result<f32> {
    ensure!(!batch.is_empty(), Input, "empty batch");
    let mut g = Graph::new();
    let p = triplet.generator.bind(&mut g, true);
    let teacher = triplet.teacher.bind(&mut g, false);
    let fake = triplet.fake.bind(&mut g, false);
    let mut terms = Vec::with_capacity(batch.len());
    for item in batch {
        let (n, d) = item.tokens.shape();
        let partition = sample_partition(n, block_size, rng)?;
        let w = gaussian(n, d, rng);
        let w2 = gaussian(n, d, rng);
        let t_vec: Vec<f32> = (0..partition.len()).map(|_| sample_time_open_zero(rng)).collect();
        let z_tilde = generator_graph(&mut g, models.student, &p, item, &partition, &w)?;
        let times = partition.expand_times(&t_vec);
        let mut zt = g.value(z_tilde).clone();
        for (r, &t) in times.iter().enumerate() {
            for (v, &e) in zt.row_mut(r).iter_mut().zip(w2.row(r)) {
                *v = (1.0 - t) * *v + t * e;
            }
        }
        let ztv = g.constant(zt);
        let vt = models.teacher.block_velocity(&mut g, &teacher, item, &partition, &t_vec, ztv)?;
        let vf = models.student.block_velocity(&mut g, &fake, item, &partition, &t_vec, ztv)?;
        let delta = g.value(vt).sub(g.value(vf))?;
        terms.push(ikl_loss_graph(&mut g, z_tilde, &delta)?);
    }
    let loss = mean_loss(&mut g, &terms)?;
    let grads = g.backward(loss);
    opt.step(&mut triplet.generator, &p.grads(&g, &grads));
    Ok(g.scalar(loss))
}

/// One fake-flow step: flow matching on generator samples. With
/// `shared_noise` the generator's own input noise is reused for noising
/// instead of a fresh draw.
pub fn fake_fm_update<R: Rng>(
    models: DmdModels<'_>,
    triplet: &mut DistillTriplet,
    batch: &[&Utterance],
    block_size: usize,
    shared_noise: bool,
    opt: &mut AdamW,
    rng: &mut R,
) -> Result<f32> {
    ensure!(!batch.is_empty(), Input, "empty batch");
    let mut g = Graph::new();
    let p = triplet.fake.bind(&mut g, true);
    let gen = triplet.generator.bind(&mut g, false);
    let mut terms = Vec::with_capacity(batch.len());
    for item in batch {
        let (n, d) = item.tokens.shape();
        let partition = sample_partition(n, block_size, rng)?;
        let w = gaussian(n, d, rng);
        let z_tilde = generator_graph(&mut g, models.student, &gen, item, &partition, &w)?;
        let z_tilde = g.value(z_tilde).clone();
        let e = if shared_noise { w } else { gaussian(n, d, rng) };
        // The plan needs t > 0; an exact zero draw is nudged up.
        let t_vec: Vec<f32> = (0..partition.len()).map(|_| sample_time(rng).max(f32::MIN_POSITIVE)).collect();
        let times = partition.expand_times(&t_vec);
        let mut zt = z_tilde.clone();
        for (r, &t) in times.iter().enumerate() {
            for (v, &x) in zt.row_mut(r).iter_mut().zip(e.row(r)) {
                *v = (1.0 - t) * *v + t * x;
            }
        }
        let ztv = g.constant(zt);
        let v = models.student.block_velocity(&mut g, &p, item, &partition, &t_vec, ztv)?;
        let target = g.constant(e.sub(&z_tilde)?);
        let diff = g.sub(v, target)?;
        terms.push(g.sum_sq(diff));
    }
    let loss = mean_loss(&mut g, &terms)?;
    let grads = g.backward(loss);
    opt.step(&mut triplet.fake, &p.grads(&g, &grads));
    Ok(g.scalar(loss))
}

#[derive(Clone, Debug)]
pub struct DmdConfig {
    pub rounds: usize,
    /// Rounds run with `beta_reg_phase1` before switching to phase 2.
    pub phase1_rounds: usize,
    pub beta_reg_phase1: f32,
    pub beta_reg_phase2: f32,
    pub batch: usize,
    pub lr: f32,
    pub shared_fake_noise: bool,
    /// Fake-flow steps per round; more than one lets the fake flow keep up
    /// with a fast-moving generator.
    pub fake_updates: usize,
}

impl Default for DmdConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            phase1_rounds: 150,
            beta_reg_phase1: 2.0,
            beta_reg_phase2: 0.1,
            batch: 4,
            lr: 1e-4,
            shared_fake_noise: false,
            fake_updates: 1,
        }
    }
}

impl DmdConfig {
    pub fn beta_for_round(&self, round: usize) -> f32 {
        if round < self.phase1_rounds {
            self.beta_reg_phase1
        } else {
            self.beta_reg_phase2
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundLosses {
    pub regression: f32,
    pub ikl: f32,
    pub fake_fm: f32,
}

/// Alternate regression, integral-KL and fake-flow updates for
/// `cfg.rounds` rounds.
pub fn distill<R: Rng>(
    models: DmdModels<'_>,
    triplet: &mut DistillTriplet,
    data: &[Utterance],
    cache: &TrajectoryCache,
    cfg: &DmdConfig,
    rng: &mut R,
    mut on_round: impl FnMut(usize, RoundLosses),
) -> Result<()> {
    ensure!(!cache.is_empty(), Input, "trajectory cache is empty");
    ensure!(cfg.batch >= 1, Config, "batch must be positive");
    ensure!(cfg.fake_updates >= 1, Config, "at least one fake-flow update per round");
    ensure!(cfg.beta_reg_phase1 >= 0.0 && cfg.beta_reg_phase2 >= 0.0, Config, "regression weights must be nonnegative");
    let items = cache.items()?;
    let mut opts = DmdOptimizers::new(AdamWConfig::with_lr(cfg.lr), triplet);
    for round in 0..cfg.rounds {
        let picks: Vec<&CachedItem> = (0..cfg.batch).map(|_| &items[rng.gen_range(0..items.len())]).collect();
        let regression = regression_update(models, triplet, data, &picks, cfg.beta_for_round(round), &mut opts.generator)?;
        let batch: Vec<&Utterance> = (0..cfg.batch).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let ikl = ikl_update(models, triplet, &batch, cache.block_size, &mut opts.generator, rng)?;
        let mut fake_fm = 0.0;
        for _ in 0..cfg.fake_updates {
            let batch: Vec<&Utterance> = (0..cfg.batch).map(|_| &data[rng.gen_range(0..data.len())]).collect();
            fake_fm = fake_fm_update(
                models,
                triplet,
                &batch,
                cache.block_size,
                cfg.shared_fake_noise,
                &mut opts.fake,
                rng,
            )?;
        }
        on_round(
            round,
            RoundLosses {
                regression,
                ikl,
                fake_fm,
            },
        );
    }
    Ok(())
}
