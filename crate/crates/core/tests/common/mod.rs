#![allow(dead_code)]

//! Helpers shared by the integration tests and the acceptance runner.

use std::path::PathBuf;

use ardit::autodiff::Graph;
use ardit::blockplan::{
    build_fim_infer_plan, build_fim_train_plan, build_infer_step_plan, build_train_plan, AttentionPlan, BlockPartition,
    FimSplit,
};
use ardit::nets::{ArditNet, NetConfig};
use ardit::params::ParamSet;
use ardit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Brute-force plan oracle. Works from token indices and the block formula
// `(i + shift) / block` directly, without the library's partition or slots.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Text,
    Prefix,
    Suffix,
    Clean,
    Noisy,
}

impl Role {
    fn label(self) -> &'static str {
        match self {
            Role::Text => "text",
            Role::Prefix => "prefix",
            Role::Suffix => "suffix",
            Role::Clean => "clean",
            Role::Noisy => "noisy",
        }
    }
}

/// `(role, block)`; block is meaningful only for middle tokens.
type Tok = (Role, usize);

fn allowed(q: Tok, k: Tok) -> bool {
    let ctx = matches!(k.0, Role::Text | Role::Prefix | Role::Suffix);
    match q.0 {
        Role::Text => k.0 == Role::Text,
        Role::Prefix | Role::Suffix => ctx,
        Role::Clean => ctx || (k.0 == Role::Clean && k.1 <= q.1),
        Role::Noisy => ctx || (k.0 == Role::Clean && k.1 < q.1) || (k.0 == Role::Noisy && k.1 == q.1),
    }
}

/// A layout with enough metadata to print a golden-mask file.
#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    Train { n_text: usize, n: usize, block: usize, shift: usize },
    Infer { n_text: usize, n: usize, block: usize, shift: usize, step: usize },
    FimTrain { n_text: usize, prefix: usize, middle: usize, suffix: usize, block: usize, shift: usize },
    FimInfer { n_text: usize, prefix: usize, middle: usize, suffix: usize, block: usize, shift: usize, step: usize },
}

fn blk(i: usize, block: usize, shift: usize) -> usize {
    (i + shift) / block
}

impl Layout {
    fn header(&self) -> (usize, usize, usize) {
        match *self {
            Layout::Train { n_text, block, shift, .. }
            | Layout::Infer { n_text, block, shift, .. }
            | Layout::FimTrain { n_text, block, shift, .. }
            | Layout::FimInfer { n_text, block, shift, .. } => (n_text, block, shift),
        }
    }

    fn tokens(&self) -> Vec<Tok> {
        let text = |n: usize| vec![(Role::Text, 0); n];
        match *self {
            Layout::Train { n_text, n, block, shift } => {
                let mut v = text(n_text);
                v.extend((0..n).map(|i| (Role::Clean, blk(i, block, shift))));
                v.extend((0..n).map(|i| (Role::Noisy, blk(i, block, shift))));
                v
            }
            Layout::Infer { n_text, n, block, shift, step } => {
                let mut v = text(n_text);
                v.extend((0..n).map(|i| blk(i, block, shift)).filter(|&b| b < step).map(|b| (Role::Clean, b)));
                v.extend((0..n).map(|i| blk(i, block, shift)).filter(|&b| b == step).map(|b| (Role::Noisy, b)));
                v
            }
            Layout::FimTrain { n_text, prefix, middle, suffix, block, shift } => {
                let mut v = text(n_text);
                v.extend(vec![(Role::Prefix, 0); prefix]);
                v.extend((0..middle).map(|i| (Role::Clean, blk(i, block, shift))));
                v.extend(vec![(Role::Suffix, 0); suffix]);
                v.extend((0..middle).map(|i| (Role::Noisy, blk(i, block, shift))));
                v
            }
            Layout::FimInfer { n_text, prefix, middle, suffix, block, shift, step } => {
                let mut v = text(n_text);
                v.extend(vec![(Role::Prefix, 0); prefix]);
                v.extend(vec![(Role::Suffix, 0); suffix]);
                v.extend((0..middle).map(|i| blk(i, block, shift)).filter(|&b| b < step).map(|b| (Role::Clean, b)));
                v.extend((0..middle).map(|i| blk(i, block, shift)).filter(|&b| b == step).map(|b| (Role::Noisy, b)));
                v
            }
        }
    }

    /// Golden-mask text: header `n_text B S kind:count ...`, then 0/1 rows.
    pub fn oracle_text(&self) -> String {
        let toks = self.tokens();
        let (n_text, block, shift) = self.header();
        let mut out = format!("{n_text} {block} {shift}");
        let mut i = 0;
        while i < toks.len() {
            let r = toks[i].0;
            let run = toks[i..].iter().take_while(|t| t.0 == r).count();
            out += &format!(" {}:{run}", r.label());
            i += run;
        }
        out.push('\n');
        for &q in &toks {
            out.extend(toks.iter().map(|&k| if allowed(q, k) { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }

    /// The same layout built by the library, with every noisy block at `t`.
    pub fn build(&self, t: f32) -> AttentionPlan {
        match *self {
            Layout::Train { n_text, n, block, shift } => {
                let p = BlockPartition::new(n, block, shift).unwrap();
                build_train_plan(n_text, &p, &vec![t; p.len()]).unwrap()
            }
            Layout::Infer { n_text, n, block, shift, step } => {
                let p = BlockPartition::new(n, block, shift).unwrap();
                build_infer_step_plan(n_text, &p, step, t).unwrap()
            }
            Layout::FimTrain { n_text, prefix, middle, suffix, block, shift } => {
                let split = FimSplit::new(prefix, prefix + middle, prefix + middle + suffix).unwrap();
                let p = BlockPartition::new(middle, block, shift).unwrap();
                build_fim_train_plan(n_text, &split, &p, &vec![t; p.len()]).unwrap()
            }
            Layout::FimInfer { n_text, prefix, middle, suffix, block, shift, step } => {
                let split = FimSplit::new(prefix, prefix + middle, prefix + middle + suffix).unwrap();
                let p = BlockPartition::new(middle, block, shift).unwrap();
                build_fim_infer_plan(n_text, &split, &p, step, Some(t)).unwrap()
            }
        }
    }
}

/// Named layouts of the golden corpus: the figure configurations plus a few
/// shifted and multi-block variants.
pub fn golden_layouts() -> Vec<(&'static str, Layout)> {
    use Layout::*;
    vec![
        ("train_t1_n2_b1_s0", Train { n_text: 1, n: 2, block: 1, shift: 0 }),
        ("train_t2_n4_b2_s0", Train { n_text: 2, n: 4, block: 2, shift: 0 }),
        ("train_t2_n4_b2_s1", Train { n_text: 2, n: 4, block: 2, shift: 1 }),
        ("train_t2_n6_b3_s2", Train { n_text: 2, n: 6, block: 3, shift: 2 }),
        ("infer_t2_n4_b2_s0_m0", Infer { n_text: 2, n: 4, block: 2, shift: 0, step: 0 }),
        ("infer_t2_n4_b2_s0_m1", Infer { n_text: 2, n: 4, block: 2, shift: 0, step: 1 }),
        ("infer_t2_n5_b2_s1_m2", Infer { n_text: 2, n: 5, block: 2, shift: 1, step: 2 }),
        ("fim_train_t2_p2_m2_s2_b1", FimTrain { n_text: 2, prefix: 2, middle: 2, suffix: 2, block: 1, shift: 0 }),
        ("fim_train_t2_p1_m4_s1_b2_s1", FimTrain { n_text: 2, prefix: 1, middle: 4, suffix: 1, block: 2, shift: 1 }),
        ("fim_infer_t2_p2_m2_s2_b1_m0", FimInfer { n_text: 2, prefix: 2, middle: 2, suffix: 2, block: 1, shift: 0, step: 0 }),
        ("fim_infer_t2_p2_m2_s2_b1_m1", FimInfer { n_text: 2, prefix: 2, middle: 2, suffix: 2, block: 1, shift: 0, step: 1 }),
        ("fim_infer_t2_p1_m4_s1_b2_s0_m1", FimInfer { n_text: 2, prefix: 1, middle: 4, suffix: 1, block: 2, shift: 0, step: 1 }),
    ]
}

/// Ten-slot layouts for exhaustive causality probing.
pub fn probe_layouts() -> Vec<(&'static str, Layout)> {
    use Layout::*;
    vec![
        ("train", Train { n_text: 2, n: 4, block: 2, shift: 1 }),
        ("infer", Infer { n_text: 2, n: 8, block: 2, shift: 0, step: 3 }),
        ("fim_train", FimTrain { n_text: 2, prefix: 2, middle: 2, suffix: 2, block: 1, shift: 0 }),
        ("fim_infer", FimInfer { n_text: 2, prefix: 2, middle: 4, suffix: 2, block: 2, shift: 0, step: 1 }),
    ]
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

// ---------------------------------------------------------------------------
// Models.

pub fn small_config(n_layers: usize) -> NetConfig {
    NetConfig {
        n_layers,
        n_heads: 2,
        embed_dim: 16,
        ffn_dim: 24,
        dropout: 0.0,
    }
}

/// Add uniform noise to every parameter so zero-initialized output layers
/// do not hide anything.
pub fn perturb(ps: &mut ParamSet, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..ps.numel() {
        let v = ps.flat_get(i) + scale * rng.gen_range(-1.0f32..1.0);
        ps.flat_set(i, v);
    }
}

pub fn random_net(n_layers: usize, vocab: usize, d_latent: usize, seed: u64) -> (ArditNet, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, mut ps) = ArditNet::new(&small_config(n_layers), vocab, d_latent, &mut rng).unwrap();
    perturb(&mut ps, seed + 1000, 0.3);
    (net, ps)
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Outputs for every slot of `plan` (text rows included).
pub fn all_rows(net: &ArditNet, ps: &ParamSet, text: &[usize], speech: &Tensor, plan: &AttentionPlan) -> Tensor {
    let mut g = Graph::new();
    let p = ps.bind(&mut g, false);
    let s = g.constant(speech.clone());
    let rows: Vec<usize> = (0..plan.len()).collect();
    let v = net.forward(&mut g, &p, text, s, plan, &rows).unwrap();
    g.value(v).clone()
}

/// Perturb every slot in turn and report `(layout, query, key)` triples
/// where a denied key changed the query's output. Also returns the number of
/// denied pairs checked.
pub fn causality_violations(seed: u64) -> (Vec<(String, usize, usize)>, usize) {
    let vocab = 6;
    let d = 3;
    let (net, ps) = random_net(1, vocab, d, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut bad = Vec::new();
    let mut checked = 0;
    for (name, layout) in probe_layouts() {
        let plan = layout.build(0.6);
        assert_eq!(plan.len(), 10, "{name} must have ten slots");
        let n_text = plan.slots().iter().filter(|s| !s.kind.is_speech()).count();
        let text: Vec<usize> = (0..n_text).map(|i| i % vocab).collect();
        let speech = random_tensor(plan.len() - n_text, d, &mut rng);
        let base = all_rows(&net, &ps, &text, &speech, &plan);
        for k in 0..plan.len() {
            let (mut t2, mut s2) = (text.clone(), speech.clone());
            if k < n_text {
                t2[k] = (t2[k] + 1) % vocab;
            } else {
                s2.row_mut(k - n_text).iter_mut().for_each(|v| *v += 5.0);
            }
            let out = all_rows(&net, &ps, &t2, &s2, &plan);
            for q in 0..plan.len() {
                if !plan.permit(q, k) {
                    checked += 1;
                    if out.row(q) != base.row(q) {
                        bad.push((name.to_string(), q, k));
                    }
                }
            }
        }
    }
    (bad, checked)
}

// ---------------------------------------------------------------------------
// Sample statistics.

pub fn mean_std(xs: &[f32]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Full-model gradient check in double precision.

/// Compare analytic parameter gradients of the teacher-forced loss against
/// central differences on `n_params` random parameters of a two-layer
/// model. Returns the worst relative error and how many of the checked
/// gradients were clearly nonzero.
pub fn gradient_check(seed: u64, n_params: usize) -> (f64, usize) {
    use ardit::ardit::{train_loss_graph, TrainDraw, Utterance};
    let (net, ps32) = random_net(2, 5, 3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let utt = Utterance::new(vec![1, 4, 2], random_tensor(6, 3, &mut rng)).unwrap();
    let draw = TrainDraw::sample(6, 3, 2, &mut rng).unwrap();
    let ps: ParamSet<f64> = ps32.cast();

    let loss = |ps: &ParamSet<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let p = ps.bind(&mut g, false);
        let l = train_loss_graph(&mut g, &net, &p, &utt, &draw).unwrap();
        g.scalar(l)
    };
    let mut g = Graph::<f64>::new();
    let p = ps.bind(&mut g, true);
    let l = train_loss_graph(&mut g, &net, &p, &utt, &draw).unwrap();
    let grads = g.backward(l);
    let flat: Vec<f64> = p.grads(&g, &grads).iter().flat_map(|t| t.data().to_vec()).collect();
    assert_eq!(flat.len(), ps.numel());

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..n_params {
        let i = rng.gen_range(0..ps.numel());
        let mut plus = ps.clone();
        plus.flat_set(i, ps.flat_get(i) + h);
        let mut minus = ps.clone();
        minus.flat_set(i, ps.flat_get(i) - h);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = flat[i];
        // Gradients below 1e-8 are at the level of the difference noise.
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        nonzero += usize::from(numeric.abs() > 1e-6);
    }
    (worst, nonzero)
}

// ---------------------------------------------------------------------------
// Pipeline configs.

/// Seconds-scale configuration that exercises every stage.
pub fn tiny_config() -> ardit::harness::ExperimentConfig {
    ardit::harness::ExperimentConfig::parse(
        "n_train = 12\nn_test = 3\nmin_symbols = 2\nmax_symbols = 3\n\
         ae_layers = 1\nae_dim = 16\nae_ffn = 32\nd_latent = 4\nrefiner_channels = 4\n\
         ae_steps = 4\nae_masked_steps = 2\nae_batch = 2\ndecoder_ode_steps = 2\n\
         n_layers = 1\nembed_dim = 16\nffn_dim = 32\ntrain_steps = 4\ntrain_batch = 2\node_steps = 2\n\
         dmd_rounds = 2\ndmd_phase1_rounds = 1\ndmd_batch = 2\nn_samples = 3\n",
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// One-dimensional toys.

/// Mixture `0.3 N(-2, 0.5^2) + 0.7 N(2, 0.5^2)`.
pub const GMM_WEIGHTS: [f64; 2] = [0.3, 0.7];
pub const GMM_MEANS: [f64; 2] = [-2.0, 2.0];
pub const GMM_STD: f64 = 0.5;

pub fn gmm_moments() -> (f64, f64) {
    let mean: f64 = GMM_WEIGHTS.iter().zip(GMM_MEANS).map(|(w, m)| w * m).sum();
    let second: f64 = GMM_WEIGHTS.iter().zip(GMM_MEANS).map(|(w, m)| w * (m * m + GMM_STD * GMM_STD)).sum();
    (mean, (second - mean * mean).sqrt())
}

pub fn gmm_batch(n: usize, rng: &mut impl Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let data = (0..n)
        .map(|_| {
            let m = if rng.gen_bool(GMM_WEIGHTS[0]) { GMM_MEANS[0] } else { GMM_MEANS[1] };
            Normal::new(m, GMM_STD).unwrap().sample(rng) as f32
        })
        .collect();
    Tensor::from_vec(n, 1, data).unwrap()
}

/// Velocity MLP fitted to the mixture by flow matching.
pub fn gmm_teacher(seed: u64, steps: usize) -> (ardit::nets::MlpVelocity, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, mut ps) = ardit::nets::MlpVelocity::new(1, 64, 2, &mut rng).unwrap();
    m.fit(&mut ps, steps, 2e-3, &mut rng, |r| gmm_batch(256, r)).unwrap();
    (m, ps)
}

pub fn euler_samples(m: &ardit::nets::MlpVelocity, ps: &ParamSet, n: usize, steps: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = ardit::ardit::gaussian(n, 1, &mut rng);
    let field = |x: &Tensor, t: f32| m.velocity(ps, x, t);
    let y = ardit::flowmatch::euler_sample(&field, &w, ardit::flowmatch::OdeSchedule::new(steps).unwrap()).unwrap();
    y.data().to_vec()
}

/// One-step samples of the distilled generator and of the fake flow's own
/// one-step map `w - v(w, 1)`, from the same noise.
pub struct Distilled1d {
    pub generator: Vec<f32>,
    pub fake: Vec<f32>,
}

/// Distill a one-dimensional velocity MLP into its one-step generator.
pub fn distill_1d(
    m: &ardit::nets::MlpVelocity,
    teacher: &ParamSet,
    cfg: &ardit::dmd::DmdConfig,
    n_samples: usize,
    seed: u64,
) -> Distilled1d {
    use ardit::ardit::Utterance;
    use ardit::dmd::{cache_trajectories, distill, generator_step, DistillTriplet, DmdModels};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // The MLP ignores conditioning, so each utterance is a bag of independent
    // tokens; unit blocks give every token its own noise level.
    let data: Vec<Utterance> = (0..64).map(|_| Utterance::new(vec![0], Tensor::zeros(32, 1)).unwrap()).collect();
    let cache = cache_trajectories(m, teacher, &data, 1, ardit::flowmatch::OdeSchedule::new(16).unwrap(), seed).unwrap();
    let mut triplet = DistillTriplet::from_teacher(teacher.clone());
    distill(DmdModels::shared(m), &mut triplet, &data, &cache, cfg, &mut rng, |_, _| {}).unwrap();
    let item = Utterance::new(vec![0], Tensor::zeros(n_samples, 1)).unwrap();
    let part = BlockPartition::unshifted(n_samples, n_samples).unwrap();
    let w = ardit::ardit::gaussian(n_samples, 1, &mut rng);
    let one_step = |p: &ParamSet| generator_step(m, p, &item, &part, &w).unwrap().data().to_vec();
    Distilled1d {
        generator: one_step(&triplet.generator),
        fake: one_step(&triplet.fake),
    }
}

/// Budget that keeps the one-dimensional distillation stable: a long
/// high-regression phase, then five fake-flow steps per generator step.
pub fn toy_dmd_config() -> ardit::dmd::DmdConfig {
    ardit::dmd::DmdConfig {
        rounds: 3000,
        phase1_rounds: 2000,
        batch: 4,
        lr: 1e-3,
        fake_updates: 5,
        ..ardit::dmd::DmdConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Autoencoder rate and distortion.

/// Train the autoencoder at `beta_mi` with everything else fixed and return
/// `(bitrate, reconstruction MSE)` on held-out utterances.
pub fn rate_distortion(beta_mi: f32, steps: usize) -> (f64, f64) {
    use ardit::harness::{ae_metrics, gen_dataset, ExperimentConfig};
    use ardit::latentae::{train_ae, AeTrainConfig, LatentAe};
    let cfg = ExperimentConfig { beta_mi, ..ExperimentConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = cfg.language();
    let train = gen_dataset(&spec, 300, 3, 8, &mut rng).unwrap().frames();
    let test = gen_dataset(&spec, 30, 3, 8, &mut rng).unwrap().frames();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (ae, mut params) = LatentAe::new(&cfg.ae_config(), &mut rng).unwrap();
    let tc = AeTrainConfig { steps, batch: 8, lr: 1e-3, beta_mi, ..AeTrainConfig::default() };
    train_ae(&ae, &mut params, &train, &tc, &mut rng, |_, _| {}).unwrap();
    ae_metrics(&ae, &params, &test, 16, 2).unwrap()
}
