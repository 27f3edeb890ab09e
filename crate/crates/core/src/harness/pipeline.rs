use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{BlockSize, ExperimentConfig};
use super::dataset::{gen_dataset, Dataset};
use super::oracle::{corpus_ser, cosine, estimate_offset, oracle_transcribe};
use crate::ardit::{fim_generate, generate, train_ardit, ArditTrainConfig, DurationModel, GenerateOptions, Utterance};
use crate::blockplan::FimSplit;
use crate::checkpoint::Container;
use crate::dmd::{self, DistillTriplet, DmdConfig, DmdModels, TrajectoryCache};
use crate::error::{ensure, Error, Result};
use crate::flowmatch::OdeSchedule;
use crate::latentae::{bitrate, train_ae, AeConfig, AeParams, AeTrainConfig, FrameMask, LatentAe};
use crate::nets::{ArditNet, NetConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainAe,
    Encode,
    TrainArdit,
    CacheTrajectories,
    Distill,
    Sample,
    Edit,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainAe,
        Stage::Encode,
        Stage::TrainArdit,
        Stage::CacheTrajectories,
        Stage::Distill,
        Stage::Sample,
        Stage::Edit,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainAe => "train-ae",
            Stage::Encode => "encode",
            Stage::TrainArdit => "train-ardit",
            Stage::CacheTrajectories => "cache-trajectories",
            Stage::Distill => "distill",
            Stage::Sample => "sample",
            Stage::Edit => "edit",
            Stage::Eval => "eval",
        }
    }

    fn seed_tag(self) -> u64 {
        Self::ALL.iter().position(|&s| s == self).unwrap() as u64 + 1
    }

    pub fn rng(self, seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ self.seed_tag())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "train" { "train-ardit" } else { s };
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown stage `{s}`")))
    }
}

/// Where every stage reads and writes. Data, autoencoder and latents live in
/// `shared`; model and evaluation outputs in `run`, so several runs (e.g. a
/// block-size sweep) can branch off one set of upstream artifacts.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub shared: PathBuf,
    pub run: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Self {
            shared: dir.clone(),
            run: dir,
        }
    }

    pub fn branch(&self, name: &str) -> Self {
        Self {
            shared: self.shared.clone(),
            run: self.run.join(name),
        }
    }

    pub fn train_data(&self) -> PathBuf {
        self.shared.join("train.ardt")
    }
    pub fn test_data(&self) -> PathBuf {
        self.shared.join("test.ardt")
    }
    pub fn ae(&self) -> PathBuf {
        self.shared.join("ae.safetensors")
    }
    pub fn latents(&self) -> PathBuf {
        self.shared.join("latents.safetensors")
    }
    pub fn ardit(&self) -> PathBuf {
        self.run.join("ardit.safetensors")
    }
    pub fn trajectories(&self) -> PathBuf {
        self.run.join("trajectories.safetensors")
    }
    pub fn generator(&self) -> PathBuf {
        self.run.join("generator.safetensors")
    }
    pub fn samples(&self) -> PathBuf {
        self.run.join("samples.safetensors")
    }
    pub fn edits(&self) -> PathBuf {
        self.run.join("edits.safetensors")
    }
    pub fn report(&self) -> PathBuf {
        self.run.join("report.json")
    }

    pub fn metrics(&self, stage: Stage) -> PathBuf {
        let dir = match stage {
            Stage::GenData | Stage::TrainAe | Stage::Encode => &self.shared,
            _ => &self.run,
        };
        dir.join("metrics").join(format!("{}.jsonl", stage.name()))
    }
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency {
            stage: stage.name().into(),
            path: path.to_path_buf(),
        })
    }
}

/// Line-delimited JSON records for one stage; truncated on open.
pub struct Metrics {
    out: BufWriter<fs::File>,
    stage: Stage,
}

impl Metrics {
    pub fn create(path: &Path, stage: Stage) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            out: BufWriter::new(fs::File::create(path)?),
            stage,
        })
    }

    pub fn record(&mut self, mut value: serde_json::Value) -> Result<()> {
        value["stage"] = json!(self.stage.name());
        writeln!(self.out, "{value}")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub block_size: String,
    pub distilled: bool,
    pub n_samples: usize,
    pub ground_truth_ser: f64,
    pub sample_ser: f64,
    pub n_edits: usize,
    pub edit_ser: Option<f64>,
    pub edit_offset_cosine: Option<f64>,
    pub bitrate_bps: f64,
    pub recon_mse: f64,
    pub final_train_loss: Option<f64>,
    pub wall_seconds: f64,
}

impl EvalReport {
    pub fn is_valid(&self) -> bool {
        let rates = [Some(self.ground_truth_ser), Some(self.sample_ser), self.edit_ser];
        rates.iter().flatten().all(|r| (0.0..=1.0).contains(r))
            && [self.bitrate_bps, self.recon_mse, self.wall_seconds].iter().all(|v| v.is_finite())
            && self.edit_offset_cosine.is_none_or(f64::is_finite)
    }
}

fn meta_parse<T: FromStr>(c: &Container, key: &str) -> Result<T> {
    c.meta_get(key)?
        .parse()
        .map_err(|_| Error::Format(format!("bad metadata value for `{key}`")))
}

fn meta_json<T: for<'de> Deserialize<'de>>(c: &Container, key: &str) -> Result<T> {
    serde_json::from_str(c.meta_get(key)?).map_err(|e| Error::Format(format!("bad `{key}`: {e}")))
}

fn symbols_tensor(s: &[usize]) -> Tensor {
    Tensor::row_vector(s.iter().map(|&v| v as f32).collect())
}

fn tensor_symbols(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

pub fn load_ae(art: &Artifacts) -> Result<(LatentAe, AeParams)> {
    require(&art.ae(), Stage::TrainAe)?;
    let c = Container::load(&art.ae())?;
    let cfg: AeConfig = meta_json(&c, "ae_config")?;
    let (ae, mut params) = LatentAe::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    c.load_params("encoder.", &mut params.encoder)?;
    c.load_params("decoder.", &mut params.decoder)?;
    Ok((ae, params))
}

/// A velocity network checkpoint plus the latent scale it was trained at.
pub struct ArditModel {
    pub net: ArditNet,
    pub params: ParamSet,
    pub latent_scale: f32,
}

fn save_ardit(path: &Path, kind: &str, net: &ArditNet, params: &ParamSet, scale: f32) -> Result<()> {
    let mut c = Container::new();
    c.meta("kind", kind);
    c.meta("net_config", serde_json::to_string(net.config()).expect("config serializes"));
    c.meta("vocab", net.vocab());
    c.meta("d_latent", net.d_latent());
    c.meta("latent_scale", scale);
    c.insert_params("net.", params);
    c.save(path)
}

pub fn load_ardit(path: &Path, stage: Stage) -> Result<ArditModel> {
    require(path, stage)?;
    let c = Container::load(path)?;
    let cfg: NetConfig = meta_json(&c, "net_config")?;
    let (net, mut params) = ArditNet::new(&cfg, meta_parse(&c, "vocab")?, meta_parse(&c, "d_latent")?, &mut ChaCha8Rng::seed_from_u64(0))?;
    c.load_params("net.", &mut params)?;
    Ok(ArditModel {
        net,
        params,
        latent_scale: meta_parse(&c, "latent_scale")?,
    })
}

/// Encoded training set: transcripts with posterior means divided by a
/// global scale so tokens are roughly unit variance.
pub struct LatentSet {
    pub utterances: Vec<Utterance>,
    pub latent_scale: f32,
}

pub fn load_latents(art: &Artifacts) -> Result<LatentSet> {
    require(&art.latents(), Stage::Encode)?;
    let c = Container::load(&art.latents())?;
    let n: usize = meta_parse(&c, "count")?;
    let scale: f32 = meta_parse(&c, "latent_scale")?;
    let utterances = (0..n)
        .map(|i| {
            let text = tensor_symbols(c.get(&format!("u{i:06}/text"))?);
            let mean = c.get(&format!("u{i:06}/mean"))?.scale(1.0 / scale);
            Utterance::new(text, mean)
        })
        .collect::<Result<_>>()?;
    Ok(LatentSet {
        utterances,
        latent_scale: scale,
    })
}

fn duration_model(cfg: &ExperimentConfig, ae: &LatentAe) -> Result<DurationModel> {
    let ac = ae.config();
    DurationModel::new(cfg.language().mean_frames() * ac.hop_seconds, ac.hop_seconds, ac.downsample)
}

/// Bitrate and reconstruction error of the autoencoder on `frames`.
pub fn ae_metrics(ae: &LatentAe, params: &AeParams, frames: &[Tensor], decoder_steps: usize, seed: u64) -> Result<(f64, f64)> {
    ensure!(!frames.is_empty(), Input, "no utterances to evaluate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = OdeSchedule::new(decoder_steps)?;
    let (mut kl, mut secs, mut se, mut count) = (0.0, 0.0, 0.0, 0usize);
    for y in frames {
        let post = ae.encode(params, y)?;
        kl += post.kl_to_prior();
        secs += y.rows() as f64 * ae.config().hop_seconds;
        let rec = ae.decode(params, &post.mean, y.rows(), None, sched, &mut rng)?;
        se += rec.sub(y)?.sum_sq() as f64;
        count += y.len();
    }
    Ok((bitrate(kl, secs)?, se / count as f64))
}

fn run_gen_data(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics) -> Result<()> {
    let spec = cfg.language();
    let mut rng = Stage::GenData.rng(cfg.seed);
    fs::create_dir_all(&art.shared)?;
    for (path, n, split) in [(art.train_data(), cfg.n_train, "train"), (art.test_data(), cfg.n_test, "test")] {
        let d = gen_dataset(&spec, n, cfg.min_symbols, cfg.max_symbols, &mut rng)?;
        d.save(&path)?;
        let frames: usize = d.utterances.iter().map(|u| u.frames.rows()).sum();
        m.record(json!({"split": split, "utterances": n, "frames": frames}))?;
    }
    Ok(())
}

fn run_train_ae(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics) -> Result<()> {
    require(&art.train_data(), Stage::GenData)?;
    let data = Dataset::load(&art.train_data())?.frames();
    let mut rng = Stage::TrainAe.rng(cfg.seed);
    let ae_cfg = cfg.ae_config();
    let (ae, mut params) = LatentAe::new(&ae_cfg, &mut rng)?;
    let mut tc = AeTrainConfig {
        steps: cfg.ae_steps,
        batch: cfg.ae_batch,
        lr: cfg.ae_lr,
        beta_mi: cfg.beta_mi,
        masked: false,
        freeze_encoder: false,
    };
    let mut log = Vec::new();
    train_ae(&ae, &mut params, &data, &tc, &mut rng, |s, l| log.push((s, l)))?;
    for (s, l) in log.drain(..) {
        m.record(json!({"phase": "plain", "step": s, "loss": l}))?;
    }
    tc.steps = cfg.ae_masked_steps;
    tc.masked = true;
    train_ae(&ae, &mut params, &data, &tc, &mut rng, |s, l| log.push((s, l)))?;
    for (s, l) in log {
        m.record(json!({"phase": "masked", "step": s, "loss": l}))?;
    }
    let mut c = Container::new();
    c.meta("kind", "autoencoder");
    c.meta("ae_config", serde_json::to_string(&ae_cfg).expect("config serializes"));
    c.insert_params("encoder.", &params.encoder);
    c.insert_params("decoder.", &params.decoder);
    c.save(&art.ae())
}

fn run_encode(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics) -> Result<()> {
    require(&art.train_data(), Stage::GenData)?;
    let (ae, params) = load_ae(art)?;
    let data = Dataset::load(&art.train_data())?;
    let mut c = Container::new();
    let (mut sum_sq, mut count, mut kl, mut secs) = (0.0f64, 0usize, 0.0, 0.0);
    for (i, u) in data.utterances.iter().enumerate() {
        let post = ae.encode(&params, &u.frames)?;
        sum_sq += post.mean.sum_sq() as f64;
        count += post.mean.len();
        kl += post.kl_to_prior();
        secs += u.frames.rows() as f64 * ae.config().hop_seconds;
        c.insert(format!("u{i:06}/text"), symbols_tensor(&u.transcript));
        c.insert(format!("u{i:06}/mean"), post.mean);
        c.insert(format!("u{i:06}/log_std"), post.log_std);
    }
    let scale = ((sum_sq / count as f64).sqrt() as f32).max(1e-6);
    c.meta("kind", "latents");
    c.meta("count", data.utterances.len());
    c.meta("latent_scale", scale);
    c.meta("seed", cfg.seed);
    c.save(&art.latents())?;
    m.record(json!({"utterances": data.utterances.len(), "latent_scale": scale, "bitrate_bps": bitrate(kl, secs)?}))
}

fn run_train_ardit(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics) -> Result<()> {
    let lat = load_latents(art)?;
    let mut rng = Stage::TrainArdit.rng(cfg.seed);
    let d = lat.utterances[0].tokens.cols();
    let (net, mut params) = ArditNet::new(&cfg.net_config(), cfg.alphabet, d, &mut rng)?;
    let tc = ArditTrainConfig {
        steps: cfg.train_steps,
        batch: cfg.train_batch,
        lr: cfg.train_lr,
        block_size: cfg.block_size.0,
        fim_prob: cfg.fim_prob,
    };
    let mut log = Vec::with_capacity(tc.steps);
    train_ardit(&net, &mut params, &lat.utterances, &tc, &mut rng, |s, l| log.push((s, l)))?;
    for (s, l) in log {
        m.record(json!({"step": s, "loss": l, "block_size": cfg.block_size.to_string()}))?;
    }
    fs::create_dir_all(&art.run)?;
    save_ardit(&art.ardit(), "ardit", &net, &params, lat.latent_scale)
}

fn run_cache(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics) -> Result<()> {
    let model = load_ardit(&art.ardit(), Stage::TrainArdit)?;
    let lat = load_latents(art)?;
    let cache = dmd::cache_trajectories(
        &model.net,
        &model.params,
        &lat.utterances,
        cfg.block_size.0,
        OdeSchedule::new(cfg.ode_steps)?,
        cfg.seed,
    )?;
    cache.to_container().save(&art.trajectories())?;
    m.record(json!({"entries": cache.len(), "block_size": cfg.block_size.to_string(), "ode_steps": cfg.ode_steps}))
}

fn run_distill(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics) -> Result<()> {
    let model = load_ardit(&art.ardit(), Stage::TrainArdit)?;
    let lat = load_latents(art)?;
    require(&art.trajectories(), Stage::CacheTrajectories)?;
    let cache = TrajectoryCache::from_container(&Container::load(&art.trajectories())?)?;
    let mut triplet = DistillTriplet::from_teacher(model.params.clone());
    let dc = DmdConfig {
        rounds: cfg.dmd_rounds,
        phase1_rounds: cfg.dmd_phase1_rounds,
        beta_reg_phase1: cfg.beta_reg_phase1,
        beta_reg_phase2: cfg.beta_reg_phase2,
        batch: cfg.dmd_batch,
        lr: cfg.dmd_lr,
        shared_fake_noise: cfg.dmd_shared_fake_noise,
        fake_updates: cfg.dmd_fake_updates,
    };
    let mut rng = Stage::Distill.rng(cfg.seed);
    let mut log = Vec::new();
    dmd::distill(DmdModels::shared(&model.net), &mut triplet, &lat.utterances, &cache, &dc, &mut rng, |r, l| log.push((r, l)))?;
    for (r, l) in log {
        m.record(json!({"round": r, "beta_reg": dc.beta_for_round(r), "regression": l.regression, "ikl": l.ikl, "fake_fm": l.fake_fm}))?;
    }
    save_ardit(&art.generator(), "generator", &model.net, &triplet.generator, model.latent_scale)
}

/// The first `n` test utterances with their indices.
fn eval_subset(test: &Dataset, n: usize) -> impl Iterator<Item = (usize, &super::dataset::SynthUtterance)> {
    test.utterances.iter().enumerate().take(n)
}

fn generation_options(cfg: &ExperimentConfig, distilled: bool, n_latent: usize, equal_budget: bool) -> Result<GenerateOptions> {
    let b = cfg.block_size.0;
    let steps = if distilled {
        1
    } else if equal_budget {
        cfg.ode_steps * b.min(n_latent)
    } else {
        cfg.ode_steps
    };
    Ok(GenerateOptions {
        block_size: b,
        schedule: OdeSchedule::new(steps)?,
        use_cache: true,
    })
}

fn run_sample(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics, equal_budget: bool) -> Result<()> {
    require(&art.test_data(), Stage::GenData)?;
    let (ae, ae_params) = load_ae(art)?;
    let model = if cfg.sample_distilled {
        load_ardit(&art.generator(), Stage::Distill)?
    } else {
        load_ardit(&art.ardit(), Stage::TrainArdit)?
    };
    let test = Dataset::load(&art.test_data())?;
    let dm = duration_model(cfg, &ae)?;
    let dec_sched = OdeSchedule::new(cfg.decoder_ode_steps)?;
    let mut rng = Stage::Sample.rng(cfg.seed);
    let mut c = Container::new();
    let mut count = 0;
    for (i, u) in eval_subset(&test, cfg.n_samples) {
        let n_latent = dm.estimate(&u.transcript)?;
        let opts = generation_options(cfg, cfg.sample_distilled, n_latent, equal_budget)?;
        let lat = generate(&model.net, &model.params, &u.transcript, n_latent, &opts, &mut rng)?.scale(model.latent_scale);
        let frames = ae.decode(&ae_params, &lat, n_latent * ae.config().downsample, None, dec_sched, &mut rng)?;
        c.insert(format!("s{i:06}/text"), symbols_tensor(&u.transcript));
        c.insert(format!("s{i:06}/latents"), lat);
        c.insert(format!("s{i:06}/frames"), frames);
        m.record(json!({"sample": i, "n_latent": n_latent, "ode_steps_per_block": opts.schedule.n_steps()}))?;
        count += 1;
    }
    c.meta("kind", "samples");
    c.meta("count", count);
    c.meta("block_size", cfg.block_size);
    c.meta("distilled", cfg.sample_distilled);
    c.save(&art.samples())
}

/// Regenerate the middle third of each test utterance (whole symbols) from
/// its surrounding audio.
fn run_edit(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics) -> Result<()> {
    require(&art.test_data(), Stage::GenData)?;
    let (ae, ae_params) = load_ae(art)?;
    let model = if cfg.sample_distilled {
        load_ardit(&art.generator(), Stage::Distill)?
    } else {
        load_ardit(&art.ardit(), Stage::TrainArdit)?
    };
    let test = Dataset::load(&art.test_data())?;
    let ds = ae.config().downsample;
    let dec_sched = OdeSchedule::new(cfg.decoder_ode_steps)?;
    let mut rng = Stage::Edit.rng(cfg.seed);
    let mut c = Container::new();
    let mut count = 0;
    for (i, u) in eval_subset(&test, cfg.n_samples) {
        let n = u.transcript.len();
        if n < 3 {
            continue;
        }
        let (a, b) = (n / 3, n - n / 3);
        let (fa, fb) = (u.boundaries[a], u.boundaries[b]);
        let post = ae.encode(&ae_params, &u.frames)?;
        let n_lat = post.n_tokens();
        let (la, lb) = (fa / ds, (fb / ds).min(n_lat));
        if la >= lb {
            continue;
        }
        let split = FimSplit::new(la, lb, n_lat)?;
        let opts = generation_options(cfg, cfg.sample_distilled, lb - la, false)?;
        let ctx = post.mean.scale(1.0 / model.latent_scale);
        let lat = fim_generate(&model.net, &model.params, &u.transcript, &ctx, &split, &opts, &mut rng)?.scale(model.latent_scale);
        let mask = FrameMask {
            anchor: fa,
            bits: (0..u.frames.rows()).map(|r| r >= fa && r < fb).collect(),
        };
        let frames = ae.decode(&ae_params, &lat, u.frames.rows(), Some((&u.frames, &mask)), dec_sched, &mut rng)?;
        c.insert(format!("e{i:06}/text"), symbols_tensor(&u.transcript));
        c.insert(format!("e{i:06}/frames"), frames);
        c.insert(format!("e{i:06}/range"), Tensor::row_vector(vec![a as f32, b as f32, fa as f32, fb as f32]));
        m.record(json!({"edit": i, "symbols": [a, b], "frames": [fa, fb], "latents": [la, lb]}))?;
        count += 1;
    }
    c.meta("kind", "edits");
    c.meta("count", count);
    c.save(&art.edits())
}

fn entries<'a>(c: &'a Container, prefix: char) -> Vec<&'a str> {
    let mut keys: Vec<&str> = c
        .tensors
        .keys()
        .filter(|k| k.starts_with(prefix))
        .filter_map(|k| k.strip_suffix("/frames"))
        .collect();
    keys.sort_unstable();
    keys
}

fn last_loss(path: &Path) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    let line = text.lines().last()?;
    serde_json::from_str::<serde_json::Value>(line).ok()?.get("loss")?.as_f64()
}

fn run_eval(cfg: &ExperimentConfig, art: &Artifacts, m: &mut Metrics, started: Instant) -> Result<EvalReport> {
    require(&art.test_data(), Stage::GenData)?;
    require(&art.samples(), Stage::Sample)?;
    let spec = cfg.language();
    let test = Dataset::load(&art.test_data())?;
    let gt: Vec<_> = test
        .utterances
        .iter()
        .map(|u| Ok((oracle_transcribe(&u.frames, &spec)?, u.transcript.clone())))
        .collect::<Result<_>>()?;
    let samples = Container::load(&art.samples())?;
    let mut pairs = Vec::new();
    for key in entries(&samples, 's') {
        let text = tensor_symbols(samples.get(&format!("{key}/text"))?);
        let frames = samples.get(&format!("{key}/frames"))?;
        let hyp = oracle_transcribe(frames, &spec)?;
        m.record(json!({"sample": key, "reference": text, "hypothesis": hyp}))?;
        pairs.push((hyp, text));
    }
    let (mut edit_pairs, mut cosines) = (Vec::new(), Vec::new());
    if art.edits().exists() {
        let edits = Container::load(&art.edits())?;
        for key in entries(&edits, 'e') {
            let text = tensor_symbols(edits.get(&format!("{key}/text"))?);
            let frames = edits.get(&format!("{key}/frames"))?;
            let r = tensor_symbols(edits.get(&format!("{key}/range"))?);
            let (a, b, fa, fb) = (r[0], r[1], r[2], r[3]);
            let middle = frames.slice_rows(fa, fb);
            let context = Tensor::concat_rows(&[&frames.slice_rows(0, fa), &frames.slice_rows(fb, frames.rows())])?;
            let hyp = oracle_transcribe(&middle, &spec)?;
            let cos = cosine(&estimate_offset(&context), &estimate_offset(&middle));
            m.record(json!({"edit": key, "reference": &text[a..b], "hypothesis": hyp, "offset_cosine": cos}))?;
            edit_pairs.push((hyp, text[a..b].to_vec()));
            cosines.push(cos);
        }
    }
    let (ae, ae_params) = load_ae(art)?;
    let frames: Vec<Tensor> = eval_subset(&test, cfg.n_samples).map(|(_, u)| u.frames.clone()).collect();
    let (bitrate_bps, recon_mse) = ae_metrics(&ae, &ae_params, &frames, cfg.decoder_ode_steps, cfg.seed)?;
    let report = EvalReport {
        block_size: cfg.block_size.to_string(),
        distilled: cfg.sample_distilled,
        n_samples: pairs.len(),
        ground_truth_ser: corpus_ser(&gt),
        sample_ser: corpus_ser(&pairs),
        n_edits: edit_pairs.len(),
        edit_ser: (!edit_pairs.is_empty()).then(|| corpus_ser(&edit_pairs)),
        edit_offset_cosine: (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64),
        bitrate_bps,
        recon_mse,
        final_train_loss: last_loss(&art.metrics(Stage::TrainArdit)),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let mut rec = serde_json::to_value(&report).expect("report serializes");
    rec.as_object_mut().unwrap().remove("wall_seconds");
    m.record(rec)?;
    fs::write(art.report(), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

/// Run one stage. Only `eval` produces a report.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, art: &Artifacts) -> Result<Option<EvalReport>> {
    run_stage_with(stage, cfg, art, false)
}

fn run_stage_with(stage: Stage, cfg: &ExperimentConfig, art: &Artifacts, equal_budget: bool) -> Result<Option<EvalReport>> {
    cfg.validate()?;
    let started = Instant::now();
    let mut m = Metrics::create(&art.metrics(stage), stage)?;
    let report = match stage {
        Stage::GenData => run_gen_data(cfg, art, &mut m).map(|_| None),
        Stage::TrainAe => run_train_ae(cfg, art, &mut m).map(|_| None),
        Stage::Encode => run_encode(cfg, art, &mut m).map(|_| None),
        Stage::TrainArdit => run_train_ardit(cfg, art, &mut m).map(|_| None),
        Stage::CacheTrajectories => run_cache(cfg, art, &mut m).map(|_| None),
        Stage::Distill => run_distill(cfg, art, &mut m).map(|_| None),
        Stage::Sample => run_sample(cfg, art, &mut m, equal_budget).map(|_| None),
        Stage::Edit => run_edit(cfg, art, &mut m).map(|_| None),
        Stage::Eval => run_eval(cfg, art, &mut m, started).map(Some),
    }?;
    m.finish()?;
    Ok(report)
}

/// Run `stages` in order, stopping at the first failure.
pub fn run_chain(stages: &[Stage], cfg: &ExperimentConfig, art: &Artifacts) -> Result<Option<EvalReport>> {
    let mut last = None;
    for &s in stages {
        last = run_stage(s, cfg, art)?;
    }
    Ok(last)
}

/// Train, sample and evaluate one model per block size on the shared
/// upstream artifacts. Every size gets the same training steps and the same
/// total number of ODE evaluations per sequence.
pub fn block_size_sweep(cfg: &ExperimentConfig, art: &Artifacts, sizes: &[BlockSize]) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(sizes.len());
    for &b in sizes {
        let c = ExperimentConfig {
            block_size: b,
            sample_distilled: false,
            ..cfg.clone()
        };
        let branch = art.branch(&format!("sweep-b{b}"));
        run_stage_with(Stage::TrainArdit, &c, &branch, true)?;
        run_stage_with(Stage::Sample, &c, &branch, true)?;
        let report = run_stage_with(Stage::Eval, &c, &branch, true)?.expect("eval reports");
        reports.push(report);
    }
    Ok(reports)
}
