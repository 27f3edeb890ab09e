//! Contextual latent autoencoder.
//!
//! The encoder maps a frame sequence to a factorized Gaussian over latent
//! tokens (one token per four frames). The decoder is a conditional velocity
//! model over frames: a transformer over frame tokens conditioned on the
//! upsampled latents, whose output is refined by a small 2-D convolution stack
//! that also sees the noisy frame grid. Known frames can be supplied as clean
//! context (time 0) for masked reconstruction.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::flowmatch::{sample_time, OdeSchedule};
use crate::nets::{full_keys, ConvRefiner, ConvRefinerConfig, DiTStack, FinalLayer, NetConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bound, Linear, ParamBuilder, ParamSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub net: NetConfig,
    pub d_mel: usize,
    pub d_latent: usize,
    pub downsample: usize,
    /// Channels the transformer output is reshaped into before refinement.
    pub d_b: usize,
    pub refiner_channels: usize,
    pub hop_seconds: f64,
    pub beta_mi: f32,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::toy(),
            d_mel: 16,
            d_latent: 16,
            downsample: 4,
            d_b: 4,
            refiner_channels: 32,
            hop_seconds: 0.01,
            beta_mi: 0.035,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mean: Tensor,
    pub log_std: Tensor,
}

impl LatentPosterior {
    pub fn new(mean: Tensor, log_std: Tensor) -> Result<Self> {
        mean.check_same_shape(&log_std)?;
        Ok(Self { mean, log_std })
    }

    pub fn n_tokens(&self) -> usize {
        self.mean.rows()
    }

    /// `mean + exp(log_std) * eps` with standard normal `eps`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Tensor {
        let mut z = self.mean.clone();
        for (v, &ls) in z.data_mut().iter_mut().zip(self.log_std.data()) {
            let e: f32 = rng.sample(StandardNormal);
            *v += ls.exp() * e;
        }
        z
    }

    /// KL divergence to the standard normal, in nats.
    pub fn kl_to_prior(&self) -> f64 {
        self.mean
            .data()
            .iter()
            .zip(self.log_std.data())
            .map(|(&m, &ls)| {
                let (m, ls) = (m as f64, ls as f64);
                0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
            })
            .sum()
    }
}

/// Bits per second of audio for a KL measured in nats.
pub fn bitrate(kl_nats: f64, seconds: f64) -> Result<f64> {
    ensure!(seconds > 0.0, Input, "audio duration must be positive, got {seconds}");
    Ok(kl_nats / std::f64::consts::LN_2 / seconds)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    pub anchor: usize,
    /// `true` marks a frame to be reconstructed.
    pub bits: Vec<bool>,
}

impl FrameMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn masked_rows(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn context_rows(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

/// Rotating half-window: frame `n` is masked iff `(anchor + n) mod N < N/2`.
pub fn make_frame_mask(n_frames: usize, anchor: usize) -> Result<FrameMask> {
    ensure!(anchor < n_frames, Input, "anchor {anchor} outside 0..{n_frames}");
    let bits = (0..n_frames)
        // `r < N/2` over integers is `2r < N`.
        .map(|n| 2 * ((anchor + n) % n_frames) < n_frames)
        .collect();
    Ok(FrameMask { anchor, bits })
}

#[derive(Clone, Debug)]
pub struct Encoder {
    embed: Linear,
    stack: DiTStack,
    mean_head: Linear,
    log_std_head: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    embed: Linear,
    latent_embed: Linear,
    stack: DiTStack,
    head: FinalLayer,
    refiner: ConvRefiner,
}

/// Parameters of the encoder and decoder kept apart so either can be frozen.
#[derive(Clone, Debug)]
pub struct AeParams {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
}

#[derive(Clone, Debug)]
pub struct LatentAe {
    cfg: AeConfig,
    encoder: Encoder,
    decoder: Decoder,
}

/// Decoder inputs for one utterance: values per frame (noisy or clean context),
/// per-frame time tags and latent tokens.
pub struct DecoderInput<'a> {
    pub frames: Var,
    pub times: &'a [f32],
    pub latents: Var,
}

impl LatentAe {
    pub fn new<R: Rng>(cfg: &AeConfig, rng: &mut R) -> Result<(Self, AeParams)> {
        cfg.net.validate()?;
        ensure!(cfg.downsample >= 1 && cfg.d_b >= 1, Config, "downsample and d_b must be positive");
        let d = cfg.net.embed_dim;
        let mut pb = ParamBuilder::new(rng);
        let encoder = Encoder {
            embed: Linear::new(&mut pb, "embed", cfg.d_mel, d),
            stack: DiTStack::new(&mut pb, "stack", &cfg.net)?,
            mean_head: Linear::new(&mut pb, "mean", d, cfg.d_latent),
            log_std_head: pb.scoped("log_std", |pb| Linear {
                w: pb.zeros("weight", d, cfg.d_latent),
                b: pb.constant("bias", 1, cfg.d_latent, -2.0),
            }),
        };
        let enc_params = std::mem::take(&mut pb.set);
        let refiner_cfg = ConvRefinerConfig {
            in_channels: cfg.d_b + 1,
            mid_channels: cfg.refiner_channels,
            ..ConvRefinerConfig::default()
        };
        let decoder = Decoder {
            embed: Linear::new(&mut pb, "embed", cfg.d_mel, d),
            latent_embed: Linear::new(&mut pb, "latent_embed", cfg.d_latent, d),
            stack: DiTStack::new(&mut pb, "stack", &cfg.net)?,
            head: FinalLayer::new(&mut pb, "head", d, cfg.d_b * cfg.d_mel),
            refiner: ConvRefiner::new(&mut pb, "refiner", refiner_cfg)?,
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                decoder,
            },
            AeParams {
                encoder: enc_params,
                decoder: pb.set,
            },
        ))
    }

    pub fn config(&self) -> &AeConfig {
        &self.cfg
    }

    pub fn n_latent(&self, n_frames: usize) -> usize {
        n_frames / self.cfg.downsample
    }

    fn positions(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    /// Graph-level encoder: returns `(mean, log_std)` variables.
    pub fn encode_graph<F: Real>(&self, g: &mut Graph<F>, p: &Bound, frames: Var) -> Result<(Var, Var)> {
        let (n, d) = g.value(frames).shape();
        ensure!(d == self.cfg.d_mel, Input, "frame width {d} vs {}", self.cfg.d_mel);
        ensure!(n >= self.cfg.downsample, Input, "{n} frames is too short to encode");
        let e = &self.encoder;
        let x = e.embed.forward(g, p, frames)?;
        let out = e.stack.forward(g, p, x, &vec![0.0; n], &Self::positions(n), full_keys(n), None)?;
        let pooled = g.mean_pool_rows(out.hidden, self.cfg.downsample)?;
        let mean = e.mean_head.forward(g, p, pooled)?;
        let log_std = e.log_std_head.forward(g, p, pooled)?;
        Ok((mean, log_std))
    }

    pub fn encode(&self, params: &AeParams, frames: &Tensor) -> Result<LatentPosterior> {
        let mut g = Graph::new();
        let p = params.encoder.bind(&mut g, false);
        let x = g.constant(frames.clone());
        let (m, l) = self.encode_graph(&mut g, &p, x)?;
        LatentPosterior::new(g.value(m).clone(), g.value(l).clone())
    }

    /// Graph-level decoder velocity over all frames of one utterance.
    pub fn decode_graph<F: Real>(&self, g: &mut Graph<F>, p: &Bound, input: DecoderInput<'_>) -> Result<Var> {
        let (n, d) = g.value(input.frames).shape();
        ensure!(d == self.cfg.d_mel, Input, "frame width {d} vs {}", self.cfg.d_mel);
        ensure!(input.times.len() == n, Input, "{} time tags for {n} frames", input.times.len());
        let n_lat = g.value(input.latents).rows();
        ensure!(n_lat >= 1, Input, "decoder needs at least one latent token");
        ensure!(
            g.value(input.latents).cols() == self.cfg.d_latent,
            Input,
            "latent width {} vs {}",
            g.value(input.latents).cols(),
            self.cfg.d_latent
        );
        let dec = &self.decoder;
        let x = dec.embed.forward(g, p, input.frames)?;
        let zl = dec.latent_embed.forward(g, p, input.latents)?;
        let idx: Vec<usize> = (0..n).map(|i| (i / self.cfg.downsample).min(n_lat - 1)).collect();
        let zl = g.gather_rows(zl, &idx)?;
        let x = g.add(x, zl)?;
        let out = dec
            .stack
            .forward(g, p, x, input.times, &Self::positions(n), full_keys(n), None)?;
        let h = dec.head.forward(g, p, out.hidden, out.cond)?;
        let grid = g.frames_to_channels(h, self.cfg.d_b)?;
        let noisy = g.reshape(input.frames, 1, n * d)?;
        let stacked = g.concat_rows(&[grid, noisy])?;
        let v = dec.refiner.forward(g, p, stacked, n, d)?;
        g.reshape(v, n, d)
    }

    /// Velocity field for concrete inputs.
    pub fn decoder_velocity(&self, params: &AeParams, frames: &Tensor, times: &[f32], latents: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.decoder.bind(&mut g, false);
        let f = g.constant(frames.clone());
        let z = g.constant(latents.clone());
        let v = self.decode_graph(
            &mut g,
            &p,
            DecoderInput {
                frames: f,
                times,
                latents: z,
            },
        )?;
        Ok(g.value(v).clone())
    }

    /// Euler-sample `n_frames` frames from latents. Rows listed in `context`
    /// are held at the given values (time 0) and copied to the output.
    pub fn decode<R: Rng>(
        &self,
        params: &AeParams,
        latents: &Tensor,
        n_frames: usize,
        context: Option<(&Tensor, &FrameMask)>,
        schedule: OdeSchedule,
        rng: &mut R,
    ) -> Result<Tensor> {
        ensure!(n_frames >= 1, Input, "cannot decode zero frames");
        let d = self.cfg.d_mel;
        let mut y = Tensor::zeros(n_frames, d);
        for v in y.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        let free: Vec<bool> = match context {
            Some((frames, mask)) => {
                ensure!(
                    frames.shape() == (n_frames, d) && mask.bits.len() == n_frames,
                    Input,
                    "context must cover {n_frames} frames"
                );
                for r in mask.context_rows() {
                    y.row_mut(r).copy_from_slice(frames.row(r));
                }
                mask.bits.clone()
            }
            None => vec![true; n_frames],
        };
        let times = schedule.times();
        let h = schedule.step_size();
        for &t in &times[..times.len() - 1] {
            let tags: Vec<f32> = free.iter().map(|&f| if f { t } else { 0.0 }).collect();
            let v = self.decoder_velocity(params, &y, &tags, latents)?;
            for r in 0..n_frames {
                if free[r] {
                    for (yv, &vv) in y.row_mut(r).iter_mut().zip(v.row(r)) {
                        *yv -= h * vv;
                    }
                }
            }
        }
        Ok(y)
    }

    /// One utterance's loss term: `beta * KL + ||v - (W - Y)||^2` over the
    /// frames selected by `mask` (all frames when `None`). Masked-out frames
    /// enter the decoder as clean context.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        enc: &Bound,
        dec: &Bound,
        frames: &Tensor<F>,
        beta_mi: F,
        mask: Option<&FrameMask>,
        rng: &mut R,
    ) -> Result<Var> {
        let (n, d) = frames.shape();
        let y = g.constant(frames.clone());
        let (mean, log_std) = self.encode_graph(g, enc, y)?;
        let kl = g.gauss_kl(mean, log_std)?;
        let eps = normal_tensor::<F, R>(g.value(mean).rows(), self.cfg.d_latent, rng);
        let z = g.reparam(mean, log_std, Arc::new(eps))?;
        let t = sample_time(rng);
        let w = normal_tensor::<F, R>(n, d, rng);
        let free: Vec<bool> = mask.map_or_else(|| vec![true; n], |m| m.bits.clone());
        let mut noisy = frames.clone();
        let tf = F::lit(t as f64);
        for r in 0..n {
            if free[r] {
                for (v, &wv) in noisy.row_mut(r).iter_mut().zip(w.row(r)) {
                    *v = (F::one() - tf) * *v + tf * wv;
                }
            }
        }
        let tags: Vec<f32> = free.iter().map(|&f| if f { t } else { 0.0 }).collect();
        let xv = g.constant(noisy);
        let v = self.decode_graph(
            g,
            dec,
            DecoderInput {
                frames: xv,
                times: &tags,
                latents: z,
            },
        )?;
        let rows: Vec<usize> = (0..n).filter(|&r| free[r]).collect();
        let target = w.sub(frames)?.gather_rows(&rows);
        let v_sel = g.gather_rows(v, &rows)?;
        let tgt = g.constant(target);
        let diff = g.sub(v_sel, tgt)?;
        let rec = g.sum_sq(diff);
        let kl = g.scale(kl, beta_mi);
        g.add(kl, rec)
    }
}

fn normal_tensor<F: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<F> {
    let data = (0..rows * cols)
        .map(|_| F::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub beta_mi: f32,
    /// Masked-reconstruction objective instead of plain reconstruction.
    pub masked: bool,
    pub freeze_encoder: bool,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 1e-3,
            beta_mi: 0.035,
            masked: false,
            freeze_encoder: false,
        }
    }
}

/// Run `cfg.steps` optimizer steps over random minibatches of `data`,
/// reporting the mean per-utterance loss of each step to `on_step`.
pub fn train_ae<R: Rng>(
    ae: &LatentAe,
    params: &mut AeParams,
    data: &[Tensor],
    cfg: &AeTrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(usize, f32),
) -> Result<()> {
    ensure!(!data.is_empty(), Input, "no training utterances");
    let opt_cfg = AdamWConfig::with_lr(cfg.lr);
    let mut enc_opt = AdamW::new(opt_cfg.clone(), &params.encoder);
    let mut dec_opt = AdamW::new(opt_cfg, &params.decoder);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let enc = params.encoder.bind(&mut g, !cfg.freeze_encoder);
        let dec = params.decoder.bind(&mut g, true);
        let mut terms = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let y = &data[rng.gen_range(0..data.len())];
            let mask = if cfg.masked {
                Some(make_frame_mask(y.rows(), rng.gen_range(0..y.rows()))?)
            } else {
                None
            };
            terms.push(ae.loss_graph(&mut g, &enc, &dec, y, cfg.beta_mi, mask.as_ref(), rng)?);
        }
        let total = g.concat_rows(&terms)?;
        let total = g.sum(total);
        let loss = g.scale(total, 1.0 / cfg.batch as f32);
        let grads = g.backward(loss);
        if !cfg.freeze_encoder {
            enc_opt.step(&mut params.encoder, &enc.grads(&g, &grads));
        }
        dec_opt.step(&mut params.decoder, &dec.grads(&g, &grads));
        on_step(step, g.scalar(loss));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> AeConfig {
        AeConfig {
            net: NetConfig {
                n_layers: 1,
                n_heads: 2,
                embed_dim: 16,
                ffn_dim: 32,
                dropout: 0.0,
            },
            d_mel: 4,
            d_latent: 3,
            refiner_channels: 4,
            ..AeConfig::default()
        }
    }

    #[test]
    fn mask_examples() {
        assert_eq!(make_frame_mask(4, 1).unwrap().bits, vec![true, false, false, true]);
        assert_eq!(make_frame_mask(4, 0).unwrap().bits, vec![true, true, false, false]);
        assert_eq!(
            make_frame_mask(6, 5).unwrap().bits,
            vec![false, true, true, true, false, false]
        );
        assert!(make_frame_mask(4, 4).is_err());
    }

    #[test]
    fn mask_cardinality_exhaustive() {
        for n in 1..=64 {
            for a in 0..n {
                let m = make_frame_mask(n, a).unwrap();
                assert_eq!(m.count(), n.div_ceil(2));
                assert_eq!(m.masked_rows().len() + m.context_rows().len(), n);
            }
        }
    }

    #[test]
    fn kl_examples() {
        let post = |m: f32, ls: f32| LatentPosterior::new(Tensor::full(1, 1, m), Tensor::full(1, 1, ls)).unwrap();
        assert_eq!(post(0.0, 0.0).kl_to_prior(), 0.0);
        assert!((post(1.0, 0.0).kl_to_prior() - 0.5).abs() < 1e-12);
        let e2 = std::f64::consts::E.powi(2);
        assert!((post(0.0, 1.0).kl_to_prior() - 0.5 * (e2 - 3.0)).abs() < 1e-6);
        assert!((post(0.0, 1.0).kl_to_prior() - 2.1945).abs() < 1e-4);
    }

    #[test]
    fn bitrate_examples() {
        let kl = 1700.0 * std::f64::consts::LN_2;
        assert!((bitrate(kl, 1.0).unwrap() - 1700.0).abs() < 1e-9);
        assert_eq!(bitrate(0.0, 2.0).unwrap(), 0.0);
        assert!(bitrate(1.0, 0.0).is_err());
    }

    #[test]
    fn kl_gradient_is_closed_form() {
        let mut g = Graph::<f64>::new();
        let mu = g.param(Arc::new(Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap()));
        let ls = g.param(Arc::new(Tensor::from_vec(1, 3, vec![-0.3, 0.0, 0.7]).unwrap()));
        let kl = g.gauss_kl(mu, ls).unwrap();
        let gr = g.backward(kl);
        for i in 0..3 {
            let m = g.value(mu).data()[i];
            let l = g.value(ls).data()[i];
            assert!((gr.get(mu).unwrap().data()[i] - m).abs() < 1e-12);
            assert!((gr.get(ls).unwrap().data()[i] - ((2.0 * l).exp() - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_statistics() {
        let post = LatentPosterior::new(Tensor::full(1, 1, 0.7), Tensor::full(1, 1, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean = (0..n).map(|_| post.sample(&mut rng).data()[0] as f64).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 4.0 / (n as f64).sqrt());
        let tiny = LatentPosterior::new(Tensor::full(2, 2, 0.3), Tensor::full(2, 2, -30.0)).unwrap();
        assert!(tiny.sample(&mut rng).max_abs_diff(&Tensor::full(2, 2, 0.3)) < 1e-6);
        let a = post.sample(&mut ChaCha8Rng::seed_from_u64(9));
        let b = post.sample(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_shapes_and_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ae, ps) = LatentAe::new(&small(), &mut rng).unwrap();
        let y = Tensor::full(9, 4, 0.5);
        let post = ae.encode(&ps, &y).unwrap();
        assert_eq!(post.mean.shape(), (2, 3));
        assert!(post.log_std.data().iter().all(|&v| v == -2.0));
        assert_eq!(ae.encode(&ps, &Tensor::full(4, 4, 0.1)).unwrap().n_tokens(), 1);
        assert!(ae.encode(&ps, &Tensor::full(3, 4, 0.1)).is_err());
        assert_eq!(ae.encode(&ps, &y).unwrap(), post);
    }

    #[test]
    fn decode_shapes_and_copy_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ae, ps) = LatentAe::new(&small(), &mut rng).unwrap();
        let z = Tensor::full(2, 3, 0.1);
        let sched = OdeSchedule::new(4).unwrap();
        let out = ae.decode(&ps, &z, 8, None, sched, &mut rng).unwrap();
        assert_eq!(out.shape(), (8, 4));
        let ctx = Tensor::from_vec(8, 4, (0..32).map(|i| i as f32).collect()).unwrap();
        let mask = make_frame_mask(8, 3).unwrap();
        let out = ae.decode(&ps, &z, 8, Some((&ctx, &mask)), sched, &mut rng).unwrap();
        for r in mask.context_rows() {
            assert_eq!(out.row(r), ctx.row(r));
        }
    }

    #[test]
    fn zero_beta_drops_kl_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ae, ps) = LatentAe::new(&small(), &mut rng).unwrap();
        let y = Tensor::from_vec(8, 4, (0..32).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let eval = |beta: f32| {
            let mut g = Graph::new();
            let e = ps.encoder.bind(&mut g, false);
            let d = ps.decoder.bind(&mut g, false);
            let l = ae
                .loss_graph(&mut g, &e, &d, &y, beta, None, &mut ChaCha8Rng::seed_from_u64(5))
                .unwrap();
            g.scalar(l)
        };
        let post = ae.encode(&ps, &y).unwrap();
        let kl = post.kl_to_prior() as f32;
        assert!((eval(0.5) - eval(0.0) - 0.5 * kl).abs() < 1e-3 * kl.max(1.0));
    }

    #[test]
    fn masked_loss_uses_only_masked_rows() {
        // With a zero-output decoder the reconstruction term is ||W_M - Y_M||^2.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ae, ps) = LatentAe::new(&small(), &mut rng).unwrap();
        let y = Tensor::full(6, 4, 0.25);
        let mask = make_frame_mask(6, 5).unwrap();
        let mut g = Graph::new();
        let e = ps.encoder.bind(&mut g, false);
        let d = ps.decoder.bind(&mut g, false);
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let l = ae.loss_graph(&mut g, &e, &d, &y, 0.0, Some(&mask), &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let _eps = normal_tensor::<f32, _>(1, 3, &mut r2);
        let _t = sample_time(&mut r2);
        let w = normal_tensor::<f32, _>(6, 4, &mut r2);
        let expect: f32 = mask
            .masked_rows()
            .iter()
            .map(|&r| w.row(r).iter().map(|&v| (v - 0.25) * (v - 0.25)).sum::<f32>())
            .sum();
        assert!((g.scalar(l) - expect).abs() < 1e-4 * expect.max(1.0));
    }
}
