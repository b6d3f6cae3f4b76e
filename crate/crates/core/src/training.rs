//! Training steps: reconstruction encoder, adversarial encoder with its
//! tri-grid critic, and the image-domain pre-training of the toy generator.
//!
//! Every step draws its randomness from [`step_rng`], so a run resumed from a
//! checkpoint at step `k` continues exactly like an uninterrupted run.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::camera::CameraPose;
use crate::config::{LossWeights, ModelConfig, TrainConfig};
use crate::data::{mirror_augment, sample_orbit_pose, ToySample};
use crate::discriminator::{BnMode, Discriminator};
use crate::encoder::Encoder;
use crate::error::{invalid, shape_err, Error, Result};
use crate::generator::{front_record, layer_wiring, pose_record, sample_z_plus, Generator};
use crate::losses::{adv_disc_loss_var, adv_gen_loss_var, loss_e1_var, loss_e2_var, LossNets, LossTerms};
use crate::occlusion::{occlusion_mask, TriGridMask};
use crate::optim::{OptimizerConfig, OptimizerKind, Optimizer};
use crate::params::{Bound, ParamStore};
use crate::renderer::{render_field, render_var, RenderSettings};
use crate::scenes::{BlobHead, BLOB_PARAMS};
use crate::tensor::Tensor;
use crate::trigrid::TriGrid;

/// Deterministic generator for the randomness of one training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Optimiser settings for a training run; both encoders and the critic share them.
pub fn optimizer_config(train: &TrainConfig) -> OptimizerConfig {
    match train.optimizer {
        OptimizerKind::Ranger => OptimizerConfig::ranger(train.learning_rate),
        OptimizerKind::Adam => OptimizerConfig::adam(train.learning_rate, 0.9, 0.999),
    }
}

/// Images and cameras of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, 3, R, R]`
    pub images: Tensor,
    pub poses: Vec<CameraPose>,
    pub records: Vec<[f64; 25]>,
    /// Dataset index of each slot.
    pub indices: Vec<usize>,
    /// Whether the slot was mirrored.
    pub mirrored: Vec<bool>,
}

impl Batch {
    /// Gathers `indices` from `dataset`, mirroring each slot with probability `mirror_prob`.
    pub fn assemble<R: Rng + ?Sized>(dataset: &[ToySample], indices: &[usize], mirror_prob: f64, rng: &mut R) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let mut images = Vec::with_capacity(indices.len());
        let mut poses = Vec::with_capacity(indices.len());
        let mut records = Vec::with_capacity(indices.len());
        let mut mirrored = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = dataset.get(i).ok_or_else(|| invalid!("record {i} outside a dataset of {}", dataset.len()))?;
            let flip = mirror_prob > 0.0 && rng.random::<f64>() < mirror_prob;
            let (rec, img) = if flip { mirror_augment(&s.record, &s.image)? } else { (s.record, s.image.clone()) };
            poses.push(crate::camera::decode_pose_record(&rec)?.0);
            records.push(rec);
            images.push(img);
            mirrored.push(flip);
        }
        Ok(Self { images: Tensor::stack(&images)?, poses, records, indices: indices.to_vec(), mirrored })
    }

    /// Uniformly drawn batch of `size` slots.
    pub fn sample<R: Rng + ?Sized>(dataset: &[ToySample], size: usize, mirror_prob: f64, rng: &mut R) -> Result<Self> {
        if dataset.is_empty() {
            return Err(invalid!("empty dataset"));
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..dataset.len())).collect();
        Self::assemble(dataset, &idx, mirror_prob, rng)
    }

    /// The batch of training step `step`: a pure function of the dataset,
    /// `train.seed` and the step, so interrupted runs resume identically.
    pub fn for_step(dataset: &[ToySample], train: &TrainConfig, step: u64) -> Result<Self> {
        Self::sample(dataset, train.batch_size, train.mirror_prob, &mut step_rng(train.seed ^ 0x6261_7463_68, step))
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub perceptual: f64,
    pub l2: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub total: f64,
    pub disc_loss: Option<f64>,
    pub real_score: Option<f64>,
    pub fake_score: Option<f64>,
    pub r1_applied: bool,
    pub r1_penalty: Option<f64>,
    pub occluded_fraction: Option<f64>,
    pub mirrored: Vec<bool>,
}

impl StepMetrics {
    fn new(step: u64, terms: &LossTerms, batch: &Batch) -> Self {
        Self {
            step,
            perceptual: terms.perceptual,
            l2: terms.l2,
            identity: terms.identity,
            adversarial: terms.adversarial,
            total: terms.total,
            disc_loss: None,
            real_score: None,
            fake_score: None,
            r1_applied: false,
            r1_penalty: None,
            occluded_fraction: None,
            mirrored: batch.mirrored.clone(),
        }
    }
}

fn ensure_finite(value: f64, what: &str, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at step {step}")))
    }
}

fn add_grads(a: &mut [Tensor], b: &[Tensor]) {
    for (x, y) in a.iter_mut().zip(b) {
        for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
            *u += v;
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Encoder together with its optimiser state and step counter.
#[derive(Clone, Debug)]
pub struct EncoderTrainer {
    pub encoder: Encoder,
    pub optimizer: Optimizer,
    pub step: u64,
}

impl EncoderTrainer {
    pub fn new(encoder: Encoder, train: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(optimizer_config(train), encoder.params());
        Self { encoder, optimizer, step: 0 }
    }

    /// One reconstruction step; see [`train_step_e1`].
    pub fn train_step(&mut self, gen: &Generator, nets: &LossNets, batch: &Batch, weights: &LossWeights) -> Result<StepMetrics> {
        let m = train_step_e1(gen, &mut self.encoder, &mut self.optimizer, nets, batch, weights, self.step)?;
        self.step += 1;
        Ok(m)
    }
}

/// Reconstruction-only step: renders the batch through the encoder and the
/// frozen generator and takes one optimiser step on the encoder.
pub fn train_step_e1(
    gen: &Generator,
    encoder: &mut Encoder,
    optimizer: &mut Optimizer,
    nets: &LossNets,
    batch: &Batch,
    weights: &LossWeights,
    step: u64,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let b = encoder.params().bind(&mut tape, true);
    let gb = gen.params().bind(&mut tape, false);
    let x = tape.constant(batch.images.clone());
    let f = encoder.forward_var(&mut tape, &b, gen, &gb, x, &batch.poses, true)?;
    let (loss, terms) = loss_e1_var(&mut tape, nets, f.images, x, weights)?;
    ensure_finite(terms.total, "reconstruction loss", step)?;
    let g = tape.backward(loss);
    optimizer.update(encoder.params_mut(), &b.grads(&g))?;
    Ok(StepMetrics::new(step, &terms, batch))
}

/// Adversarial encoder, critic and their optimisers.
#[derive(Clone, Debug)]
pub struct AdversarialTrainer {
    pub encoder: Encoder,
    pub encoder_opt: Optimizer,
    pub critic: Discriminator,
    pub critic_opt: Optimizer,
    pub step: u64,
}

impl AdversarialTrainer {
    /// Starts the adversarial encoder from a copy of `init` (usually the trained
    /// reconstruction encoder) next to a fresh critic of the given widths. The
    /// critic sees tri-grid channels, or RGB renders when `image_domain_disc` is set.
    pub fn new<R: Rng + ?Sized>(init: &Encoder, train: &TrainConfig, critic_widths: [usize; 4], rng: &mut R) -> Self {
        let cfg = init.config();
        let channels = if train.image_domain_disc { 3 } else { cfg.trigrid_channels() };
        let critic = Discriminator::new(channels, critic_widths, rng);
        let oc = optimizer_config(train);
        Self {
            encoder_opt: Optimizer::new(oc, init.params()),
            critic_opt: Optimizer::new(oc, critic.params()),
            encoder: init.clone(),
            critic,
            step: 0,
        }
    }

    /// One alternating critic/encoder step; see [`train_step_e2_d`].
    pub fn train_step(&mut self, gen: &Generator, nets: &LossNets, batch: &Batch, weights: &LossWeights, train: &TrainConfig) -> Result<StepMetrics> {
        let m = train_step_e2_d(gen, self, nets, batch, weights, train, self.step)?;
        self.step += 1;
        Ok(m)
    }
}

fn masks_for(gen: &Generator, depth: &[Vec<f64>], poses: &[CameraPose], all_ones: bool) -> Result<Vec<TriGridMask>> {
    let cfg = gen.config();
    poses
        .iter()
        .zip(depth)
        .map(|(pose, d)| if all_ones { Ok(TriGridMask::for_dims(gen.dims(), true)) } else { occlusion_mask(d, cfg.image_res, pose, cfg) })
        .collect()
}

fn stacked_masks(masks: &[TriGridMask], channels: usize) -> Result<Tensor> {
    let parts: Vec<Tensor> = masks.iter().map(|m| m.expand(channels)).collect();
    let t = Tensor::stack(&parts)?;
    let s = t.shape().to_vec();
    t.reshape(&[s[0], s[2], s[3], s[4]])
}

/// Critic update on `real` (label 1) versus `fake` (label 0) inputs, with the
/// R1 penalty on the real inputs when due. Returns (loss, real, fake, r1).
fn critic_step(
    critic: &mut Discriminator,
    opt: &mut Optimizer,
    real: &Tensor,
    fake: &Tensor,
    weights: &LossWeights,
    step: u64,
) -> Result<(f64, f64, f64, Option<f64>)> {
    let n = real.shape()[0];
    let mut tape = Tape::new();
    let b = critic.params().bind(&mut tape, true);
    let (r, f) = (tape.constant(real.clone()), tape.constant(fake.clone()));
    let x = tape.concat(&[r, f], 0);
    let (scores, stats) = critic.score_var(&mut tape, &b, x, BnMode::Train)?;
    let sr = tape.slice(scores, 0, 0, n);
    let sf = tape.slice(scores, 0, n, fake.shape()[0]);
    let loss = adv_disc_loss_var(&mut tape, sr, sf);
    let loss = tape.scale(loss, weights.discriminator);
    let value = tape.scalar(loss);
    ensure_finite(value, "critic loss", step)?;
    let mut grads = b.grads(&tape.backward(loss));
    let r1 = if weights.r1_due(step) {
        let (p, g) = critic.r1_with_grads(real, weights.r1_weight)?;
        ensure_finite(p, "R1 penalty", step)?;
        add_grads(&mut grads, &g);
        Some(p)
    } else {
        None
    };
    let real_mean = mean(tape.value(sr).data());
    let fake_mean = mean(tape.value(sf).data());
    critic.commit_stats(&stats, 2 * n);
    opt.update(critic.params_mut(), &grads)?;
    Ok((value, real_mean, fake_mean, r1))
}

/// Alternating update of the adversarial encoder and its critic.
///
/// The critic step scores masked synthesised tri-grids (fresh truncated `z⁺`
/// samples) as real and masked encoded tri-grids as fake; the mask of each
/// batch slot is the occlusion mask derived from the depth of the encoder's
/// current same-view render, applied to both inputs of that slot. The encoder
/// step then minimises the reconstruction loss plus the adversarial term of the
/// updated critic. `no_disc` reduces to [`train_step_e1`], `no_occlusion`
/// replaces the masks with all-ones masks and `image_domain_disc` feeds the
/// critic renders at random orbit poses instead of tri-grids.
pub fn train_step_e2_d(
    gen: &Generator,
    st: &mut AdversarialTrainer,
    nets: &LossNets,
    batch: &Batch,
    weights: &LossWeights,
    train: &TrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    if train.no_disc {
        return train_step_e1(gen, &mut st.encoder, &mut st.encoder_opt, nets, batch, weights, step);
    }
    let mut rng = step_rng(train.seed ^ 0x6432_7374_6570, step);
    let cfg = gen.config().clone();
    let n = batch.len();
    let dims = gen.dims();
    let mut tape = Tape::new();
    let b = st.encoder.params().bind(&mut tape, true);
    let gb = gen.params().bind(&mut tape, false);
    let x = tape.constant(batch.images.clone());
    let f = st.encoder.forward_var(&mut tape, &b, gen, &gb, x, &batch.poses, true)?;

    let mut real_grids = Vec::with_capacity(n);
    for _ in 0..n {
        real_grids.push(gen.synthesize(&gen.sample_w_plus(&mut rng)?)?);
    }
    let (real, fake, critic_input, occluded_fraction) = if train.image_domain_disc {
        let settings = RenderSettings::from_config(&cfg);
        let intr = cfg.intrinsics();
        let dec = gen.decoder();
        let dec_vars = gen.decoder_ids().vars(&gb);
        let mut real = Vec::with_capacity(n);
        let mut fake_vars = Vec::with_capacity(n);
        for (i, grid) in real_grids.iter().enumerate() {
            let pose = sample_orbit_pose(cfg.radius, &mut rng)?;
            real.push(crate::renderer::render(grid, &dec, &pose, &intr, &settings)?.image);
            let g = tape.slice(f.t_final, 0, i, 1);
            fake_vars.push(render_var(&mut tape, g, dims, &dec_vars, &pose, &intr, &settings)?.image);
        }
        let fake_var = tape.concat(&fake_vars, 0);
        (Tensor::stack(&real)?, tape.value(fake_var).clone(), fake_var, None)
    } else {
        let depth: Vec<Vec<f64>> = f.renders.iter().map(|r| r.depth.clone()).collect();
        let masks = masks_for(gen, &depth, &batch.poses, train.no_occlusion)?;
        let frac = mean(&masks.iter().map(TriGridMask::fraction).collect::<Vec<_>>());
        let m = stacked_masks(&masks, cfg.channels)?;
        let mv = tape.constant(m.clone());
        let masked = tape.mul(f.t_final, mv);
        let real: Vec<Tensor> = real_grids.iter().map(TriGrid::to_tensor).collect();
        let real = Tensor::stack(&real)?;
        let s = real.shape().to_vec();
        let real = real.reshape(&[s[0], s[2], s[3], s[4]])?;
        let real = Tensor::from_vec(real.shape(), real.data().iter().zip(m.data()).map(|(a, b)| a * b).collect())?;
        (real, tape.value(masked).clone(), masked, Some(frac))
    };

    let (disc_loss, real_score, fake_score, r1) = critic_step(&mut st.critic, &mut st.critic_opt, &real, &fake, weights, step)?;

    let db = st.critic.params().bind(&mut tape, false);
    let (scores, _) = st.critic.score_var(&mut tape, &db, critic_input, BnMode::Eval)?;
    let (loss, terms) = loss_e2_var(&mut tape, nets, f.images, x, scores, weights)?;
    ensure_finite(terms.total, "adversarial encoder loss", step)?;
    let g = tape.backward(loss);
    st.encoder_opt.update(st.encoder.params_mut(), &b.grads(&g))?;

    let mut m = StepMetrics::new(step, &terms, batch);
    m.disc_loss = Some(disc_loss);
    m.real_score = Some(real_score);
    m.fake_score = Some(fake_score);
    m.r1_applied = r1.is_some();
    m.r1_penalty = r1;
    m.occluded_fraction = occluded_fraction;
    Ok(m)
}

/// Settings of the generator pre-training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub r1_weight: f64,
    pub r1_interval: u64,
    pub critic_channels: [usize; 4],
    /// Probability of conditioning the mapping network on the render camera
    /// instead of the front camera.
    pub pose_cond_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::Distill,
            steps: 600,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 0,
            r1_weight: 1.0,
            r1_interval: 4,
            critic_channels: [16, 16, 32, 32],
            pose_cond_prob: 0.5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.r1_interval == 0 {
            return Err(invalid!("batch_size and r1_interval must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid!("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pose_cond_prob) {
            return Err(invalid!("pose_cond_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// How the toy generator is fitted to blob heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Regress renders onto the head that [`head_from_latent`] assigns to each `z⁺`.
    #[default]
    Distill,
    /// Image-domain GAN against random blob-head renders.
    Adversarial,
}

/// Deterministic blob head for a `z⁺` stack: parameter `k` reads component
/// `k / rows` of the `k % rows`-th row that drives a synthesis layer, through
/// the standard-normal CDF.
pub fn head_from_latent(cfg: &ModelConfig, z_plus: &[f64]) -> Result<BlobHead> {
    if z_plus.len() != cfg.latent_layers * cfg.z_dim {
        return Err(shape_err!("z⁺ has {} values, expected {}", z_plus.len(), cfg.latent_layers * cfg.z_dim));
    }
    let mut rows: Vec<usize> = layer_wiring(cfg).into_iter().map(|(_, r)| r).collect();
    rows.dedup();
    if rows.len() * cfg.z_dim < BLOB_PARAMS {
        return Err(invalid!("z⁺ too small to drive {BLOB_PARAMS} head parameters"));
    }
    let mut u = [0.0; BLOB_PARAMS];
    for (k, v) in u.iter_mut().enumerate() {
        let z = z_plus[rows[k % rows.len()] * cfg.z_dim + k / rows.len()];
        *v = 0.5 * (1.0 + libm::erf(z / core::f64::consts::SQRT_2));
    }
    Ok(BlobHead::from_unit(&u))
}

/// One line of the generator pre-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub step: u64,
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub real_score: f64,
    pub fake_score: f64,
    pub r1_penalty: Option<f64>,
    /// Mean squared error against the assigned heads (distillation only).
    pub distill_l2: Option<f64>,
    /// Mean opacity of the generated renders.
    pub fake_opacity: f64,
}

/// Fits the toy generator to blob-head renders at uniformly random orbit poses.
#[derive(Clone, Debug)]
pub struct GeneratorTrainer {
    pub generator: Generator,
    pub gen_opt: Optimizer,
    pub critic: Discriminator,
    pub critic_opt: Optimizer,
    pub config: PretrainConfig,
    pub step: u64,
}

impl GeneratorTrainer {
    pub fn new<R: Rng + ?Sized>(generator: Generator, config: PretrainConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let critic = Discriminator::new(3, config.critic_channels, rng);
        let oc = OptimizerConfig::adam(config.learning_rate, 0.0, 0.99);
        Ok(Self {
            gen_opt: Optimizer::new(oc, generator.params()),
            critic_opt: Optimizer::new(oc, critic.params()),
            generator,
            critic,
            config,
            step: 0,
        })
    }

    /// Blob-head renders at the given poses, `[N, 3, R, R]`.
    pub fn real_batch<R: Rng + ?Sized>(cfg: &ModelConfig, poses: &[CameraPose], rng: &mut R) -> Result<Tensor> {
        let settings = RenderSettings::from_config(cfg);
        let intr = cfg.intrinsics();
        let mut out = Vec::with_capacity(poses.len());
        for pose in poses {
            let head = BlobHead::random(rng);
            out.push(render_field(|p| head.field(p), pose, &intr, &settings)?.image);
        }
        Tensor::stack(&out)
    }

    pub fn train_step(&mut self) -> Result<PretrainMetrics> {
        let step = self.step;
        let pc = self.config;
        let mut rng = step_rng(pc.seed ^ 0x6765_6e70, step);
        let gen = &self.generator;
        let cfg = gen.config().clone();
        let n = pc.batch_size;
        let (l, zd) = (cfg.latent_layers, cfg.z_dim);
        let intr = cfg.intrinsics();
        let settings = RenderSettings::from_config(&cfg);

        let fake_poses: Vec<CameraPose> = (0..n).map(|_| sample_orbit_pose(cfg.radius, &mut rng)).collect::<Result<_>>()?;
        let real_poses: Vec<CameraPose> = (0..n).map(|_| sample_orbit_pose(cfg.radius, &mut rng)).collect::<Result<_>>()?;
        let real = match pc.mode {
            PretrainMode::Adversarial => Some(Self::real_batch(&cfg, &real_poses, &mut rng)?),
            PretrainMode::Distill => None,
        };
        let z = sample_z_plus(n * l, zd, &mut rng);
        let mut cond = Vec::with_capacity(n * l * 25);
        for pose in &fake_poses {
            let rec = if rng.random::<f64>() < pc.pose_cond_prob { pose_record(pose, &intr) } else { front_record(&cfg) };
            for _ in 0..l {
                cond.extend_from_slice(&rec);
            }
        }

        let mut tape = Tape::new();
        let gb: Bound = gen.params().bind(&mut tape, true);
        let zv = tape.constant(Tensor::from_vec(&[n * l, zd], z.clone())?);
        let cv = tape.constant(Tensor::from_vec(&[n * l, 25], cond)?);
        let w = gen.map_var(&mut tape, &gb, zv, cv);
        let w_values = tape.value(w).clone();
        let wplus = tape.reshape(w, &[n, l, cfg.w_dim]);
        let grids = gen.synthesize_var(&mut tape, &gb, wplus);
        let dec = gen.decoder_ids().vars(&gb);
        let mut imgs: Vec<Var> = Vec::with_capacity(n);
        let mut opacity = 0.0;
        for (i, pose) in fake_poses.iter().enumerate() {
            let g = tape.slice(grids, 0, i, 1);
            let r = render_var(&mut tape, g, gen.dims(), &dec, pose, &intr, &settings)?;
            opacity += mean(&r.opacity) / n as f64;
            imgs.push(r.image);
        }
        let fake_var = tape.concat(&imgs, 0);

        let mut m = PretrainMetrics { step, gen_loss: 0.0, disc_loss: 0.0, real_score: 0.0, fake_score: 0.0, r1_penalty: None, distill_l2: None, fake_opacity: opacity };
        let loss = match real {
            None => {
                let mut targets = Vec::with_capacity(n);
                for (i, pose) in fake_poses.iter().enumerate() {
                    let head = head_from_latent(&cfg, &z[i * l * zd..(i + 1) * l * zd])?;
                    targets.push(render_field(|p| head.field(p), pose, &intr, &settings)?.image);
                }
                let t = tape.constant(Tensor::stack(&targets)?);
                let d = tape.sub(fake_var, t);
                let sq = tape.square(d);
                let loss = tape.mean(sq);
                m.distill_l2 = Some(tape.scalar(loss));
                loss
            }
            Some(real) => {
                let fake = tape.value(fake_var).clone();
                let weights = LossWeights { discriminator: 1.0, r1_weight: pc.r1_weight * pc.r1_interval as f64, r1_interval: pc.r1_interval, ..LossWeights::default() };
                let (disc_loss, real_score, fake_score, r1) = critic_step(&mut self.critic, &mut self.critic_opt, &real, &fake, &weights, step)?;
                (m.disc_loss, m.real_score, m.fake_score, m.r1_penalty) = (disc_loss, real_score, fake_score, r1);
                let db = self.critic.params().bind(&mut tape, false);
                let (scores, _) = self.critic.score_var(&mut tape, &db, fake_var, BnMode::Eval)?;
                adv_gen_loss_var(&mut tape, scores)
            }
        };
        m.gen_loss = tape.scalar(loss);
        ensure_finite(m.gen_loss, "generator loss", step)?;
        let grads = gb.grads(&tape.backward(loss));
        self.gen_opt.update(self.generator.params_mut(), &grads)?;
        self.generator.update_w_avg(&w_values);
        self.step += 1;
        Ok(m)
    }
}

/// Named optimiser and critic state, for checkpointing trainers.
pub fn critic_running_stats(critic: &Discriminator) -> ParamStore {
    let mut p = ParamStore::new();
    for (i, (m, v)) in critic.running.iter().enumerate() {
        p.add(&format!("disc.bn{}.running_mean", i + 1), Tensor::from_vec(&[m.len()], m.clone()).expect("1-d"));
        p.add(&format!("disc.bn{}.running_var", i + 1), Tensor::from_vec(&[v.len()], v.clone()).expect("1-d"));
    }
    p
}

/// Restores the running statistics written by [`critic_running_stats`].
pub fn load_critic_running_stats(critic: &mut Discriminator, p: &ParamStore) -> Result<()> {
    for i in 0..critic.running.len() {
        for (k, name) in ["running_mean", "running_var"].iter().enumerate() {
            let key: String = format!("disc.bn{}.{name}", i + 1);
            let id = p.find(&key).ok_or_else(|| Error::Checkpoint(format!("missing '{key}'")))?;
            let t = p.get(id);
            let dst = if k == 0 { &mut critic.running[i].0 } else { &mut critic.running[i].1 };
            if t.len() != dst.len() {
                return Err(shape_err!("'{key}' has {} values, expected {}", t.len(), dst.len()));
            }
            dst.copy_from_slice(t.data());
        }
    }
    Ok(())
}
