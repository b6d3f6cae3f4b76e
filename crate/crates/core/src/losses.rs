//! Reconstruction and adversarial objectives.
//!
//! The perceptual distance and the identity embedding use fixed random
//! convolutional pyramids built from constant seeds, so every run sees the
//! same metric networks.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::LossWeights;
use crate::discriminator::Discriminator;
use crate::error::{shape_err, Result};
use crate::math;
use crate::params::fan_in_normal;
use crate::tensor::Tensor;

const PERCEPTUAL_SEED: u64 = 0x7065_7263;
const EMBED_SEED: u64 = 0x656d_6264;
pub const EMBED_DIM: usize = 64;
const SLOPE: f64 = 0.2;

/// Random-weight convolutional pyramid; the distance is the per-layer mean of
/// squared differences between channel-normalised activations, summed over layers.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    convs: Vec<Tensor>,
}

impl Default for PerceptualNet {
    fn default() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let g = core::f64::consts::SQRT_2;
        Self {
            convs: alloc::vec![
                fan_in_normal(&[8, 3, 3, 3], g, &mut rng),
                fan_in_normal(&[16, 8, 3, 3], g, &mut rng),
                fan_in_normal(&[32, 16, 3, 3], g, &mut rng),
            ],
        }
    }
}

fn check_pair(tape: &Tape, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 4 || sa[1] != 3 {
        return Err(shape_err!("image pair {:?} / {:?} must share an [N, 3, H, W] shape", sa, sb));
    }
    Ok(sa[0])
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.shape().len() {
        3 => {
            let mut s = alloc::vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        }
        4 => Ok(t.clone()),
        _ => Err(shape_err!("expected an image or a batch of images, got {:?}", t.shape())),
    }
}

fn centred(tape: &mut Tape, x: Var) -> Var {
    let y = tape.scale(x, 2.0);
    tape.offset(y, -1.0)
}

impl PerceptualNet {
    /// Per-sample distances `[N]`.
    pub fn distance_var(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let n = check_pair(tape, a, b)?;
        let both = tape.concat(&[a, b], 0);
        let mut x = centred(tape, both);
        let mut total: Option<Var> = None;
        for (i, w) in self.convs.iter().enumerate() {
            if i > 0 && tape.shape(x)[2] >= 2 {
                x = tape.avg_pool2(x);
            }
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(x, wv, 1, 1);
            x = tape.leaky_relu(y, SLOPE);
            let f = tape.channel_normalize(x, 1e-10);
            let fa = tape.slice(f, 0, 0, n);
            let fb = tape.slice(f, 0, n, n);
            let d = tape.sub(fa, fb);
            let d = tape.square(d);
            let s = tape.shape(d).to_vec();
            let per = s[1] * s[2] * s[3];
            let d = tape.sum_groups(d, per, &[n]);
            let d = tape.scale(d, 1.0 / (s[2] * s[3]) as f64);
            total = Some(match total {
                Some(t) => tape.add(t, d),
                None => d,
            });
        }
        Ok(total.expect("at least one layer"))
    }

    /// Mean distance over a batch (or a single `[3, H, W]` image pair).
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(as_batch(a)?), tape.constant(as_batch(b)?));
        let d = self.distance_var(&mut tape, av, bv)?;
        let m = tape.mean(d);
        Ok(tape.scalar(m))
    }
}

/// Random-projection convolutional embedder with `EMBED_DIM` outputs. Three
/// stride-2 convolutions without bias, a 2×2 average pool and a fixed linear
/// projection; mid-gray images embed to the zero vector.
#[derive(Clone, Debug)]
pub struct Embedder {
    convs: Vec<Tensor>,
    projection: Tensor,
}

impl Default for Embedder {
    fn default() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EMBED_SEED);
        let g = core::f64::consts::SQRT_2;
        Self {
            convs: alloc::vec![
                fan_in_normal(&[16, 3, 3, 3], g, &mut rng),
                fan_in_normal(&[32, 16, 3, 3], g, &mut rng),
                fan_in_normal(&[32, 32, 3, 3], g, &mut rng),
            ],
            projection: fan_in_normal(&[EMBED_DIM, 32 * 4], 1.0, &mut rng),
        }
    }
}

impl Embedder {
    /// `[N, 3, H, W]` → `[N, EMBED_DIM]`.
    pub fn embed_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] < 8 || s[3] != s[2] {
            return Err(shape_err!("embedder expects square [N, 3, H≥8, H] images, got {:?}", s));
        }
        let n = s[0];
        let mut h = centred(tape, x);
        for w in &self.convs {
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(h, wv, 2, 1);
            h = tape.leaky_relu(y, SLOPE);
        }
        while tape.shape(h)[2] > 2 {
            h = tape.avg_pool2(h);
        }
        let hs = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[n, hs[1] * hs[2] * hs[3]]);
        let flat = if hs[2] == 1 { tape.concat(&[flat, flat, flat, flat], 1) } else { flat };
        let p = tape.constant(self.projection.clone());
        Ok(tape.linear(flat, p, None))
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(as_batch(images)?);
        let e = self.embed_var(&mut tape, x)?;
        Ok(tape.value(e).clone())
    }

    /// Per-sample identity loss `1 − cos(e_a, e_b)`, computed as half the
    /// squared distance of the normalised embeddings, `[N]`.
    pub fn identity_loss_var(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let n = check_pair(tape, a, b)?;
        let both = tape.concat(&[a, b], 0);
        let e = self.embed_var(tape, both)?;
        let e3 = tape.reshape(e, &[2 * n, 1, EMBED_DIM]);
        let sq = tape.square(e3);
        let ss = tape.sum_groups(sq, EMBED_DIM, &[2 * n, 1]);
        let ss = tape.offset(ss, 1e-12);
        let r = tape.rsqrt(ss);
        let u = tape.channel_scale(e3, r);
        let ua = tape.slice(u, 0, 0, n);
        let ub = tape.slice(u, 0, n, n);
        let d = tape.sub(ua, ub);
        let d = tape.square(d);
        let d = tape.sum_groups(d, EMBED_DIM, &[n]);
        Ok(tape.scale(d, 0.5))
    }

    /// Mean cosine similarity of the embeddings of two images or batches.
    pub fn identity_similarity(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(as_batch(a)?), tape.constant(as_batch(b)?));
        let l = self.identity_loss_var(&mut tape, av, bv)?;
        let m = tape.mean(l);
        Ok(1.0 - tape.scalar(m))
    }
}

/// Fixed networks used by the reconstruction losses and the metrics.
#[derive(Clone, Debug, Default)]
pub struct LossNets {
    pub perceptual: PerceptualNet,
    pub embedder: Embedder,
}

/// Batch-mean values of each loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub perceptual: f64,
    pub l2: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Reconstruction loss `λ1·perceptual + λ2·MSE + λ3·(1 − identity)`, averaged
/// over the batch; returns the scalar and the individual terms.
pub fn loss_e1_var(tape: &mut Tape, nets: &LossNets, render: Var, target: Var, w: &LossWeights) -> Result<(Var, LossTerms)> {
    check_pair(tape, render, target)?;
    let p = nets.perceptual.distance_var(tape, render, target)?;
    let p = tape.mean(p);
    let d = tape.sub(render, target);
    let d = tape.square(d);
    let l2 = tape.mean(d);
    let id = nets.embedder.identity_loss_var(tape, render, target)?;
    let id = tape.mean(id);
    let a = tape.scale(p, w.perceptual);
    let b = tape.scale(l2, w.l2);
    let c = tape.scale(id, w.identity);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    let terms = LossTerms { perceptual: tape.scalar(p), l2: tape.scalar(l2), identity: tape.scalar(id), adversarial: 0.0, total: tape.scalar(total) };
    Ok((total, terms))
}

/// [`loss_e1_var`] plus `λ4 · mean softplus(−score)`.
pub fn loss_e2_var(tape: &mut Tape, nets: &LossNets, render: Var, target: Var, scores: Var, w: &LossWeights) -> Result<(Var, LossTerms)> {
    let (base, mut terms) = loss_e1_var(tape, nets, render, target, w)?;
    let adv = adv_gen_loss_var(tape, scores);
    let a = tape.scale(adv, w.adversarial);
    let total = tape.add(base, a);
    terms.adversarial = tape.scalar(adv);
    terms.total = tape.scalar(total);
    Ok((total, terms))
}

/// Tape-free [`loss_e1_var`] on images or batches.
pub fn loss_e1(nets: &LossNets, render: &Tensor, target: &Tensor, w: &LossWeights) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let (r, t) = (tape.constant(as_batch(render)?), tape.constant(as_batch(target)?));
    Ok(loss_e1_var(&mut tape, nets, r, t, w)?.1)
}

/// Tape-free [`loss_e2_var`] with one score per batch element.
pub fn loss_e2(nets: &LossNets, render: &Tensor, target: &Tensor, scores: &[f64], w: &LossWeights) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let (r, t) = (tape.constant(as_batch(render)?), tape.constant(as_batch(target)?));
    let s = tape.constant(Tensor::from_vec(&[scores.len(), 1], scores.to_vec())?);
    Ok(loss_e2_var(&mut tape, nets, r, t, s, w)?.1)
}

/// `softplus(−score)`
pub fn adv_gen_loss(score: f64) -> f64 {
    math::softplus(-score)
}

/// `softplus(−real) + softplus(fake)`
pub fn adv_disc_loss(real_score: f64, fake_score: f64) -> f64 {
    math::softplus(-real_score) + math::softplus(fake_score)
}

/// Mean of `softplus(−score)` over a score vector.
pub fn adv_gen_loss_var(tape: &mut Tape, scores: Var) -> Var {
    let n = tape.neg(scores);
    let s = tape.softplus(n);
    tape.mean(s)
}

/// Mean of `softplus(−real) + softplus(fake)`.
pub fn adv_disc_loss_var(tape: &mut Tape, real: Var, fake: Var) -> Var {
    let a = adv_gen_loss_var(tape, real);
    let f = tape.softplus(fake);
    let b = tape.mean(f);
    tape.add(a, b)
}

/// Anything that can report per-sample scores and the input gradient of their sum.
pub trait Critic {
    fn score_and_input_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

impl Critic for Discriminator {
    fn score_and_input_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        Discriminator::score_and_input_grad(self, x)
    }
}

/// `weight · mean_n ‖∇ₓ score(x_n)‖²` over the leading batch axis.
pub fn r1_penalty<C: Critic + ?Sized>(critic: &C, x: &Tensor, weight: f64) -> Result<f64> {
    let (_, g) = critic.score_and_input_grad(x)?;
    let n = x.shape().first().copied().unwrap_or(1).max(1);
    Ok(weight * g.data().iter().map(|v| v * v).sum::<f64>() / n as f64)
}
