//! Convolutional critic over stacked tri-grid channels (or images).
//!
//! `conv → lrelu`, then three `conv → batch-norm → lrelu` blocks, a valid 3×3
//! convolution to one channel and a global average pool. Convolutions have no
//! bias and the score is unbounded.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{fan_in_normal, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are returned for the caller to commit.
    Train,
    /// Running statistics; samples are scored independently.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    params: ParamStore,
    convs: [ParamId; 5],
    norms: [(ParamId, ParamId); 3],
    /// Running mean and variance per normalised block.
    pub running: Vec<(Vec<f64>, Vec<f64>)>,
    in_channels: usize,
    min_size: usize,
}

/// Batch statistics observed during a training-mode pass.
#[derive(Clone, Debug, Default)]
pub struct BnStats(Vec<(Vec<f64>, Vec<f64>)>);

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, widths: [usize; 4], rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let g = core::f64::consts::SQRT_2;
        let c0 = p.add("disc.conv0.w", fan_in_normal(&[widths[0], in_channels, 3, 3], g, rng));
        let c1 = p.add("disc.conv1.w", fan_in_normal(&[widths[1], widths[0], 3, 3], g, rng));
        let c2 = p.add("disc.conv2.w", fan_in_normal(&[widths[2], widths[1], 3, 3], g, rng));
        let c3 = p.add("disc.conv3.w", fan_in_normal(&[widths[3], widths[2], 3, 3], g, rng));
        let c4 = p.add("disc.conv4.w", fan_in_normal(&[1, widths[3], 3, 3], 1.0, rng));
        let mut norms = [(c0, c0); 3];
        let mut running = Vec::new();
        for (i, n) in norms.iter_mut().enumerate() {
            let c = widths[i + 1];
            *n = (p.add(&format!("disc.bn{}.gamma", i + 1), Tensor::full(&[c], 1.0)), p.add(&format!("disc.bn{}.beta", i + 1), Tensor::zeros(&[c])));
            running.push((vec![0.0; c], vec![1.0; c]));
        }
        Self { params: p, convs: [c0, c1, c2, c3, c4], norms, running, in_channels, min_size: 3 }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] < self.min_size || shape[3] < self.min_size {
            return Err(shape_err!("critic expects [N, {}, H≥3, W≥3], got {:?}", self.in_channels, shape));
        }
        Ok(())
    }

    /// Scores `[N, 1]` for `x[N, C, H, W]`.
    pub fn score_var(&self, tape: &mut Tape, b: &Bound, x: Var, mode: BnMode) -> Result<(Var, BnStats)> {
        self.check(tape.shape(x))?;
        let mut stats = BnStats::default();
        let h = tape.conv2d(x, b.var(self.convs[0]), 1, 1);
        let mut h = tape.leaky_relu(h, SLOPE);
        for i in 0..3 {
            let y = tape.conv2d(h, b.var(self.convs[i + 1]), 1, 1);
            let (gamma, beta) = (b.var(self.norms[i].0), b.var(self.norms[i].1));
            let y = match mode {
                BnMode::Train => {
                    let (y, mean, var) = tape.batch_norm(y, gamma, beta, BN_EPS);
                    stats.0.push((mean, var));
                    y
                }
                BnMode::Eval => {
                    let (mean, var) = &self.running[i];
                    let inv: Vec<f64> = var.iter().map(|v| 1.0 / crate::math::sqrt(v + BN_EPS)).collect();
                    let c = inv.len();
                    let inv = tape.constant(Tensor::from_vec(&[c], inv)?);
                    let mean = tape.constant(Tensor::from_vec(&[c], mean.clone())?);
                    let scale = tape.mul(gamma, inv);
                    let ms = tape.mul(scale, mean);
                    let shift = tape.sub(beta, ms);
                    tape.channel_affine(y, scale, shift)
                }
            };
            h = tape.leaky_relu(y, SLOPE);
        }
        let y = tape.conv2d(h, b.var(self.convs[4]), 1, 0);
        Ok((tape.global_avg_pool(y), stats))
    }

    /// Folds training-mode batch statistics into the running estimates
    /// (unbiased variance, momentum 0.1).
    pub fn commit_stats(&mut self, stats: &BnStats, count: usize) {
        let corr = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for ((rm, rv), (m, v)) in self.running.iter_mut().zip(&stats.0) {
            for (r, x) in rm.iter_mut().zip(m) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
            }
            for (r, x) in rv.iter_mut().zip(v) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x * corr;
            }
        }
    }

    /// Evaluation-mode scores of a batch.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (s, _) = self.score_var(&mut tape, &b, xv, BnMode::Eval)?;
        let out = tape.value(s).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("critic score".into()));
        }
        Ok(out)
    }

    /// Evaluation-mode scores and `∂(Σ scores)/∂x`.
    pub fn score_and_input_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let xv = tape.param(x.clone());
        let (s, _) = self.score_var(&mut tape, &b, xv, BnMode::Eval)?;
        let total = tape.sum(s);
        let g = tape.backward(total);
        Ok((tape.value(s).data().to_vec(), g.tensor(xv)))
    }

    /// R1 penalty `weight · mean_n ‖∇ₓ D(x_n)‖²` and its parameter gradient.
    ///
    /// The parameter gradient uses `∇θ ‖g‖² = 2 ∇θ ⟨∇ₓD, g⟩` with `g` held
    /// fixed, and evaluates `⟨∇ₓD, g⟩` as a central difference of `D` along
    /// `g`. The critic is piecewise linear in its input in evaluation mode, so
    /// the difference is exact unless the probe crosses an activation kink.
    pub fn r1_with_grads(&self, x: &Tensor, weight: f64) -> Result<(f64, Vec<Tensor>)> {
        let (_, g) = self.score_and_input_grad(x)?;
        let n = x.shape()[0];
        let penalty = weight * g.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let gmax = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax == 0.0 {
            return Ok((penalty, self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()));
        }
        let xmax = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // wide enough to keep cancellation in the parameter gradient below 1e-13
        let eps = 1e-5 * (1.0 + xmax) / gmax;
        let plus = Tensor::from_vec(x.shape(), x.data().iter().zip(g.data()).map(|(a, b)| a + eps * b).collect())?;
        let minus = Tensor::from_vec(x.shape(), x.data().iter().zip(g.data()).map(|(a, b)| a - eps * b).collect())?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, true);
        let both = Tensor::stack(&[plus, minus])?;
        let mut shape = vec![2 * n];
        shape.extend_from_slice(&x.shape()[1..]);
        let xv = tape.constant(both.reshape(&shape)?);
        let (s, _) = self.score_var(&mut tape, &b, xv, BnMode::Eval)?;
        let sp = tape.slice(s, 0, 0, n);
        let sm = tape.slice(s, 0, n, n);
        let d = tape.sub(sp, sm);
        let d = tape.sum(d);
        let obj = tape.scale(d, weight * 2.0 / (n as f64 * 2.0 * eps));
        let grads = tape.backward(obj);
        Ok((penalty, b.grads(&grads)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;
    use crate::params::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc() -> Discriminator {
        let mut d = Discriminator::new(6, [3, 4, 4, 5], &mut ChaCha8Rng::seed_from_u64(1));
        // non-trivial running statistics
        for (i, (m, v)) in d.running.iter_mut().enumerate() {
            m.iter_mut().enumerate().for_each(|(j, x)| *x = 0.1 * (i + j) as f64);
            v.iter_mut().enumerate().for_each(|(j, x)| *x = 0.5 + 0.2 * j as f64);
        }
        d
    }

    #[test]
    fn convolutions_carry_no_bias() {
        let d = disc();
        for (name, t) in d.params().iter() {
            assert!(!name.contains("bias") && !name.ends_with(".b"), "{name}");
            if name.contains("conv") {
                assert_eq!(t.shape().len(), 4);
            }
        }
    }

    #[test]
    fn one_unbounded_score_per_sample() {
        let d = disc();
        let x = normal_tensor(&[3, 6, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let s = d.score(&x).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s, d.score(&x).unwrap());
        // eval mode scores each sample on its own
        assert_eq!(d.score(&x.batch_item(1)).unwrap()[0], s[1]);
        let big = d.score(&x.map(|v| 10.0 * v)).unwrap();
        assert!(big.iter().chain(&s).any(|v| !(0.0..=1.0).contains(v)));
        assert!(d.score(&Tensor::zeros(&[1, 5, 8, 8])).is_err());
    }

    #[test]
    fn input_gradient_is_finite_and_matches_differences() {
        let d = disc();
        let x = normal_tensor(&[2, 6, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let (_, g) = d.score_and_input_grad(&x).unwrap();
        assert!(g.is_finite());
        for &c in &[0usize, 17, 101, 300, 431] {
            let h = 1e-6;
            let mut p = x.clone();
            p.data_mut()[c] += h;
            let mut m = x.clone();
            m.data_mut()[c] -= h;
            let num = (d.score(&p).unwrap().iter().sum::<f64>() - d.score(&m).unwrap().iter().sum::<f64>()) / (2.0 * h);
            assert!(rel_err(g.data()[c], num) < 1e-4);
        }
    }

    #[test]
    fn r1_parameter_gradient_matches_differences() {
        let d = disc();
        let x = normal_tensor(&[2, 6, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let (p0, grads) = d.r1_with_grads(&x, 10.0).unwrap();
        assert!(p0 > 0.0);
        let mut worst: f64 = 0.0;
        for (pi, t) in d.params().tensors().iter().enumerate() {
            for &c in &[0usize, t.len() / 2, t.len() - 1] {
                let h = 1e-6;
                let mut dp = d.clone();
                dp.params_mut().tensors_mut()[pi].data_mut()[c] += h;
                let mut dm = d.clone();
                dm.params_mut().tensors_mut()[pi].data_mut()[c] -= h;
                let num = (dp.r1_with_grads(&x, 10.0).unwrap().0 - dm.r1_with_grads(&x, 10.0).unwrap().0) / (2.0 * h);
                let a = grads[pi].data()[c];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn train_mode_updates_running_statistics() {
        let mut d = disc();
        let before = d.running.clone();
        let x = normal_tensor(&[4, 6, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::new();
        let b = d.params().bind(&mut tape, true);
        let xv = tape.constant(x);
        let (_, stats) = d.score_var(&mut tape, &b, xv, BnMode::Train).unwrap();
        d.commit_stats(&stats, 4 * 36);
        assert_ne!(before, d.running);
    }
}
