//! Style-based tri-grid generator.
//!
//! The mapping network turns `z` and a 25-number camera record into a latent
//! `w`. The synthesis network starts from a learned 4×4 constant and runs a
//! pyramid of modulated 3×3 convolutions up to the plane resolution; a final
//! modulated 1×1 convolution emits the `3·D·C` tri-grid channels. Each
//! convolution reads one row of the W+ stack (see [`layer_wiring`]).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::camera::{encode_pose_record, CameraIntrinsics, CameraPose};
use crate::config::ModelConfig;
use crate::error::{invalid, shape_err, Result};
use crate::params::{fan_in_normal, normal_tensor, Bound, ParamId, ParamStore};
use crate::renderer::{Decoder, DecoderIds};
use crate::tensor::Tensor;
use crate::trigrid::{TriDims, TriGrid};

const LRELU_SLOPE: f64 = 0.2;
const ACT_GAIN: f64 = core::f64::consts::SQRT_2;
const DEMOD_EPS: f64 = 1e-8;
const W_AVG_BETA: f64 = 0.995;

#[derive(Clone, Copy, Debug)]
struct ModConvIds {
    affine_w: ParamId,
    affine_b: ParamId,
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    latent: usize,
    upsample: bool,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: ModelConfig,
    params: ParamStore,
    /// Running mean of mapped latents; frozen once pre-training ends.
    pub w_avg: Vec<f64>,
    embed: (ParamId, ParamId),
    mapping: Vec<(ParamId, ParamId)>,
    constant: ParamId,
    convs: Vec<ModConvIds>,
    output: ModConvIds,
    decoder: DecoderIds,
}

/// Which W+ row drives each synthesis convolution, as `(layer name, row)`.
/// Rows not listed are unused by the synthesis network.
pub fn layer_wiring(config: &ModelConfig) -> Vec<(String, usize)> {
    let n_conv = conv_count(config.grid_res);
    let last = config.latent_layers - 1;
    let mut out = Vec::with_capacity(n_conv + 1);
    let mut j = 0;
    let mut res = 4;
    while res <= config.grid_res {
        let count = if res == 4 { 1 } else { 2 };
        for k in 0..count {
            out.push((format!("conv{res}x{res}.{k}"), j * last / n_conv));
            j += 1;
        }
        res *= 2;
    }
    out.push((String::from("to_trigrid"), last));
    out
}

fn conv_count(grid_res: usize) -> usize {
    1 + 2 * (grid_res.trailing_zeros() as usize - 2)
}

/// W+ rows that no synthesis layer reads.
pub fn unused_latent_rows(config: &ModelConfig) -> Vec<usize> {
    let used: Vec<usize> = layer_wiring(config).into_iter().map(|(_, r)| r).collect();
    (0..config.latent_layers).filter(|r| !used.contains(r)).collect()
}

/// Standard-normal draws for one W+ stack, `latent_layers × z_dim` values.
pub fn sample_z_plus<R: Rng + ?Sized>(layers: usize, z_dim: usize, rng: &mut R) -> Vec<f64> {
    (0..layers * z_dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn pixel_norm(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let (n, d) = (s[0], s[1]);
    let x3 = tape.reshape(x, &[n, 1, d]);
    let sq = tape.square(x3);
    let ss = tape.sum_groups(sq, d, &[n, 1]);
    let ms = tape.scale(ss, 1.0 / d as f64);
    let ms = tape.offset(ms, 1e-8);
    let r = tape.rsqrt(ms);
    let y = tape.channel_scale(x3, r);
    tape.reshape(y, &[n, d])
}

fn act(tape: &mut Tape, x: Var) -> Var {
    let y = tape.leaky_relu(x, LRELU_SLOPE);
    tape.scale(y, ACT_GAIN)
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut p = ParamStore::new();
        let embed = (
            p.add("map.embed.w", fan_in_normal(&[c.w_dim, 25], 1.0, rng)),
            p.add("map.embed.b", Tensor::zeros(&[c.w_dim])),
        );
        let mut mapping = Vec::new();
        let mut fin = c.z_dim + c.w_dim;
        for i in 0..c.mapping_layers {
            mapping.push((
                p.add(&format!("map.fc{i}.w"), fan_in_normal(&[c.w_dim, fin], 1.0, rng)),
                p.add(&format!("map.fc{i}.b"), Tensor::zeros(&[c.w_dim])),
            ));
            fin = c.w_dim;
        }
        let ch = c.synth_channels;
        let constant = p.add("syn.const", normal_tensor(&[1, ch, 4, 4], 1.0, rng));
        let wiring = layer_wiring(c);
        let mut convs = Vec::new();
        for (j, (name, latent)) in wiring[..wiring.len() - 1].iter().enumerate() {
            let upsample = j > 0 && j % 2 == 1;
            convs.push(ModConvIds {
                affine_w: p.add(&format!("syn.{name}.affine.w"), fan_in_normal(&[ch, c.w_dim], 1.0, rng)),
                affine_b: p.add(&format!("syn.{name}.affine.b"), Tensor::full(&[ch], 1.0)),
                weight: p.add(&format!("syn.{name}.weight"), normal_tensor(&[ch, ch, 3, 3], 1.0, rng)),
                bias: p.add(&format!("syn.{name}.bias"), Tensor::zeros(&[ch])),
                kernel: 3,
                latent: *latent,
                upsample,
            });
        }
        let out_ch = c.trigrid_channels();
        let output = ModConvIds {
            affine_w: p.add("syn.to_trigrid.affine.w", fan_in_normal(&[ch, c.w_dim], 1.0, rng)),
            affine_b: p.add("syn.to_trigrid.affine.b", Tensor::full(&[ch], 1.0)),
            weight: p.add("syn.to_trigrid.weight", fan_in_normal(&[out_ch, ch, 1, 1], 1.0, rng)),
            bias: p.add("syn.to_trigrid.bias", Tensor::zeros(&[out_ch])),
            kernel: 1,
            latent: c.latent_layers - 1,
            upsample: false,
        };
        let decoder = DecoderIds::register(&mut p, c.channels, c.decoder_hidden, rng);
        let mut g = Self {
            config: c.clone(),
            params: p,
            w_avg: vec![0.0; c.w_dim],
            embed,
            mapping,
            constant,
            convs,
            output,
            decoder,
        };
        g.w_avg = g.estimate_w_avg(256, rng)?;
        Ok(g)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dims(&self) -> TriDims {
        let c = &self.config;
        TriDims::new(c.slices, c.channels, c.grid_res, c.grid_res)
    }

    pub fn decoder_ids(&self) -> &DecoderIds {
        &self.decoder
    }

    /// Copy of the renderer decoder weights.
    pub fn decoder(&self) -> Decoder {
        self.decoder.extract(&self.params)
    }

    /// Mapping network on a batch: `z[N, z_dim]`, `cond[N, 25]` → `w[N, w_dim]`.
    pub fn map_var(&self, tape: &mut Tape, b: &Bound, z: Var, cond: Var) -> Var {
        let zn = pixel_norm(tape, z);
        let e = tape.linear(cond, b.var(self.embed.0), Some(b.var(self.embed.1)));
        let en = pixel_norm(tape, e);
        let mut x = tape.concat(&[zn, en], 1);
        for &(w, bias) in &self.mapping {
            let y = tape.linear(x, b.var(w), Some(b.var(bias)));
            x = act(tape, y);
        }
        x
    }

    /// `w = w_avg + ψ·(M(z, cond) − w_avg)` for one latent.
    pub fn map_latent(&self, z: &[f64], cond: &[f64; 25], psi: f64) -> Result<Vec<f64>> {
        let rows = self.map_batch(z, cond, psi)?;
        Ok(rows.into_data())
    }

    /// Maps `z.len() / z_dim` latents that share one camera record.
    pub fn map_batch(&self, z: &[f64], cond: &[f64; 25], psi: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(invalid!("truncation {psi} outside [0, 1]"));
        }
        let zd = self.config.z_dim;
        if z.is_empty() || z.len() % zd != 0 {
            return Err(shape_err!("latent length {} is not a multiple of {}", z.len(), zd));
        }
        if z.iter().chain(cond.iter()).any(|v| !v.is_finite()) {
            return Err(crate::error::Error::NonFinite(String::from("mapping input")));
        }
        let n = z.len() / zd;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let zv = tape.constant(Tensor::from_vec(&[n, zd], z.to_vec())?);
        let conds: Vec<f64> = (0..n).flat_map(|_| cond.iter().copied()).collect();
        let cv = tape.constant(Tensor::from_vec(&[n, 25], conds)?);
        let m = self.map_var(&mut tape, &b, zv, cv);
        let mut out = tape.value(m).clone();
        let w = self.config.w_dim;
        for row in out.data_mut().chunks_mut(w) {
            for (v, a) in row.iter_mut().zip(&self.w_avg) {
                *v = (1.0 - psi) * a + psi * *v;
            }
        }
        Ok(out)
    }

    /// Front-conditioned, truncated W+ stack from fresh `z⁺` draws, `[L, w_dim]`.
    pub fn sample_w_plus<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Tensor> {
        let c = &self.config;
        let z = sample_z_plus(c.latent_layers, c.z_dim, rng);
        self.map_batch(&z, &front_record(c), c.truncation)
    }

    fn estimate_w_avg<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        let z = sample_z_plus(n, self.config.z_dim, rng);
        let w = self.map_batch(&z, &front_record(&self.config), 1.0)?;
        let d = self.config.w_dim;
        let mut avg = vec![0.0; d];
        for row in w.data().chunks(d) {
            for (a, v) in avg.iter_mut().zip(row) {
                *a += v / n as f64;
            }
        }
        Ok(avg)
    }

    /// Exponential moving average update of `w_avg` from a batch of mapped latents.
    pub fn update_w_avg(&mut self, w: &Tensor) {
        let d = self.config.w_dim;
        let n = w.len() / d;
        let mut mean = vec![0.0; d];
        for row in w.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for (a, m) in self.w_avg.iter_mut().zip(mean) {
            *a = m + W_AVG_BETA * (*a - m);
        }
    }

    fn mod_conv(&self, tape: &mut Tape, b: &Bound, x: Var, wplus: Var, ids: &ModConvIds, demod: bool) -> Var {
        let n = tape.shape(x)[0];
        let wd = self.config.w_dim;
        let row = tape.slice(wplus, 1, ids.latent, 1);
        let lat = tape.reshape(row, &[n, wd]);
        let s = tape.linear(lat, b.var(ids.affine_w), Some(b.var(ids.affine_b)));
        let xm = tape.channel_scale(x, s);
        let weight = b.var(ids.weight);
        let mut y = tape.conv2d(xm, weight, 1, ids.kernel / 2);
        if demod {
            let ws = tape.shape(weight).to_vec();
            let (co, ci) = (ws[0], ws[1]);
            let w2 = tape.square(weight);
            let wsq = tape.sum_groups(w2, ids.kernel * ids.kernel, &[co, ci]);
            let s2 = tape.square(s);
            let d = tape.linear(s2, wsq, None);
            let d = tape.offset(d, DEMOD_EPS);
            let d = tape.rsqrt(d);
            y = tape.channel_scale(y, d);
        }
        tape.channel_bias(y, b.var(ids.bias))
    }

    /// Synthesis network: `wplus[N, L, w_dim]` → tri-grids `[N, 3·D·C, H, W]`.
    pub fn synthesize_var(&self, tape: &mut Tape, b: &Bound, wplus: Var) -> Var {
        let n = tape.shape(wplus)[0];
        let c = b.var(self.constant);
        let mut x = if n == 1 { c } else { tape.concat(&vec![c; n], 0) };
        for ids in &self.convs {
            if ids.upsample {
                x = tape.upsample2x(x);
            }
            let y = self.mod_conv(tape, b, x, wplus, ids, true);
            x = act(tape, y);
        }
        self.mod_conv(tape, b, x, wplus, &self.output, false)
    }

    fn check_wplus(&self, w: &Tensor) -> Result<usize> {
        let (l, d) = (self.config.latent_layers, self.config.w_dim);
        let s = w.shape();
        let n = match s.len() {
            2 if s == [l, d] => 1,
            3 if s[1..] == [l, d] => s[0],
            _ => return Err(shape_err!("W+ stack {:?} does not match [{l}, {d}]", s)),
        };
        if !w.is_finite() {
            return Err(crate::error::Error::NonFinite(String::from("W+ stack")));
        }
        Ok(n)
    }

    /// Deterministic tri-grid for one `[L, w_dim]` (or `[1, L, w_dim]`) stack.
    pub fn synthesize(&self, wplus: &Tensor) -> Result<TriGrid> {
        let n = self.check_wplus(wplus)?;
        if n != 1 {
            return Err(shape_err!("synthesize takes one stack, got {n}"));
        }
        let (l, d) = (self.config.latent_layers, self.config.w_dim);
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let wv = tape.constant(wplus.clone().reshape(&[1, l, d])?);
        let out = self.synthesize_var(&mut tape, &b, wv);
        TriGrid::from_vec(self.dims(), tape.value(out).data().to_vec())
    }
}

/// Camera record of the canonical front pose.
pub fn front_record(config: &ModelConfig) -> [f64; 25] {
    let pose = crate::camera::pose_from_orbit(0.0, 0.0, config.radius).expect("front pose");
    encode_pose_record(&pose, &config.intrinsics())
}

pub fn pose_record(pose: &CameraPose, intr: &CameraIntrinsics) -> [f64; 25] {
    encode_pose_record(pose, intr)
}
