//! Image encoders: a W+ backbone plus a residual network that predicts a
//! tri-grid correction from the input image and the first-pass render.
//!
//! Backbone: four 3×3 convolutions at `R, R/2, R/4, R/8`; every W+ row has its
//! own linear head over a 4×4 average-pooled feature level (coarse rows read
//! the deepest level, fine rows the shallowest) and is offset by `w_avg`.
//! Residual network: a U-Net over `[image, render, image − render]` down to
//! `R/8`, back up to `R/2` with skip connections, resampled to the plane
//! resolution and closed by a zero-initialised 3×3 convolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::camera::CameraPose;
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::generator::Generator;
use crate::params::{fan_in_normal, Bound, ParamId, ParamStore};
use crate::renderer::{finish, render, render_var, RenderOutput, RenderSettings, RenderVars};
use crate::tensor::Tensor;
use crate::trigrid::TriGrid;

const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Head {
    level: usize,
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: ModelConfig,
    params: ParamStore,
    backbone: [Conv; 4],
    heads: Vec<Head>,
    down: [Conv; 4],
    up: [Conv; 2],
    out: Conv,
}

/// Latent stack and tri-grid correction predicted for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub w_plus: Tensor,
    pub residual: TriGrid,
}

/// Tape handles of a batched encoder pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[N, L, w_dim]`
    pub w_plus: Var,
    /// `[N, 3·D·C, H, W]` tri-grids synthesised from `w_plus`.
    pub t_wplus: Var,
    /// Residual correction, absent when the residual stage is skipped.
    pub delta: Option<Var>,
    pub t_final: Var,
    /// `[N, 3, R, R]` same-view renders of `t_final`.
    pub images: Var,
    pub renders: Vec<RenderVars>,
}

/// Number of W+ rows driven by the coarse, middle and fine levels.
fn row_groups(l: usize) -> [usize; 3] {
    let coarse = l.div_ceil(3);
    let mid = (l - coarse).div_ceil(2);
    [coarse, mid, l - coarse - mid]
}

fn conv<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, zero: bool, rng: &mut R) -> Conv {
    let w = if zero { Tensor::zeros(&[cout, cin, 3, 3]) } else { fan_in_normal(&[cout, cin, 3, 3], core::f64::consts::SQRT_2, rng) };
    Conv { w: p.add(&format!("{name}.w"), w), b: p.add(&format!("{name}.b"), Tensor::zeros(&[cout])), stride }
}

fn apply(tape: &mut Tape, b: &Bound, c: &Conv, x: Var) -> Var {
    let y = tape.conv2d(x, b.var(c.w), c.stride, 1);
    tape.channel_bias(y, b.var(c.b))
}

fn apply_act(tape: &mut Tape, b: &Bound, c: &Conv, x: Var) -> Var {
    let y = apply(tape, b, c, x);
    tape.leaky_relu(y, SLOPE)
}

fn resample_to(tape: &mut Tape, mut x: Var, size: usize) -> Var {
    while tape.shape(x)[2] > size {
        x = tape.avg_pool2(x);
    }
    while tape.shape(x)[2] < size {
        x = tape.upsample2x(x);
    }
    x
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, w_avg: &[f64], rng: &mut R) -> Result<Self> {
        config.validate()?;
        if w_avg.len() != config.w_dim {
            return Err(shape_err!("w_avg has {} values, expected {}", w_avg.len(), config.w_dim));
        }
        let mut p = ParamStore::new();
        let e = config.encoder_channels;
        let backbone = [
            conv(&mut p, "enc.c0", 3, e[0], 1, false, rng),
            conv(&mut p, "enc.c1", e[0], e[1], 2, false, rng),
            conv(&mut p, "enc.c2", e[1], e[2], 2, false, rng),
            conv(&mut p, "enc.c3", e[2], e[3], 2, false, rng),
        ];
        let groups = row_groups(config.latent_layers);
        let mut heads = Vec::new();
        // level index into the backbone outputs: 3 = deepest
        for (g, &count) in groups.iter().enumerate() {
            let level = 3 - g;
            let size = (config.image_res >> level).min(4);
            let fin = e[level] * size * size;
            for _ in 0..count {
                let i = heads.len();
                // centred on w_avg, which is added explicitly in the forward pass
                let w = p.add(&format!("enc.head{i}.w"), fan_in_normal(&[config.w_dim, fin], 0.25, rng));
                let b = p.add(&format!("enc.head{i}.b"), Tensor::zeros(&[config.w_dim]));
                heads.push(Head { level, w, b });
            }
        }
        let r = config.residual_channels;
        let down = [
            conv(&mut p, "res.d0", 9, r[0], 1, false, rng),
            conv(&mut p, "res.d1", r[0], r[1], 2, false, rng),
            conv(&mut p, "res.d2", r[1], r[2], 2, false, rng),
            conv(&mut p, "res.d3", r[2], r[3], 2, false, rng),
        ];
        let up = [conv(&mut p, "res.u2", r[3] + r[2], r[2], 1, false, rng), conv(&mut p, "res.u1", r[2] + r[1], r[1], 1, false, rng)];
        let out = conv(&mut p, "res.out", r[1], config.trigrid_channels(), 1, true, rng);
        p.add("enc.w_avg", Tensor::from_vec(&[config.w_dim], w_avg.to_vec())?);
        Ok(Self { config: config.clone(), params: p, backbone, heads, down, up, out })
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

    fn w_avg(&self) -> &[f64] {
        let id = self.params.find("enc.w_avg").expect("w_avg entry");
        self.params.get(id).data()
    }

    /// Names of parameters that the optimiser must leave alone.
    pub fn is_frozen(name: &str) -> bool {
        name == "enc.w_avg"
    }

    fn check_images(&self, tape: &Tape, images: Var) -> Result<usize> {
        let s = tape.shape(images);
        let r = self.config.image_res;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(shape_err!("encoder expects [N, 3, {r}, {r}] images, got {:?}", s));
        }
        Ok(s[0])
    }

    /// `[N, 3, R, R]` images → W+ stacks `[N, L, w_dim]`.
    pub fn wplus_var(&self, tape: &mut Tape, b: &Bound, images: Var) -> Result<Var> {
        let n = self.check_images(tape, images)?;
        let x = tape.scale(images, 2.0);
        let mut x = tape.offset(x, -1.0);
        let mut levels = Vec::with_capacity(4);
        for c in &self.backbone {
            x = apply_act(tape, b, c, x);
            levels.push(x);
        }
        let wd = self.config.w_dim;
        let avg: Vec<f64> = (0..n).flat_map(|_| self.w_avg().iter().copied()).collect();
        let avg = tape.constant(Tensor::from_vec(&[n, wd], avg)?);
        let mut pooled: Vec<Option<Var>> = vec![None; 4];
        let mut rows = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let f = match pooled[h.level] {
                Some(f) => f,
                None => {
                    let lv = levels[h.level];
                    let size = tape.shape(lv)[2].min(4);
                    let p = resample_to(tape, lv, size);
                    let flat = tape.shape(p)[1..].iter().product();
                    let f = tape.reshape(p, &[n, flat]);
                    pooled[h.level] = Some(f);
                    f
                }
            };
            let y = tape.linear(f, b.var(h.w), Some(b.var(h.b)));
            let y = tape.add(y, avg);
            rows.push(tape.reshape(y, &[n, 1, wd]));
        }
        Ok(tape.concat(&rows, 1))
    }

    /// Residual tri-grid `[N, 3·D·C, H, W]` from images and first-pass renders.
    pub fn residual_var(&self, tape: &mut Tape, b: &Bound, images: Var, first_pass: Var) -> Result<Var> {
        self.check_images(tape, images)?;
        if tape.shape(first_pass) != tape.shape(images) {
            return Err(shape_err!("first-pass render {:?} does not match images {:?}", tape.shape(first_pass), tape.shape(images)));
        }
        let diff = tape.sub(images, first_pass);
        let x = tape.concat(&[images, first_pass, diff], 1);
        let x = tape.scale(x, 2.0);
        let d0 = apply_act(tape, b, &self.down[0], x);
        let d1 = apply_act(tape, b, &self.down[1], d0);
        let d2 = apply_act(tape, b, &self.down[2], d1);
        let d3 = apply_act(tape, b, &self.down[3], d2);
        let u = tape.upsample2x(d3);
        let u = tape.concat(&[u, d2], 1);
        let u2 = apply_act(tape, b, &self.up[0], u);
        let u = tape.upsample2x(u2);
        let u = tape.concat(&[u, d1], 1);
        let u1 = apply_act(tape, b, &self.up[1], u);
        let r = resample_to(tape, u1, self.config.grid_res);
        Ok(apply(tape, b, &self.out, r))
    }

    /// Full two-stage pass. The first-pass render that feeds the residual
    /// network is treated as a constant input.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        gen: &Generator,
        gb: &Bound,
        images: Var,
        poses: &[CameraPose],
        use_residual: bool,
    ) -> Result<ForwardVars> {
        let n = self.check_images(tape, images)?;
        if poses.len() != n {
            return Err(shape_err!("{} poses for {} images", poses.len(), n));
        }
        let cfg = &self.config;
        let settings = RenderSettings::from_config(cfg);
        let intr = cfg.intrinsics();
        let dims = gen.dims();
        let w_plus = self.wplus_var(tape, b, images)?;
        let t_wplus = gen.synthesize_var(tape, gb, w_plus);
        let (delta, t_final) = if use_residual {
            let dec = gen.decoder();
            let mut first = Vec::with_capacity(n * 3 * cfg.image_res * cfg.image_res);
            for (i, pose) in poses.iter().enumerate() {
                let grid = TriGrid::from_vec(dims, tape.value(t_wplus).batch_item(i).into_data())?;
                first.extend_from_slice(render(&grid, &dec, pose, &intr, &settings)?.image.data());
            }
            let first = tape.constant(Tensor::from_vec(&[n, 3, cfg.image_res, cfg.image_res], first)?);
            let delta = self.residual_var(tape, b, images, first)?;
            let t_final = tape.add(t_wplus, delta);
            (Some(delta), t_final)
        } else {
            (None, t_wplus)
        };
        let dec = gen.decoder_ids().vars(gb);
        let mut renders = Vec::with_capacity(n);
        let mut imgs = Vec::with_capacity(n);
        for (i, pose) in poses.iter().enumerate() {
            let g = if n == 1 { t_final } else { tape.slice(t_final, 0, i, 1) };
            let r = render_var(tape, g, dims, &dec, pose, &intr, &settings)?;
            imgs.push(r.image);
            renders.push(r);
        }
        let images_out = if n == 1 { imgs[0] } else { tape.concat(&imgs, 0) };
        Ok(ForwardVars { w_plus, t_wplus, delta, t_final, images: images_out, renders })
    }

    /// W+ stack `[L, w_dim]` for one `[3, R, R]` image.
    pub fn encode_wplus(&self, image: &Tensor) -> Result<Tensor> {
        let r = self.config.image_res;
        let img = image.clone().reshape(&[1, 3, r, r]).map_err(|_| shape_err!("image {:?} is not [3, {r}, {r}]", image.shape()))?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(img);
        let w = self.wplus_var(&mut tape, &b, x)?;
        tape.value(w).clone().reshape(&[self.config.latent_layers, self.config.w_dim])
    }

    /// Residual tri-grid for one image and its first-pass render.
    pub fn encode_residual(&self, image: &Tensor, first_pass: &RenderOutput) -> Result<TriGrid> {
        let r = self.config.image_res;
        let shape = [1, 3, r, r];
        let img = image.clone().reshape(&shape).map_err(|_| shape_err!("image {:?} is not [3, {r}, {r}]", image.shape()))?;
        let fp = first_pass.image.clone().reshape(&shape).map_err(|_| shape_err!("render does not match image size"))?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let (x, f) = (tape.constant(img), tape.constant(fp));
        let d = self.residual_var(&mut tape, &b, x, f)?;
        let c = &self.config;
        TriGrid::from_vec(crate::trigrid::TriDims::new(c.slices, c.channels, c.grid_res, c.grid_res), tape.value(d).data().to_vec())
    }

    /// Final tri-grid, encoder outputs and the same-view render.
    pub fn encoder_forward(&self, gen: &Generator, image: &Tensor, pose: &CameraPose) -> Result<(TriGrid, EncoderOutput, RenderOutput)> {
        let r = self.config.image_res;
        let img = image.clone().reshape(&[1, 3, r, r]).map_err(|_| shape_err!("image {:?} is not [3, {r}, {r}]", image.shape()))?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let gb = gen.params().bind(&mut tape, false);
        let x = tape.constant(img);
        let f = self.forward_var(&mut tape, &b, gen, &gb, x, core::slice::from_ref(pose), true)?;
        let dims = gen.dims();
        let t_final = TriGrid::from_vec(dims, tape.value(f.t_final).data().to_vec())?;
        let residual = TriGrid::from_vec(dims, tape.value(f.delta.expect("residual stage")).data().to_vec())?;
        let w_plus = tape.value(f.w_plus).clone().reshape(&[self.config.latent_layers, self.config.w_dim])?;
        let render = finish(&tape, f.renders.into_iter().next().expect("one render"));
        Ok((t_final, EncoderOutput { w_plus, residual }, render))
    }
}
