//! Volumetric rendering of tri-grids.
//!
//! Every ray carries `n_samples` points at the midpoints of equal-length
//! intervals spanning `[near, far]`. Points inside the scene cube read tri-grid
//! features which a two-layer decoder turns into density and colour; points
//! outside have zero density. Samples are alpha-composited over a white
//! background. Depth is the expected ray distance of the termination point.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::camera::{generate_rays, CameraIntrinsics, CameraPose};
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::math;
use crate::params::{fan_in_normal, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::trigrid::{TriDims, TriGrid};

pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
/// Pixels below this opacity report `far` as their depth.
pub const DEPTH_OPACITY_FLOOR: f64 = 0.01;
const HIDDEN_SLOPE: f64 = 0.2;

/// Sampling parameters of a render.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub resolution: usize,
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl RenderSettings {
    pub fn from_config(c: &ModelConfig) -> Self {
        Self { resolution: c.image_res, n_samples: c.n_samples, near: c.near, far: c.far, background: BACKGROUND }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far) {
            return Err(invalid!("degenerate depth range near={} far={}", self.near, self.far));
        }
        if self.n_samples < 2 {
            return Err(invalid!("need at least 2 samples per ray"));
        }
        if self.resolution == 0 {
            return Err(invalid!("resolution must be at least 1"));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.far - self.near) / self.n_samples as f64
    }

    /// Ray distance of sample `i`.
    pub fn sample_t(&self, i: usize) -> f64 {
        self.near + (i as f64 + 0.5) * self.spacing()
    }
}

/// Image `[3, R, R]` in `[0, 1]`, depth and opacity `R × R`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Tensor,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub resolution: usize,
}

/// Render recorded on a tape; `image` is `[1, 3, R, R]`.
#[derive(Clone, Debug)]
pub struct RenderVars {
    pub image: Var,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub resolution: usize,
}

/// Decoder weights: `features → hidden → (density, r, g, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderIds {
    w0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
}

impl DecoderIds {
    pub fn register<R: Rng + ?Sized>(p: &mut ParamStore, features: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w0: p.add("dec.fc0.w", fan_in_normal(&[hidden, features], 1.0, rng)),
            b0: p.add("dec.fc0.b", Tensor::zeros(&[hidden])),
            w1: p.add("dec.fc1.w", fan_in_normal(&[4, hidden], 1.0, rng)),
            b1: p.add("dec.fc1.b", Tensor::zeros(&[4])),
        }
    }

    pub fn vars(&self, b: &Bound) -> DecoderVars {
        DecoderVars { w0: b.var(self.w0), b0: b.var(self.b0), w1: b.var(self.w1), b1: b.var(self.b1) }
    }

    pub fn extract(&self, p: &ParamStore) -> Decoder {
        Decoder {
            w0: p.get(self.w0).clone(),
            b0: p.get(self.b0).clone(),
            w1: p.get(self.w1).clone(),
            b1: p.get(self.b1).clone(),
        }
    }
}

impl Decoder {
    pub fn bind(&self, tape: &mut Tape) -> DecoderVars {
        DecoderVars {
            w0: tape.constant(self.w0.clone()),
            b0: tape.constant(self.b0.clone()),
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
        }
    }

    /// Density (`[N]`) and colour (`[N, 3]`) for `features[N, F]`.
    pub fn decode(&self, features: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let d = self.bind(&mut tape);
        let f = tape.constant(features.clone());
        let (s, c) = decode_var(&mut tape, &d, f);
        (tape.value(s).data().to_vec(), tape.value(c).data().to_vec())
    }
}

/// Decoder on the tape: returns `(σ [N, 1], colour [N, 3])`.
pub fn decode_var(tape: &mut Tape, d: &DecoderVars, features: Var) -> (Var, Var) {
    let h = tape.linear(features, d.w0, Some(d.b0));
    let h = tape.leaky_relu(h, HIDDEN_SLOPE);
    let raw = tape.linear(h, d.w1, Some(d.b1));
    let s = tape.slice(raw, 1, 0, 1);
    let c = tape.slice(raw, 1, 1, 3);
    (tape.softplus(s), tape.sigmoid(c))
}

/// Compositing weights `w_i = T_i (1 − exp(−σ_i δ))` and final transmittance.
pub fn ray_weights(sigma: &[f64], delta: f64) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(sigma.len());
    for &s in sigma {
        let next = t * math::exp(-s * delta);
        w.push(t - next);
        t = next;
    }
    (w, t)
}

fn depth_and_opacity(sigma: &[f64], settings: &RenderSettings, rays: usize) -> (Vec<f64>, Vec<f64>) {
    let s = settings.n_samples;
    let delta = settings.spacing();
    let mut depth = vec![0.0; rays];
    let mut opacity = vec![0.0; rays];
    for r in 0..rays {
        let (w, _) = ray_weights(&sigma[r * s..(r + 1) * s], delta);
        let acc: f64 = w.iter().sum();
        let num: f64 = w.iter().enumerate().map(|(i, wi)| wi * settings.sample_t(i)).sum();
        opacity[r] = acc;
        depth[r] = if acc < DEPTH_OPACITY_FLOOR { settings.far } else { num / acc.max(1e-10) };
    }
    (depth, opacity)
}

fn in_cube(p: &Vector3<f64>) -> bool {
    p.x.abs() <= 1.0 && p.y.abs() <= 1.0 && p.z.abs() <= 1.0
}

/// Renders one tri-grid held by `grid` (any shape with `3·D·C·H·W` values).
pub fn render_var(
    tape: &mut Tape,
    grid: Var,
    dims: TriDims,
    dec: &DecoderVars,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<RenderVars> {
    settings.validate()?;
    let res = settings.resolution;
    let rays = generate_rays(pose, intr, res)?;
    let s = settings.n_samples;
    let total = rays.len() * s;
    let mut points = Vec::new();
    let mut index = Vec::new();
    for (r, ray) in rays.iter().enumerate() {
        for i in 0..s {
            let p = ray.origin + ray.direction * settings.sample_t(i);
            if in_cube(&p) {
                points.push([p.x, p.y, p.z]);
                index.push(r * s + i);
            }
        }
    }
    let (sigma, color) = if points.is_empty() {
        (tape.constant(Tensor::zeros(&[total, 1])), tape.constant(Tensor::zeros(&[total, 3])))
    } else {
        let feats = tape.trigrid_sample(grid, dims, points);
        let (sg, cl) = decode_var(tape, dec, feats);
        let packed = tape.concat(&[sg, cl], 1);
        let full = tape.scatter_rows(packed, index, total);
        (tape.slice(full, 1, 0, 1), tape.slice(full, 1, 1, 3))
    };
    let img = tape.composite(sigma, color, rays.len(), s, settings.spacing(), settings.background);
    let image = tape.reshape(img, &[1, 3, res, res]);
    let (depth, opacity) = depth_and_opacity(tape.value(sigma).data(), settings, rays.len());
    Ok(RenderVars { image, depth, opacity, resolution: res })
}

/// Tape-free render of a tri-grid.
pub fn render(
    grid: &TriGrid,
    dec: &Decoder,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    let mut tape = Tape::new();
    let g = tape.constant(grid.to_tensor());
    let d = dec.bind(&mut tape);
    let out = render_var(&mut tape, g, grid.dims(), &d, pose, intr, settings)?;
    Ok(finish(&tape, out))
}

pub(crate) fn finish(tape: &Tape, out: RenderVars) -> RenderOutput {
    let res = out.resolution;
    let image = tape.value(out.image).clone().reshape(&[3, res, res]).expect("image shape");
    RenderOutput { image, depth: out.depth, opacity: out.opacity, resolution: res }
}

/// Renders an analytic field `p ↦ (σ, rgb)` with the same sampling and
/// compositing as [`render`]. The field is queried only inside the cube.
pub fn render_field<F>(field: F, pose: &CameraPose, intr: &CameraIntrinsics, settings: &RenderSettings) -> Result<RenderOutput>
where
    F: Fn(&Vector3<f64>) -> (f64, [f64; 3]),
{
    settings.validate()?;
    let res = settings.resolution;
    let rays = generate_rays(pose, intr, res)?;
    let s = settings.n_samples;
    let delta = settings.spacing();
    let mut sigma = vec![0.0; rays.len() * s];
    let mut image = vec![0.0; 3 * rays.len()];
    let mut colors = vec![[0.0; 3]; s];
    for (r, ray) in rays.iter().enumerate() {
        for i in 0..s {
            let p = ray.origin + ray.direction * settings.sample_t(i);
            let (sg, c) = if in_cube(&p) { field(&p) } else { (0.0, [0.0; 3]) };
            sigma[r * s + i] = sg;
            colors[i] = c;
        }
        let (w, t_final) = ray_weights(&sigma[r * s..(r + 1) * s], delta);
        for ch in 0..3 {
            let acc: f64 = w.iter().zip(&colors).map(|(wi, c)| wi * c[ch]).sum();
            image[ch * rays.len() + r] = acc + t_final * settings.background[ch];
        }
    }
    let (depth, opacity) = depth_and_opacity(&sigma, settings, rays.len());
    Ok(RenderOutput { image: Tensor::from_vec(&[3, res, res], image)?, depth, opacity, resolution: res })
}

/// Density grid of a tri-grid at `n³` voxel centres, index `(ix·n + iy)·n + iz`.
pub fn density_grid(grid: &TriGrid, dec: &Decoder, n: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(n * n * n);
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                let c = |i: usize| -1.0 + (2 * i + 1) as f64 / n as f64;
                pts.push([c(ix), c(iy), c(iz)]);
            }
        }
    }
    let mut out = Vec::with_capacity(pts.len());
    for chunk in pts.chunks(4096) {
        let f = Tensor::from_vec(&[chunk.len(), grid.dims().channels], grid.sample(chunk)).expect("features");
        out.extend(dec.decode(&f).0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{mirror_pose, pose_from_orbit};
    use crate::gradcheck::{check_scalar_fn, spread_coords};
    use crate::params::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings(res: usize, n: usize) -> RenderSettings {
        RenderSettings { resolution: res, n_samples: n, near: 1.2, far: 4.2, background: BACKGROUND }
    }

    fn small_decoder(seed: u64, features: usize) -> Decoder {
        let mut p = ParamStore::new();
        let ids = DecoderIds::register(&mut p, features, 6, &mut ChaCha8Rng::seed_from_u64(seed));
        ids.extract(&p)
    }

    #[test]
    fn zero_decoder_gives_constant_density() {
        let d = Decoder {
            w0: Tensor::zeros(&[4, 3]),
            b0: Tensor::zeros(&[4]),
            w1: Tensor::zeros(&[4, 4]),
            b1: Tensor::zeros(&[4]),
        };
        let f = normal_tensor(&[5, 3], 2.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (s, c) = d.decode(&f);
        assert!(s.iter().all(|v| (v - core::f64::consts::LN_2).abs() < 1e-15));
        assert!(c.iter().all(|v| *v == 0.5));
        assert_eq!(d.decode(&f), (s, c));
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let d = small_decoder(2, 3);
        let f = normal_tensor(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let check = check_scalar_fn(
            |tape, x| {
                let dv = d.bind(tape);
                let (s, c) = decode_var(tape, &dv, x);
                let a = tape.sum(s);
                let c2 = tape.square(c);
                let b = tape.sum(c2);
                tape.add(a, b)
            },
            &f,
            &spread_coords(12, 12),
            1e-6,
        );
        assert!(check.max_rel_err < 1e-3, "{check:?}");
    }

    #[test]
    fn empty_scene_renders_background() {
        let pose = pose_from_orbit(0.3, 0.1, 2.7).unwrap();
        let out = render_field(|_| (0.0, [0.2; 3]), &pose, &CameraIntrinsics::default(), &settings(8, 16)).unwrap();
        assert!(out.opacity.iter().all(|&o| o == 0.0));
        assert!(out.image.data().iter().all(|&v| v == 1.0));
        assert!(out.depth.iter().all(|&d| d == 4.2));
    }

    #[test]
    fn weights_and_transmittance_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let sigma: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..20.0)).collect();
            let (w, t) = ray_weights(&sigma, 0.05);
            assert!((w.iter().sum::<f64>() + t - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn aligned_slab_matches_closed_form() {
        // slab faces sit on sample-interval boundaries along the centre ray
        let s = settings(9, 64);
        let delta = s.spacing();
        let (front, back) = (2.7 - (s.near + 26.0 * delta), 2.7 - (s.near + 38.0 * delta));
        let h = front - back;
        let sigma = 2.0;
        let out = render_field(
            |p| if p.z <= front && p.z >= back { (sigma, [0.0; 3]) } else { (0.0, [0.0; 3]) },
            &pose_from_orbit(0.0, 0.0, 2.7).unwrap(),
            &CameraIntrinsics::default(),
            &s,
        )
        .unwrap();
        let centre = 4 * 9 + 4;
        let expect = 1.0 - math::exp(-sigma * h);
        assert!((out.opacity[centre] - expect).abs() / expect < 0.02);
    }

    #[test]
    fn opaque_slab_depth_is_front_face() {
        let s = settings(9, 64);
        let out = render_field(
            |p| if p.z.abs() <= 0.3 { (80.0, [0.1; 3]) } else { (0.0, [0.0; 3]) },
            &pose_from_orbit(0.0, 0.0, 2.7).unwrap(),
            &CameraIntrinsics::default(),
            &s,
        )
        .unwrap();
        let centre = 4 * 9 + 4;
        assert!((out.depth[centre] - 2.4).abs() < 1.5 * s.spacing());
    }

    #[test]
    fn more_density_never_lowers_opacity() {
        let pose = pose_from_orbit(0.5, 0.2, 2.7).unwrap();
        let blob = |k: f64| move |p: &Vector3<f64>| (k * math::exp(-4.0 * p.norm_squared()), [0.5; 3]);
        let a = render_field(blob(1.0), &pose, &CameraIntrinsics::default(), &settings(8, 24)).unwrap();
        let b = render_field(blob(1.5), &pose, &CameraIntrinsics::default(), &settings(8, 24)).unwrap();
        assert!(a.opacity.iter().zip(&b.opacity).all(|(x, y)| y >= x));
    }

    #[test]
    fn tape_render_agrees_with_field_render() {
        let dims = TriDims::new(2, 3, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = TriGrid::from_vec(dims, normal_tensor(&[dims.len()], 1.0, &mut rng).into_data()).unwrap();
        let dec = small_decoder(6, 3);
        let pose = pose_from_orbit(-0.4, 0.2, 2.7).unwrap();
        let intr = CameraIntrinsics::default();
        let a = render(&grid, &dec, &pose, &intr, &settings(6, 12)).unwrap();
        let b = render_field(
            |p| {
                let f = Tensor::from_vec(&[1, 3], grid.sample(&[[p.x, p.y, p.z]])).unwrap();
                let (s, c) = dec.decode(&f);
                (s[0], [c[0], c[1], c[2]])
            },
            &pose,
            &intr,
            &settings(6, 12),
        )
        .unwrap();
        assert!(a.image.max_abs_diff(&b.image) < 1e-12);
        assert_eq!(a.opacity.len(), 36);
        for (x, y) in a.opacity.iter().zip(&b.opacity) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        let dims = TriDims::new(2, 2, 4, 4);
        let grid = normal_tensor(&[1, 12, 4, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(7));
        let dec = small_decoder(8, 2);
        let pose = pose_from_orbit(0.7, -0.2, 2.7).unwrap();
        let check = check_scalar_fn(
            |tape, g| {
                let d = dec.bind(tape);
                let out = render_var(tape, g, dims, &d, &pose, &CameraIntrinsics::default(), &settings(6, 10)).unwrap();
                tape.mean(out.image)
            },
            &grid,
            &spread_coords(grid.len(), 16),
            1e-5,
        );
        assert!(check.max_rel_err < 1e-3, "{check:?}");
    }

    #[test]
    fn mirrored_camera_mirrors_symmetric_scene() {
        let field = |p: &Vector3<f64>| {
            let r = (p - Vector3::new(0.0, 0.1, 0.0)).norm();
            let sg = if r < 0.6 { 6.0 } else { 0.0 };
            (sg, [0.5 + 0.4 * p.x.abs(), 0.5 + 0.3 * p.y, 0.4])
        };
        let s = settings(10, 32);
        let pose = pose_from_orbit(0.6, 0.15, 2.7).unwrap();
        let a = render_field(field, &pose, &CameraIntrinsics::default(), &s).unwrap();
        let b = render_field(field, &mirror_pose(&pose), &CameraIntrinsics::default(), &s).unwrap();
        for ch in 0..3 {
            for row in 0..10 {
                for col in 0..10 {
                    let x = a.image.data()[(ch * 10 + row) * 10 + col];
                    let y = b.image.data()[(ch * 10 + row) * 10 + 9 - col];
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn degenerate_range_rejected() {
        let mut s = settings(4, 8);
        s.far = s.near;
        let pose = pose_from_orbit(0.0, 0.0, 2.7).unwrap();
        assert!(render_field(|_| (0.0, [0.0; 3]), &pose, &CameraIntrinsics::default(), &s).is_err());
    }
}
