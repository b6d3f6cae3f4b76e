//! Fidelity and realism metrics.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{pose_from_orbit, CameraPose};
use crate::data::ToySample;
use crate::trigrid::TriGrid;
use crate::error::{invalid, shape_err, Error, Result};
use crate::generator::Generator;
use crate::inference::{orbit_poses, render_grid, Inverter};
use crate::losses::LossNets;
use crate::math;
use crate::tensor::Tensor;

/// Diagonal regulariser added to both covariances.
pub const COVARIANCE_EPS: f64 = 1e-6;

/// Mean metric values over `count` samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub l2: f64,
    pub perceptual: f64,
    pub identity: f64,
    pub frechet: Option<f64>,
}

fn stats(features: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = features.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(shape_err!("feature matrix must be [N ≥ 2, d], got {:?}", s));
    }
    let (n, d) = (s[0], s[1]);
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mu = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        for j in 0..d {
            row[j] -= mu[j];
        }
    }
    let mut cov = centred.transpose() * &centred / (n - 1) as f64;
    for j in 0..d {
        cov[(j, j)] += COVARIANCE_EPS;
    }
    Ok((mu, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| math::sqrt(v.max(0.0)));
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussian fits of two `[N, d]` feature sets:
/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ma, ca) = stats(a)?;
    let (mb, cb) = stats(b)?;
    if ma.len() != mb.len() {
        return Err(shape_err!("feature widths {} and {} differ", ma.len(), mb.len()));
    }
    let sa = sqrt_psd(&ca);
    let inner = &sa * &cb * &sa;
    let e = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| math::sqrt(v.max(0.0))).sum();
    let d2 = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if !d2.is_finite() {
        return Err(Error::NonFinite(String::from("Fréchet distance")));
    }
    Ok(d2.max(0.0))
}

/// Same-view L2, perceptual and identity scores of `inv` on `(image, pose)` pairs.
pub fn eval_same_view<I: Inverter + ?Sized>(inv: &I, gen: &Generator, nets: &LossNets, records: &[(Tensor, CameraPose)]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Empty(String::from("evaluation records")));
    }
    let mut renders = Vec::with_capacity(records.len());
    for (image, pose) in records {
        renders.push(render_grid(gen, &inv.invert_grid(image, pose)?, pose)?.image);
    }
    let targets: Vec<Tensor> = records.iter().map(|r| r.0.clone()).collect();
    compare_images(nets, &renders, &targets)
}

/// Mean L2, perceptual and identity scores between paired image lists.
pub fn compare_images(nets: &LossNets, renders: &[Tensor], targets: &[Tensor]) -> Result<MetricsReport> {
    if renders.is_empty() || renders.len() != targets.len() {
        return Err(invalid!("{} renders for {} targets", renders.len(), targets.len()));
    }
    let n = renders.len() as f64;
    let mut r = MetricsReport { count: renders.len(), ..Default::default() };
    for (a, b) in renders.iter().zip(targets) {
        if a.shape() != b.shape() {
            return Err(shape_err!("render {:?} vs target {:?}", a.shape(), b.shape()));
        }
        r.l2 += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        r.perceptual += nets.perceptual.distance(a, b)?;
        r.identity += nets.embedder.identity_similarity(a, b)?;
    }
    r.l2 /= n;
    r.perceptual /= n;
    r.identity /= n;
    Ok(r)
}

/// Embeddings `[N·n_views, d]` of renders of fresh truncated samples at the orbit yaws.
pub fn reference_embeddings(gen: &Generator, nets: &LossNets, n_ref: usize, n_views: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses = orbit_poses(gen.config().radius, n_views)?;
    let mut images = Vec::with_capacity(n_ref * n_views);
    for _ in 0..n_ref {
        let grid = gen.synthesize(&gen.sample_w_plus(&mut rng)?)?;
        for p in &poses {
            images.push(render_grid(gen, &grid, p)?.image);
        }
    }
    embed_all(nets, &images)
}

/// Embeddings of the orbit renders of every inverted record.
pub fn inversion_embeddings<I: Inverter + ?Sized>(inv: &I, gen: &Generator, nets: &LossNets, records: &[(Tensor, CameraPose)], n_views: usize) -> Result<Tensor> {
    let poses = orbit_poses(gen.config().radius, n_views)?;
    let mut images = Vec::with_capacity(records.len() * n_views);
    for (image, pose) in records {
        let grid = inv.invert_grid(image, pose)?;
        for p in &poses {
            images.push(render_grid(gen, &grid, p)?.image);
        }
    }
    embed_all(nets, &images)
}

fn embed_all(nets: &LossNets, images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Empty(String::from("images to embed")));
    }
    let mut rows = Vec::new();
    for chunk in images.chunks(32) {
        rows.extend_from_slice(nets.embedder.embed(&Tensor::stack(chunk)?)?.data());
    }
    let d = rows.len() / images.len();
    Tensor::from_vec(&[images.len(), d], rows)
}

/// 360° Fréchet distance between inverted records and fresh generator samples,
/// both rendered at `n_views` uniform yaws with zero pitch.
pub fn eval_360_fid<I: Inverter + ?Sized>(
    inv: &I,
    gen: &Generator,
    nets: &LossNets,
    records: &[(Tensor, CameraPose)],
    n_ref: usize,
    n_views: usize,
    seed: u64,
) -> Result<f64> {
    let reference = reference_embeddings(gen, nets, n_ref, n_views, seed)?;
    frechet_distance(&inversion_embeddings(inv, gen, nets, records, n_views)?, &reference)
}

/// Front image with ground-truth renders from other cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedRecord {
    pub front_image: Tensor,
    pub front_pose: CameraPose,
    pub targets: Vec<(Tensor, CameraPose)>,
}

/// Horizontal angle of a camera around the vertical axis, in degrees.
pub fn yaw_degrees(pose: &CameraPose) -> f64 {
    let p = pose.position();
    libm::atan2(p.x, p.z).to_degrees()
}

/// Nearest multiple of 30° of `|yaw|`, labelled like `±30°`.
pub fn yaw_bucket(pose: &CameraPose) -> String {
    let b = (libm::round(yaw_degrees(pose).abs() / 30.0) * 30.0) as i64;
    alloc::format!("±{b}°")
}

/// Inverts each front image, renders it at the target cameras and scores the
/// renders against the targets, grouped by yaw bucket in ascending order.
pub fn eval_multiview<I: Inverter + ?Sized>(inv: &I, gen: &Generator, nets: &LossNets, pairs: &[PairedRecord]) -> Result<Vec<(String, MetricsReport)>> {
    if pairs.is_empty() {
        return Err(Error::Empty(String::from("paired records")));
    }
    let mut buckets: alloc::collections::BTreeMap<i64, (String, Vec<Tensor>, Vec<Tensor>)> = alloc::collections::BTreeMap::new();
    for pair in pairs {
        if pair.targets.is_empty() {
            return Err(invalid!("paired record without targets"));
        }
        let grid = inv.invert_grid(&pair.front_image, &pair.front_pose)?;
        for (target, pose) in &pair.targets {
            let key = libm::round(yaw_degrees(pose).abs() / 30.0) as i64;
            let e = buckets.entry(key).or_insert_with(|| (yaw_bucket(pose), Vec::new(), Vec::new()));
            e.1.push(render_grid(gen, &grid, pose)?.image);
            e.2.push(target.clone());
        }
    }
    buckets.into_values().map(|(label, r, t)| Ok((label, compare_images(nets, &r, &t)?))).collect()
}

/// Front renders of each sample's latent with ground-truth renders at `yaws_deg`
/// (zero pitch); novel views are known exactly by construction.
pub fn build_paired_set(gen: &Generator, samples: &[ToySample], yaws_deg: &[f64]) -> Result<Vec<PairedRecord>> {
    if yaws_deg.is_empty() {
        return Err(invalid!("no target yaws"));
    }
    let radius = gen.config().radius;
    let front_pose = pose_from_orbit(0.0, 0.0, radius)?;
    samples
        .iter()
        .map(|s| {
            let grid = gen.synthesize(&s.w_plus)?;
            let targets = yaws_deg
                .iter()
                .map(|d| {
                    let pose = pose_from_orbit(d.to_radians(), 0.0, radius)?;
                    Ok((render_grid(gen, &grid, &pose)?.image, pose))
                })
                .collect::<Result<_>>()?;
            Ok(PairedRecord { front_image: render_grid(gen, &grid, &front_pose)?.image, front_pose, targets })
        })
        .collect()
}

/// Inverter that returns the synthesised tri-grid of known images; the
/// ideal-encoder baseline of every protocol.
#[derive(Clone, Debug, Default)]
pub struct OracleInverter {
    table: Vec<(Tensor, TriGrid)>,
}

impl OracleInverter {
    /// Registers each sample's image, and its paired front render when given.
    pub fn from_samples(gen: &Generator, samples: &[ToySample], pairs: &[PairedRecord]) -> Result<Self> {
        let mut table = Vec::with_capacity(samples.len() + pairs.len());
        for s in samples {
            table.push((s.image.clone(), gen.synthesize(&s.w_plus)?));
        }
        for (p, s) in pairs.iter().zip(samples) {
            table.push((p.front_image.clone(), gen.synthesize(&s.w_plus)?));
        }
        Ok(Self { table })
    }
}

impl Inverter for OracleInverter {
    fn invert_grid(&self, image: &Tensor, _: &CameraPose) -> Result<TriGrid> {
        self.table.iter().find(|(i, _)| i == image).map(|(_, g)| g.clone()).ok_or_else(|| invalid!("image unknown to the oracle"))
    }
}
