//! Synthetic toy datasets and mirroring augmentation.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{decode_pose_record, encode_pose_record, mirror_pose, pose_from_orbit, CameraIntrinsics, CameraPose};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::generator::Generator;
use crate::renderer::{render, RenderSettings};
use crate::tensor::Tensor;
use crate::trigrid::TriGrid;

/// One generated training image with its camera and source latent.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub record: [f64; 25],
    /// `[3, R, R]` in `[0, 1]`.
    pub image: Tensor,
    /// `[L, w_dim]` latent the image was rendered from.
    pub w_plus: Tensor,
}

impl ToySample {
    pub fn pose(&self) -> Result<CameraPose> {
        Ok(decode_pose_record(&self.record)?.0)
    }
}

/// Horizontal flip of a `[3, R, R]` (or `[N, 3, R, R]`) image.
pub fn mirror_image(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() < 2 {
        return Err(shape_err!("cannot mirror a tensor of shape {:?}", s));
    }
    let w = s[s.len() - 1];
    let mut out = image.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(image.data().chunks(w)) {
        for (j, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - j];
        }
    }
    Ok(out)
}

/// Mirrors a camera record (pose and principal point) together with its image.
pub fn mirror_augment(record: &[f64; 25], image: &Tensor) -> Result<([f64; 25], Tensor)> {
    let (pose, intr) = decode_pose_record(record)?;
    let mirrored = CameraIntrinsics::new(intr.fx, intr.fy, 1.0 - intr.cx, intr.cy)?;
    Ok((encode_pose_record(&mirror_pose(&pose), &mirrored), mirror_image(image)?))
}

/// Orbit camera with front-biased yaw (σ 0.45 rad, clamped to ±1.2) and small pitch.
pub fn sample_front_biased_pose<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Result<CameraPose> {
    let yaw: f64 = Normal::new(0.0, 0.45).expect("valid normal").sample(rng);
    let pitch: f64 = Normal::new(0.0, 0.1).expect("valid normal").sample(rng);
    pose_from_orbit(yaw.clamp(-1.2, 1.2), pitch.clamp(-0.3, 0.3), radius)
}

/// Orbit camera with uniform yaw over the full circle and small pitch.
pub fn sample_orbit_pose<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Result<CameraPose> {
    let yaw = rng.random_range(-core::f64::consts::PI..core::f64::consts::PI);
    let pitch = rng.random_range(-0.25..0.25);
    pose_from_orbit(yaw, pitch, radius)
}

/// Renders `n` generator samples at front-biased poses. Sample `i` draws from
/// stream `i` of a generator seeded with `seed`, so prefixes of larger sets agree.
pub fn generate_toy_dataset(gen: &Generator, n: usize, seed: u64) -> Result<Vec<ToySample>> {
    let cfg: &ModelConfig = gen.config();
    let settings = RenderSettings::from_config(cfg);
    let intr = cfg.intrinsics();
    let dec = gen.decoder();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let w_plus = gen.sample_w_plus(&mut rng)?;
        let pose = sample_front_biased_pose(cfg.radius, &mut rng)?;
        let grid: TriGrid = gen.synthesize(&w_plus)?;
        let image = render(&grid, &dec, &pose, &intr, &settings)?.image;
        out.push(ToySample { record: encode_pose_record(&pose, &intr), image, w_plus });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::render_field;
    use crate::scenes::BlobHead;

    #[test]
    fn mirroring_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = pose_from_orbit(0.4, 0.1, 2.7).unwrap();
        let rec = encode_pose_record(&pose, &CameraIntrinsics::default());
        let img = crate::params::normal_tensor(&[3, 8, 8], 1.0, &mut rng);
        let (r1, i1) = mirror_augment(&rec, &img).unwrap();
        assert_ne!(i1, img);
        let (r2, i2) = mirror_augment(&r1, &i1).unwrap();
        assert_eq!(i2, img);
        assert!(r2.iter().zip(&rec).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(i1.data()[7], img.data()[0]);
    }

    #[test]
    fn mirrored_front_view_of_symmetric_scene() {
        let head = BlobHead::random(&mut ChaCha8Rng::seed_from_u64(2));
        let settings = RenderSettings { resolution: 16, n_samples: 24, ..RenderSettings::from_config(&ModelConfig::default()) };
        let intr = CameraIntrinsics::default();
        let front = CameraPose::front();
        let img = render_field(|p| head.field(p), &front, &intr, &settings).unwrap().image;
        let rec = encode_pose_record(&front, &intr);
        let (_, mirrored) = mirror_augment(&rec, &img).unwrap();
        assert!(mirrored.max_abs_diff(&img) < 1e-9);
    }

    #[test]
    fn toy_dataset_is_reproducible() {
        let cfg = ModelConfig::tiny();
        let gen = Generator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = generate_toy_dataset(&gen, 3, 11).unwrap();
        let b = generate_toy_dataset(&gen, 2, 11).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(&a[..2], &b[..]);
        for s in &a {
            let pose = s.pose().unwrap();
            let grid = gen.synthesize(&s.w_plus).unwrap();
            let again = render(&grid, &gen.decoder(), &pose, &cfg.intrinsics(), &RenderSettings::from_config(&cfg)).unwrap();
            assert_eq!(again.image, s.image);
        }
        assert_ne!(generate_toy_dataset(&gen, 1, 12).unwrap()[0], a[0]);
    }
}
