//! Model, loss and training configuration.

use alloc::format;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{CameraIntrinsics, DEFAULT_RADIUS};
use crate::error::{invalid, Result};
use crate::optim::OptimizerKind;

/// Normalised focal length of the model cameras; wide enough that a head of
/// radius ~0.6 at the cube centre fills most of the frame.
pub const MODEL_FOCAL: f64 = 2.0;

/// Dimensions of the generator, renderer, encoders and discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    /// Number of per-layer latents in a W+ stack.
    pub latent_layers: usize,
    pub mapping_layers: usize,
    pub synth_channels: usize,
    pub slices: usize,
    pub channels: usize,
    /// Spatial size of every tri-grid plane (height = width).
    pub grid_res: usize,
    pub decoder_hidden: usize,
    pub image_res: usize,
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub radius: f64,
    pub focal: f64,
    pub truncation: f64,
    pub encoder_channels: [usize; 4],
    pub residual_channels: [usize; 4],
    /// Visibility volume resolution; 0 means "same as `grid_res`".
    pub mask_res: usize,
    pub mask_dilation: usize,
    /// Depth tolerance of the visibility test, in voxel diagonals.
    pub visibility_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            w_dim: 64,
            latent_layers: 8,
            mapping_layers: 2,
            synth_channels: 32,
            slices: 3,
            channels: 8,
            grid_res: 64,
            decoder_hidden: 32,
            image_res: 64,
            n_samples: 32,
            near: 1.2,
            far: 4.2,
            radius: DEFAULT_RADIUS,
            focal: MODEL_FOCAL,
            truncation: 0.85,
            encoder_channels: [16, 32, 64, 64],
            residual_channels: [16, 32, 32, 32],
            mask_res: 0,
            mask_dilation: 1,
            visibility_eps: 1.5,
        }
    }
}

impl ModelConfig {
    /// Reduced sizes used by the benchmark runs and the test suite.
    pub fn bench() -> Self {
        Self {
            z_dim: 32,
            w_dim: 32,
            latent_layers: 6,
            mapping_layers: 2,
            synth_channels: 32,
            slices: 3,
            channels: 4,
            grid_res: 16,
            decoder_hidden: 32,
            image_res: 32,
            n_samples: 32,
            encoder_channels: [16, 32, 32, 32],
            residual_channels: [16, 16, 32, 32],
            ..Self::default()
        }
    }

    /// Very small sizes for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            z_dim: 8,
            w_dim: 8,
            latent_layers: 4,
            mapping_layers: 1,
            synth_channels: 4,
            slices: 2,
            channels: 2,
            grid_res: 8,
            decoder_hidden: 4,
            image_res: 8,
            n_samples: 6,
            encoder_channels: [2, 3, 3, 3],
            residual_channels: [2, 3, 3, 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("z_dim", self.z_dim),
            ("w_dim", self.w_dim),
            ("latent_layers", self.latent_layers),
            ("synth_channels", self.synth_channels),
            ("slices", self.slices),
            ("channels", self.channels),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(invalid!("{name} must be positive"));
            }
        }
        if self.latent_layers < 2 {
            return Err(invalid!("latent_layers must be at least 2"));
        }
        if self.grid_res < 4 || !self.grid_res.is_power_of_two() {
            return Err(invalid!("grid_res must be a power of two ≥ 4, got {}", self.grid_res));
        }
        if self.image_res < 8 || !self.image_res.is_power_of_two() {
            return Err(invalid!("image_res must be a power of two ≥ 8, got {}", self.image_res));
        }
        if self.n_samples < 2 {
            return Err(invalid!("n_samples must be at least 2"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(invalid!("need 0 < near < far, got near={} far={}", self.near, self.far));
        }
        if !(0.0..=1.0).contains(&self.truncation) {
            return Err(invalid!("truncation must lie in [0, 1]"));
        }
        if self.encoder_channels.contains(&0) || self.residual_channels.contains(&0) {
            return Err(invalid!("channel widths must be positive"));
        }
        if !(self.radius > 0.0 && self.focal > 0.0 && self.visibility_eps >= 0.0) {
            return Err(invalid!("radius, focal and visibility_eps must be positive"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics { fx: self.focal, fy: self.focal, cx: 0.5, cy: 0.5 }
    }

    pub fn trigrid_channels(&self) -> usize {
        3 * self.slices * self.channels
    }

    pub fn volume_res(&self) -> usize {
        if self.mask_res == 0 {
            self.grid_res
        } else {
            self.mask_res
        }
    }

    /// SHA-256 over a canonical text rendering of every field.
    pub fn fingerprint(&self) -> [u8; 32] {
        let text = format!("{self:?}");
        Sha256::digest(text.as_bytes()).into()
    }
}

/// Critic widths used by the benchmark runs.
pub const BENCH_CRITIC_CHANNELS: [usize; 4] = [16, 32, 32, 32];

/// Loss coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub perceptual: f64,
    pub l2: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub discriminator: f64,
    pub r1_weight: f64,
    pub r1_interval: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { perceptual: 0.8, l2: 1.0, identity: 0.5, adversarial: 0.001, discriminator: 0.5, r1_weight: 10.0, r1_interval: 16 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.perceptual, self.l2, self.identity, self.adversarial, self.discriminator, self.r1_weight];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid!("loss weights must be finite and nonnegative"));
        }
        if self.r1_interval == 0 {
            return Err(invalid!("r1_interval must be at least 1"));
        }
        Ok(())
    }

    /// Whether the R1 penalty is applied on this step.
    pub fn r1_due(&self, step: u64) -> bool {
        step % self.r1_interval == 0
    }
}

/// Optimisation schedule and ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub mirror_prob: f64,
    /// Train the second encoder without any discriminator.
    pub no_disc: bool,
    /// Discriminate renders at random orbit poses instead of tri-grids.
    pub image_domain_disc: bool,
    /// Replace occlusion masks by all-ones masks.
    pub no_occlusion: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 3,
            total_steps: 2000,
            seed: 0,
            optimizer: OptimizerKind::Ranger,
            mirror_prob: 0.5,
            no_disc: false,
            image_domain_disc: false,
            no_occlusion: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid!("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(invalid!("batch_size and total_steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(invalid!("mirror_prob must lie in [0, 1]"));
        }
        if self.no_disc && self.image_domain_disc {
            return Err(invalid!("no_disc and image_domain_disc are mutually exclusive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_weight_defaults() {
        let w = LossWeights::default();
        assert_eq!((w.perceptual, w.l2, w.identity, w.adversarial, w.discriminator), (0.8, 1.0, 0.5, 0.001, 0.5));
        assert_eq!((w.r1_weight, w.r1_interval), (10.0, 16));
        assert!(w.r1_due(0) && w.r1_due(32) && !w.r1_due(17));
    }

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::default(), ModelConfig::bench(), ModelConfig::tiny()] {
            c.validate().unwrap();
        }
        let bad = ModelConfig { near: 5.0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        TrainConfig::default().validate().unwrap();
        assert!(LossWeights { r1_interval: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = ModelConfig::bench();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.channels += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
