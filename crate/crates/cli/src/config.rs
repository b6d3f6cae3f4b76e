//! Run configuration file.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trigrid_core::config::{LossWeights, ModelConfig, TrainConfig, BENCH_CRITIC_CHANNELS};
use trigrid_core::training::PretrainConfig;

/// Everything a run needs. Every key is optional; missing keys take the
/// values of [`RunConfig::default`] and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Each section's `seed` is added to it.
    pub seed: u64,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub e1: TrainConfig,
    pub e2: TrainConfig,
    /// Required by `train-e2` unless `e2.no_disc` is set.
    pub discriminator: Option<DiscriminatorConfig>,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub test_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Widths of the four strided blocks.
    pub channels: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Yaw count of 360° renders and of the Fréchet protocol.
    pub n_views: usize,
    /// Fresh generator samples in the Fréchet reference set.
    pub reference_samples: usize,
    /// Target yaws of the multi-view protocol, in degrees.
    pub multiview_yaws_deg: Vec<f64>,
    /// Lattice resolution of exported meshes.
    pub mesh_resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_images: 32, test_images: 24 }
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { channels: BENCH_CRITIC_CHANNELS }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_views: 12, reference_samples: 24, multiview_yaws_deg: vec![-60.0, -30.0, 30.0, 60.0], mesh_resolution: 32 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let e1 = TrainConfig { learning_rate: 1e-3, total_steps: 300, ..TrainConfig::default() };
        Self {
            seed: 0,
            model: ModelConfig::bench(),
            losses: LossWeights::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            e1,
            e2: TrainConfig { total_steps: 200, ..e1 },
            discriminator: None,
            eval: EvalConfig::default(),
        }
    }
}

fn overlay(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a config file, filling missing keys from the defaults at every
    /// nesting level.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        let mut merged = toml::Value::try_from(Self::default())?;
        // an explicit [discriminator] table starts from its own defaults, an
        // absent one is dropped
        if let toml::Value::Table(t) = &mut merged {
            t.remove("discriminator");
        }
        if let Some(d) = user.get("discriminator") {
            let mut base = toml::Value::try_from(DiscriminatorConfig::default())?;
            overlay(&mut base, d.clone());
            if let toml::Value::Table(t) = &mut merged {
                t.insert("discriminator".into(), base);
            }
        }
        let mut user = user;
        if let toml::Value::Table(t) = &mut user {
            t.remove("discriminator");
        }
        overlay(&mut merged, user);
        let cfg: Self = merged.try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        self.pretrain.validate()?;
        self.e1.validate().context("[e1]")?;
        self.e2.validate().context("[e2]")?;
        if self.data.train_images == 0 || self.data.test_images == 0 {
            bail!("data.train_images and data.test_images must be positive");
        }
        if self.eval.n_views == 0 || self.eval.reference_samples < 2 {
            bail!("eval.n_views must be positive and eval.reference_samples at least 2");
        }
        if let Some(d) = &self.discriminator {
            if d.channels.contains(&0) {
                bail!("discriminator.channels must be positive");
            }
        }
        Ok(())
    }

    /// Seed of one stage: the master seed plus the section's own seed.
    pub fn stage_seed(&self, section_seed: u64) -> u64 {
        self.seed.wrapping_add(section_seed)
    }

    /// Critic widths for `train-e2`, or a diagnostic when the run needs a critic
    /// but the config has no `[discriminator]` section.
    pub fn critic_channels(&self) -> Result<Option<[usize; 4]>> {
        match (&self.discriminator, self.e2.no_disc) {
            (_, true) => Ok(None),
            (Some(d), false) => Ok(Some(d.channels)),
            (None, false) => bail!("train-e2 needs a [discriminator] section unless e2.no_disc = true"),
        }
    }
}
