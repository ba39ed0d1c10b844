//! Run configuration: a single JSON document with `model`, `diffusion`,
//! `training`, and `data` sections. Every field has a default, so a config
//! file only needs the fields it overrides; `--dump-config` prints the
//! fully resolved document.

use serde::{Deserialize, Serialize};

#[derive(thiserror::Error, Debug)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square training image extent.
    pub image_size: usize,
    pub channels: usize,
    /// Space-to-depth patch extent of the latent codec (1 = identity).
    pub patch: usize,
    /// UNet channel widths per resolution level.
    pub widths: [usize; 2],
    pub groups: usize,
    pub heads: usize,
    /// Conditioning token width; attention happens at widths[1], and the
    /// cross-attention projections expect this extent.
    pub d_cond: usize,
    pub t_embed_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub keypoints: usize,
    pub parse_labels: usize,
    pub vocab_size: usize,
    pub heatmap_sigma: f64,
    pub use_pose: bool,
    pub use_parsing: bool,
    /// Optional hooks, both off by default.
    pub boundary_smoothing: bool,
    pub smoothing_width: usize,
    pub layer_exchange: bool,
    pub exchange_gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            patch: 2,
            widths: [32, 64],
            groups: 4,
            heads: 2,
            d_cond: 64,
            t_embed_dim: 32,
            lora_rank: 16,
            lora_alpha: 16.0,
            keypoints: 8,
            parse_labels: 4,
            vocab_size: 64,
            heatmap_sigma: 1.5,
            use_pose: true,
            use_parsing: true,
            boundary_smoothing: false,
            smoothing_width: 1,
            layer_exchange: false,
            exchange_gamma: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub ddim_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { timesteps: 1000, beta_min: 1e-4, beta_max: 2e-2, ddim_steps: 25 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    Inside,
    Outside,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Ramp start/end in optimizer steps.
    pub t0: u64,
    pub t1: u64,
    pub lambda_max: f64,
    /// Freeze the background adapters while the foreground ramp is active.
    pub protect_bg: bool,
    pub fg_loss_region: RegionMode,
    /// Replace the plain masked foreground loss with the boundary- and
    /// gradient-penalized region loss.
    pub use_region_loss: bool,
    pub region_beta_b: f64,
    pub region_beta_g: f64,
    pub batch_size: usize,
    pub checkpoint_interval: u64,
    pub init_std: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t0: 8000,
            t1: 12000,
            lambda_max: 1.0,
            protect_bg: true,
            fg_loss_region: RegionMode::Inside,
            use_region_loss: false,
            region_beta_b: 0.5,
            region_beta_g: 0.25,
            batch_size: 1,
            checkpoint_interval: 100,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub occlusion_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { size: 32, min_instances: 1, max_instances: 4, occlusion_prob: 0.3 }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// A small configuration for fast end-to-end runs: 16x16 scenes,
    /// narrow UNet, short ramp.
    pub fn smoke() -> Config {
        let mut cfg = Config::default();
        cfg.model.image_size = 16;
        cfg.model.widths = [16, 32];
        cfg.model.d_cond = 32;
        cfg.model.lora_rank = 4;
        cfg.model.t_embed_dim = 16;
        cfg.training.t0 = 200;
        cfg.training.t1 = 400;
        cfg.data.size = 16;
        cfg.data.max_instances = 2;
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if m.patch == 0 || m.image_size % m.patch != 0 {
            return fail(format!("image_size {} not divisible by patch {}", m.image_size, m.patch));
        }
        let latent = m.image_size / m.patch;
        if latent % 2 != 0 {
            return fail(format!("latent extent {} must be even for the down level", latent));
        }
        if m.image_size % 4 != 0 {
            return fail("image_size must be divisible by 4 for the condition encoders".into());
        }
        for w in m.widths {
            if w == 0 || w % m.groups != 0 {
                return fail(format!("width {} not divisible by groups {}", w, m.groups));
            }
        }
        if m.widths[1] % m.heads != 0 {
            return fail(format!("widths[1] {} not divisible by heads {}", m.widths[1], m.heads));
        }
        if m.lora_rank == 0 || m.lora_rank > m.widths[1].min(m.d_cond) {
            return fail(format!("lora_rank {} out of range", m.lora_rank));
        }
        let d = &self.diffusion;
        if !(d.beta_min > 0.0 && d.beta_min <= d.beta_max && d.beta_max < 1.0) {
            return fail(format!("invalid beta range [{}, {}]", d.beta_min, d.beta_max));
        }
        if d.ddim_steps == 0 || d.ddim_steps > d.timesteps {
            return fail(format!("ddim_steps {} out of range", d.ddim_steps));
        }
        let t = &self.training;
        if t.t0 >= t.t1 {
            return fail(format!("t0 {} must be below t1 {}", t.t0, t.t1));
        }
        if t.lambda_max < 0.0 {
            return fail("lambda_max must be nonnegative".into());
        }
        if t.region_beta_b < 0.0 || t.region_beta_g < 0.0 {
            return fail("region loss weights must be nonnegative".into());
        }
        if t.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        let da = &self.data;
        if da.min_instances == 0 || da.min_instances > da.max_instances {
            return fail("instance range must satisfy 1 <= min <= max".into());
        }
        if da.size != m.image_size {
            return fail(format!(
                "data.size {} must match model.image_size {}",
                da.size, m.image_size
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        Config::smoke().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = Config::smoke();
        let back = Config::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_override() {
        let cfg = Config::from_json(r#"{"training": {"lr": 0.01}}"#).unwrap();
        assert_eq!(cfg.training.lr, 0.01);
        assert_eq!(cfg.training.t0, 8000);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(Config::from_json(r#"{"training": {"learning_rate": 0.01}}"#).is_err());
    }

    #[test]
    fn invalid_schedule_rejected() {
        let mut cfg = Config::default();
        cfg.training.t0 = 10;
        cfg.training.t1 = 10;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn indivisible_patch_rejected() {
        let mut cfg = Config::default();
        cfg.model.patch = 3;
        assert!(cfg.validate().is_err());
    }
}
