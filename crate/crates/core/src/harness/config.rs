use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bird::{UpdateConfig, Variant, VariantSelector};
use crate::envs::{ObservationMode, ENV_NAMES};
use crate::error::{BirdError, Result};
use crate::worldmodel::ModelDims;

/// Every knob of a run. Loaded from flat TOML; missing keys take defaults,
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: String,
    pub seed: u64,
    pub variant: Variant,
    pub observation_mode: ObservationMode,
    pub total_episodes: usize,
    pub prefill_episodes: usize,
    /// Decisions per episode (T).
    pub episode_steps: usize,
    /// Combined updates before each episode (C).
    pub learn_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub w_mi: f64,
    pub alpha_soft: f64,
    pub model_lr: f64,
    pub actor_lr: f64,
    pub value_lr: f64,
    pub grad_clip: f64,
    pub std_floor: f64,
    pub explore_sigma: f64,
    pub buffer_capacity: usize,
    pub deter_size: usize,
    pub stoch_size: usize,
    pub hidden_size: usize,
    /// Sequences sampled each episode for the latent-error diagnostic.
    pub diag_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "pendulum-swingup".into(),
            seed: 0,
            variant: Variant::Bird,
            observation_mode: ObservationMode::Vector,
            total_episodes: 150,
            prefill_episodes: 5,
            episode_steps: 500,
            learn_steps: 100,
            batch_size: 50,
            seq_len: 50,
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            beta: 1.0,
            w_mi: 1e-8,
            alpha_soft: 1e-3,
            model_lr: 6e-4,
            actor_lr: 8e-5,
            value_lr: 8e-5,
            grad_clip: 100.0,
            std_floor: 1e-4,
            explore_sigma: 0.3,
            buffer_capacity: 100_000,
            deter_size: 64,
            stoch_size: 16,
            hidden_size: 64,
            diag_batch: 16,
        }
    }
}

pub const LATENT_ERROR_HORIZONS: [usize; 3] = [1, 5, 15];

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(BirdError::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| BirdError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BirdError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(ENV_NAMES.contains(&self.env.as_str()), || {
            format!("unknown env '{}' (valid: {})", self.env, ENV_NAMES.join(", "))
        })?;
        let positive = [
            ("episode_steps", self.episode_steps),
            ("learn_steps", self.learn_steps),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("horizon", self.horizon),
            ("buffer_capacity", self.buffer_capacity),
            ("deter_size", self.deter_size),
            ("stoch_size", self.stoch_size),
            ("hidden_size", self.hidden_size),
            ("diag_batch", self.diag_batch),
        ];
        for (name, v) in positive {
            check(v > 0, || format!("{name} must be positive"))?;
        }
        check(self.prefill_episodes > 0, || "prefill_episodes must be positive".into())?;
        check(self.seq_len <= self.episode_steps + 1, || {
            format!("seq_len {} exceeds episode length {}", self.seq_len, self.episode_steps + 1)
        })?;
        check(self.buffer_capacity >= self.episode_steps + 1, || {
            "buffer_capacity must hold at least one episode".into()
        })?;
        check(self.gamma > 0.0 && self.gamma <= 1.0, || format!("gamma must be in (0, 1], got {}", self.gamma))?;
        check((0.0..=1.0).contains(&self.lambda), || format!("lambda must be in [0, 1], got {}", self.lambda))?;
        for (name, v) in [
            ("beta", self.beta),
            ("w_mi", self.w_mi),
            ("alpha_soft", self.alpha_soft),
            ("explore_sigma", self.explore_sigma),
        ] {
            check(v >= 0.0 && v.is_finite(), || format!("{name} must be finite and >= 0, got {v}"))?;
        }
        for (name, v) in [
            ("model_lr", self.model_lr),
            ("actor_lr", self.actor_lr),
            ("value_lr", self.value_lr),
            ("grad_clip", self.grad_clip),
            ("std_floor", self.std_floor),
        ] {
            check(v > 0.0 && v.is_finite(), || format!("{name} must be finite and > 0, got {v}"))?;
        }
        Ok(())
    }

    pub fn selector(&self) -> VariantSelector {
        VariantSelector {
            variant: self.variant,
            w_mi: self.w_mi,
            alpha_soft: self.alpha_soft,
        }
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            horizon: self.horizon,
            model_lr: self.model_lr,
            actor_lr: self.actor_lr,
            value_lr: self.value_lr,
            grad_clip: self.grad_clip,
            selector: self.selector(),
            unit_confidence: false,
        }
    }

    pub fn model_dims(&self, obs: usize, action: usize) -> ModelDims {
        ModelDims {
            obs,
            action,
            deter: self.deter_size,
            stoch: self.stoch_size,
            hidden: self.hidden_size,
            std_floor: self.std_floor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn partial_override() {
        let cfg = RunConfig::from_toml_str("variant = \"soft-bird\"\nhorizon = 5\n").unwrap();
        assert_eq!(cfg.variant, Variant::SoftBird);
        assert_eq!(cfg.horizon, 5);
        assert_eq!(cfg.batch_size, 50);
    }

    #[test]
    fn unknown_keys_and_bad_ranges_rejected() {
        assert!(RunConfig::from_toml_str("horizn = 3").is_err());
        assert!(RunConfig::from_toml_str("gamma = 0.0").is_err());
        assert!(RunConfig::from_toml_str("lambda = 1.5").is_err());
        assert!(RunConfig::from_toml_str("env = \"cartpole\"").is_err());
        assert!(RunConfig::from_toml_str("variant = \"planet\"").is_err());
        assert!(RunConfig::from_toml_str("seq_len = 900").is_err());
        assert!(RunConfig::from_toml_str("w_mi = -1.0").is_err());
    }
}
