use crate::error::{Error, Result};
use crate::schedule::TimestepSchedule;
use serde::{Deserialize, Serialize};

/// How the generative layers relate to the context pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Frozen context pathway; every generative layer is a trainable
    /// replica initialized from its context twin.
    Couple,
    /// Task-specific attention per pathway, feed-forward shared, everything
    /// trainable.
    Blend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub groups: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub latent_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub context_tokens: usize,
    pub num_classes: usize,
    pub variant: Variant,
    pub total_steps: u32,
    pub overlap: u32,
    pub time_freq_dim: usize,
    pub residual_attention: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            groups: 4,
            hidden: 128,
            heads: 4,
            ffn_mult: 4,
            latent_dim: 2,
            grid_h: 1,
            grid_w: 1,
            context_tokens: 4,
            num_classes: 8,
            variant: Variant::Couple,
            total_steps: 1000,
            overlap: 100,
            time_freq_dim: 64,
            residual_attention: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Defaults for an 8×8 single-channel grid.
    pub fn grid8() -> Self {
        Self {
            latent_dim: 1,
            grid_h: 8,
            grid_w: 8,
            ..Self::default()
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn group_size(&self) -> usize {
        self.layers / self.groups.max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("groups", self.groups),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("latent_dim", self.latent_dim),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("context_tokens", self.context_tokens),
            ("num_classes", self.num_classes),
            ("time_freq_dim", self.time_freq_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("field `{name}` must be positive")));
            }
        }
        if !self.layers.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "field `groups`: {} does not divide {} layers",
                self.groups, self.layers
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "field `heads`: {} does not divide hidden {}",
                self.heads, self.hidden
            )));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "head dim {} must be divisible by 4",
                self.head_dim()
            )));
        }
        if !self.time_freq_dim.is_multiple_of(2) {
            return Err(Error::Config("field `time_freq_dim` must be even".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("field `init_std` must be positive".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<TimestepSchedule> {
        TimestepSchedule::build(self.layers, self.groups, self.total_steps, self.overlap)
    }

    /// The all-layers baseline with the same architecture.
    pub fn vanilla(&self) -> Self {
        Self {
            groups: 1,
            ..self.clone()
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::grid8().validate().unwrap();
        assert_eq!(ModelConfig::default().group_size(), 2);
        assert_eq!(ModelConfig::grid8().tokens(), 64);
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.groups = 3));
        assert!(bad(|c| c.heads = 3));
        assert!(bad(|c| c.heads = 64));
        assert!(bad(|c| c.hidden = 0));
        assert!(bad(|c| c.overlap = 400));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ModelConfig::from_text("layers = 8\nlayerz = 2\n").is_err());
        let c = ModelConfig::from_text("variant = \"blend\"\n").unwrap();
        assert_eq!(c.variant, Variant::Blend);
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
