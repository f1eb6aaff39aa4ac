//! Run configuration files: every knob of a training run in one TOML
//! document, with unknown keys rejected at every level.

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::flowmatch::SamplerConfig;
use crate::model::ModelConfig;
use crate::train::{check_compatible_shapes, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the default root for run outputs.
pub const OUT_ENV: &str = "LATTE_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Output directory; relative paths resolve under `$LATTE_OUT` when set.
    pub out_dir: Option<PathBuf>,
    /// Seed for model initialization.
    pub seed: u64,
    /// Worker thread cap; `None` uses every core.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.data.validate()?;
        check_compatible_shapes(&self.model, &self.data)?;
        if self.run.threads == Some(0) {
            return Err(Error::Config("field `run.threads` must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Where outputs go: `run.out_dir`, placed under `$LATTE_OUT` when
    /// relative and the variable is set; `runs/latest` otherwise.
    pub fn out_dir(&self) -> PathBuf {
        resolve_out(self.run.out_dir.as_deref().unwrap_or(Path::new("latest")))
    }
}

/// Resolves a relative output path under the environment root.
pub fn resolve_out(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => Path::new("runs").join(p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn roundtrip_and_rejection() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let partial = RunConfig::from_text("[model]\nvariant = \"blend\"\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(partial.model.variant, Variant::Blend);
        assert_eq!(partial.train.steps, 5);
        assert_eq!(partial.sampler.steps, 40);
        for bad in [
            "[model]\nlayerz = 3\n",
            "[trian]\nsteps = 1\n",
            "seed = 3\n",
            "[run]\nthreads = 0\n",
        ] {
            assert!(matches!(RunConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(RunConfig::from_text("[data]\nfamily = \"nope\"\n").is_err());
        // grid data with a points model
        assert!(RunConfig::from_text("[data]\nmode = \"grid8\"\nfamily = \"blobs\"\n").is_err());
    }
}
