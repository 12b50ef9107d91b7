//! TOML run configuration. Every section is optional; unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use pathsegkit::explain::{MilConfig, DEFAULT_BLUR_RADIUS};
use pathsegkit::metrics::MIN_INSTANCE_SIZE;
use pathsegkit::model::{ModelConfig, TrainConfig};
use pathsegkit::pipeline::{STANDARD_SIZE, TARGET_MAGNIFICATION, TILE_THRESHOLD, WINDOW};
use pathsegkit::prompts::BoxKind;
use pathsegkit::synthetic::{CorpusConfig, SlideConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every seeded section when resolved.
    pub seed: u64,
    pub standardize: StandardizeConfig,
    pub evaluate: EvaluateConfig,
    pub boxes: BoxesConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub explain: ExplainConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            standardize: StandardizeConfig::default(),
            evaluate: EvaluateConfig::default(),
            boxes: BoxesConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            explain: ExplainConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardizeConfig {
    pub target_magnification: f64,
    pub window: usize,
    pub threshold: usize,
    /// Edge length of the emitted patches.
    pub size: usize,
    /// Fraction of unsplit samples assigned to training.
    pub train_ratio: f64,
}

impl Default for StandardizeConfig {
    fn default() -> Self {
        Self {
            target_magnification: TARGET_MAGNIFICATION,
            window: WINDOW,
            threshold: TILE_THRESHOLD,
            size: STANDARD_SIZE,
            train_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub resamples: usize,
    pub level: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { resamples: 1000, level: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxesConfig {
    pub kind: BoxKind,
    pub min_size: usize,
}

impl Default for BoxesConfig {
    fn default() -> Self {
        Self {
            kind: BoxKind::Union,
            min_size: MIN_INSTANCE_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub threshold: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Width of the random frozen extractor used when no checkpoint is given.
    pub feature_dim: usize,
    pub patch_size: usize,
    pub classes: usize,
    pub blur_radius: usize,
    pub mil: MilConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            patch_size: 4,
            classes: 2,
            blur_radius: DEFAULT_BLUR_RADIUS,
            mil: MilConfig {
                epochs: 150,
                learning_rate: 3e-2,
                ..MilConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub corpus: CorpusConfig,
    pub slides: SlideConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            slides: SlideConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies the `--seed` override and propagates the master seed.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.explain.mil.seed = self.seed;
        self.synthetic.corpus.seed = self.seed;
        self.synthetic.slides.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.evaluate.level > 0.0 && self.evaluate.level < 1.0) || self.evaluate.resamples == 0 {
            bail!("evaluate: level must lie in (0, 1) and resamples be positive");
        }
        if !(0.0..=1.0).contains(&self.predict.threshold) {
            bail!("predict: threshold {} outside [0, 1]", self.predict.threshold);
        }
        if self.standardize.size == 0 || !(self.standardize.target_magnification > 0.0) {
            bail!("standardize: size and target magnification must be positive");
        }
        Ok(self)
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_sections_and_rejects_unknown_keys() {
        let cfg: RunConfig = toml::from_str("seed = 4\n[model]\ndim = 8\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.model.dim, 8);
        assert_eq!(cfg.model.queries, ModelConfig::default().queries);
        assert_eq!(cfg.train.epochs, 3);
        assert!(toml::from_str::<RunConfig>("[model]\nwidth = 8\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
    }

    #[test]
    fn seed_override_propagates_and_changes_hash() {
        let base = RunConfig::default().resolve(None).unwrap();
        let seeded = RunConfig::default().resolve(Some(9)).unwrap();
        assert_eq!(seeded.train.seed, 9);
        assert_eq!(seeded.synthetic.slides.seed, 9);
        assert_ne!(base.hash(), seeded.hash());
        assert_eq!(base.hash(), RunConfig::default().resolve(None).unwrap().hash());
        assert_eq!(base.hash().len(), 64);
    }

    #[test]
    fn rejects_invalid_values() {
        let mut cfg = RunConfig::default();
        cfg.predict.threshold = 1.5;
        assert!(cfg.resolve(None).is_err());
        let mut cfg = RunConfig::default();
        cfg.model.dim = 0;
        assert!(cfg.resolve(None).is_err());
    }
}
