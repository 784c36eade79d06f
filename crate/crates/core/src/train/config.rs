//! Training configuration, read from and written to TOML.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::GrowFeatureInit;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticMode {
    /// Fixed one-hot encoding of each anchor's object ID.
    #[default]
    OneHot,
    /// Per-anchor semantic vectors trained with an L1 loss.
    Learnable,
}

impl FromStr for SemanticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onehot" => Ok(Self::OneHot),
            "learnable" => Ok(Self::Learnable),
            other => Err(Error::Usage(format!("unknown semantic mode '{other}' (onehot|learnable)"))),
        }
    }
}

impl fmt::Display for SemanticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OneHot => "onehot",
            Self::Learnable => "learnable",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ssim: f64,
    pub volume: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssim: 0.2, volume: 2e-5, semantic: 0.1 }
    }
}

/// Per-group learning rates. Groups with a `_final` value decay
/// exponentially from the initial rate to it over the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub offset: f64,
    pub offset_final: f64,
    pub feature: f64,
    pub head: f64,
    pub head_final: f64,
    pub semantic: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { offset: 1e-2, offset_final: 1e-4, feature: 2.5e-3, head: 2e-3, head_final: 2e-4, semantic: 1e-2 }
    }
}

/// Log-linear interpolation between `start` and `end` at `t ∈ [0, 1]`.
pub fn exp_decay(start: f64, end: f64, t: f64) -> f64 {
    if start <= 0.0 || end <= 0.0 {
        return start + (end - start) * t;
    }
    (start.ln() * (1.0 - t) + end.ln() * t).exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrownFeature {
    #[default]
    Zero,
    Parent,
}

impl From<GrownFeature> for GrowFeatureInit {
    fn from(g: GrownFeature) -> Self {
        match g {
            GrownFeature::Zero => GrowFeatureInit::Zero,
            GrownFeature::Parent => GrowFeatureInit::CopyParent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Statistics window, iterations.
    pub interval: usize,
    pub start: usize,
    pub until: usize,
    pub grad_threshold: f64,
    pub opacity_threshold: f64,
    pub grown_feature: GrownFeature,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            until: 15_000,
            grad_threshold: 2e-4,
            opacity_threshold: 5e-3,
            grown_feature: GrownFeature::Zero,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Primitives per anchor.
    pub k: usize,
    pub feature_dim: usize,
    /// Anchor voxel edge, meters.
    pub voxel_size: f64,
    pub semantic_mode: SemanticMode,
    pub weights: LossWeights,
    pub learning_rates: LearningRates,
    pub densify: DensifyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            seed: 0,
            k: 10,
            feature_dim: 32,
            voxel_size: 0.04,
            semantic_mode: SemanticMode::OneHot,
            weights: LossWeights::default(),
            learning_rates: LearningRates::default(),
            densify: DensifyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Config(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        if self.densify.interval == 0 {
            return Err(Error::Config("densify.interval must be at least 1".into()));
        }
        let w = &self.weights;
        for (name, v) in [("weights.ssim", w.ssim), ("weights.volume", w.volume), ("weights.semantic", w.semantic)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial() {
        let cfg = TrainConfig { seed: 9, voxel_size: 0.1, ..Default::default() };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("iterations = 50\n[weights]\nsemantic = 0.0\n").unwrap();
        assert_eq!(partial.iterations, 50);
        assert_eq!(partial.weights.semantic, 0.0);
        assert_eq!(partial.weights.ssim, 0.2);
        assert!(matches!(TrainConfig::from_toml("k = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn decay_endpoints() {
        assert!((exp_decay(2e-3, 2e-4, 0.0) - 2e-3).abs() < 1e-18);
        assert!((exp_decay(2e-3, 2e-4, 1.0) - 2e-4).abs() < 1e-18);
        assert!((exp_decay(2e-3, 2e-4, 0.5) - (4e-7f64).sqrt()).abs() < 1e-15);
    }
}
