//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autocontext::AutoContextConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::optimizer::OptimizerConfig;

/// Flat, user-facing configuration. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub pyramid_factors: Vec<usize>,
    pub squaring_steps: u32,
    pub ncc_window: usize,
    pub lambda_sim: f64,
    pub lambda_v: f64,
    pub lambda_j: f64,
    pub sigma_soft: f64,
    pub n_autocontext: usize,
    /// Seed for stochastic components (phantom generation); registration
    /// itself is deterministic.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ac = AutoContextConfig::default();
        let opt = &ac.optimizer;
        Self {
            learning_rate: opt.learning_rate,
            max_iterations: opt.max_iterations,
            pyramid_factors: opt.pyramid_factors.clone(),
            squaring_steps: opt.squaring_steps,
            ncc_window: opt.ncc_window,
            lambda_sim: opt.weights.sim,
            lambda_v: opt.weights.velocity,
            lambda_j: opt.weights.jacobian,
            sigma_soft: ac.sigma_soft,
            n_autocontext: ac.n_iterations,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// The validated auto-context configuration this describes.
    pub fn auto_context(&self) -> Result<AutoContextConfig> {
        let cfg = AutoContextConfig {
            n_iterations: self.n_autocontext,
            optimizer: OptimizerConfig {
                learning_rate: self.learning_rate,
                max_iterations: self.max_iterations,
                pyramid_factors: self.pyramid_factors.clone(),
                squaring_steps: self.squaring_steps,
                ncc_window: self.ncc_window,
                weights: LossWeights {
                    sim: self.lambda_sim,
                    velocity: self.lambda_v,
                    jacobian: self.lambda_j,
                },
                ..OptimizerConfig::default()
            },
            sigma_soft: self.sigma_soft,
            ..AutoContextConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
