//! Experiment configuration: one TOML document that pins every knob of a
//! run. Unknown keys are rejected, the parsed document is echoed verbatim
//! into the output directory, and its hash stamps every artifact header.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optimizer::TrainConfig;
use crate::Real;

/// Environment-generator parameters shared by the difficulty presets. The
/// presets differ only in barrier structure, so tasks of any difficulty can
/// share one policy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub horizon: usize,
    pub alphabet_size: usize,
    pub easy_safe_size: usize,
    pub leak: Real,
    /// First step of the barrier in the medium/hard presets.
    pub barrier_start: usize,
    pub medium_barrier_len: usize,
    pub hard_barrier_len: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            horizon: 12,
            alphabet_size: 8,
            easy_safe_size: 6,
            leak: 0.0,
            barrier_start: 4,
            medium_barrier_len: 1,
            hard_barrier_len: 4,
        }
    }
}

/// Difficulty proportions for task generation; must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskMix {
    pub count: usize,
    pub easy: f64,
    pub medium: f64,
    pub hard: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix { count: 1, easy: 0.0, medium: 0.0, hard: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceParams {
    /// Logit bonus γ on the recommended action.
    pub gamma: Real,
    /// Insertion-noise ratio applied to reference plans after validation.
    pub noise_ratio: f64,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams { gamma: 4.0, noise_ratio: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisParams {
    /// Risk weight λ in the guidance utility `J_k = B_k − λ R_k`.
    pub lambda: Real,
    /// Recovery threshold ρ of the risk-constrained selection rule.
    pub rho: Real,
    /// Margin Δ for the selection sample-size bound.
    pub margin: f64,
    /// Failure probability ξ for the selection sample-size bound.
    pub xi: f64,
    /// K for Pass@K diagnostics.
    pub pass_k: usize,
    /// Guided rollouts per level for risk estimation.
    pub risk_rollouts: usize,
    /// Groups per level for recovery-probability estimation; 0 means the
    /// Hoeffding budget implied by (margin, xi).
    pub q_trials: usize,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            lambda: 1.0,
            rho: 0.9,
            margin: 0.1,
            xi: 0.05,
            pass_k: 8,
            risk_rollouts: 1000,
            q_trials: 0,
        }
    }
}

/// The full, self-contained description of one deterministic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvParams,
    pub tasks: TaskMix,
    pub guidance: GuidanceParams,
    pub train: TrainConfig<Real>,
    pub analysis: AnalysisParams,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    /// Hex SHA-256 of the canonical TOML echo; stamps artifact headers.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.env;
        if e.easy_safe_size < 1 || e.easy_safe_size > e.alphabet_size {
            return Err(Error::InvalidConfig("easy_safe_size out of range".into()));
        }
        for len in [e.medium_barrier_len, e.hard_barrier_len] {
            if len == 0 || e.barrier_start + len > e.horizon {
                return Err(Error::InvalidConfig("barrier interval out of range".into()));
            }
        }
        let mix = &self.tasks;
        if mix.count < 1 {
            return Err(Error::InvalidConfig("task count must be >= 1".into()));
        }
        let parts = [mix.easy, mix.medium, mix.hard];
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidConfig("difficulty proportions must be in [0, 1]".into()));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "difficulty proportions must sum to 1, got {total}"
            )));
        }
        if self.guidance.gamma < 0.0 {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.guidance.noise_ratio) {
            return Err(Error::InvalidConfig("noise_ratio must be in [0, 1)".into()));
        }
        let a = &self.analysis;
        if a.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&a.rho) {
            return Err(Error::InvalidConfig("rho must be in [0, 1]".into()));
        }
        if !(a.margin > 0.0 && a.margin <= 0.5) {
            return Err(Error::InvalidConfig("margin must be in (0, 0.5]".into()));
        }
        if !(a.xi > 0.0 && a.xi < 1.0) {
            return Err(Error::InvalidConfig("xi must be in (0, 1)".into()));
        }
        if a.pass_k < 1 || a.risk_rollouts < 2 {
            return Err(Error::InvalidConfig("pass_k >= 1 and risk_rollouts >= 2 required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_equal_and_hash_stable() {
        let config = ExperimentConfig::default();
        let echo = config.to_toml();
        let back = ExperimentConfig::from_toml(&echo).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.content_hash(), config.content_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seed = 1\nturbo = true\n");
        assert!(err.is_err());
        let err = ExperimentConfig::from_toml("[env]\nhorizon = 12\nwidth = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let config = ExperimentConfig::from_toml("seed = 7\n[guidance]\ngamma = 2.0\n").unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.guidance.gamma, 2.0);
        assert_eq!(config.env.horizon, 12);
        assert_eq!(config.train.group_size, 8);
    }

    #[test]
    fn bad_mix_rejected() {
        let err = ExperimentConfig::from_toml("[tasks]\ncount = 4\neasy = 0.5\nhard = 0.2\n");
        assert!(err.is_err());
    }

    #[test]
    fn fixed_k_mode_parses() {
        let text = "[train]\nmode = { fixed_k = { k = 6 } }\n";
        let config = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(config.train.mode, crate::optimizer::Mode::FixedK { k: 6 });
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::from_toml("seed = 99\n").unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
