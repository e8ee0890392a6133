use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LampoError, Result};
use crate::mppca::EmOptions;
use crate::optimizer::SolveOptions;
use crate::promp::BasisConfig;
use crate::reacher::ReacherConfig;
use crate::rl::LampoConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of mixture components.
    #[serde(rename = "K")]
    pub k: usize,
    pub d_z: usize,
    /// Fraction of demonstrations held out for the reported log-likelihood.
    pub held_out_fraction: f64,
    pub em: EmOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 4,
            d_z: 5,
            held_out_fraction: 0.1,
            em: EmOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub gamma: f64,
    pub chi: f64,
    pub n_per_iter: usize,
    pub n_iterations: usize,
    pub eval_episodes: usize,
    pub solver: SolveOptions,
}

impl Default for RlConfig {
    fn default() -> Self {
        let l = LampoConfig::default();
        Self {
            gamma: l.gamma,
            chi: l.chi,
            n_per_iter: l.n_per_iter,
            n_iterations: 15,
            eval_episodes: 200,
            solver: l.solver,
        }
    }
}

impl RlConfig {
    pub fn lampo(&self) -> LampoConfig {
        LampoConfig {
            gamma: self.gamma,
            chi: self.chi,
            n_per_iter: self.n_per_iter,
            solver: self.solver.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub n_demos: usize,
    pub env: ReacherConfig,
    pub basis: BasisConfig,
    pub model: ModelConfig,
    pub rl: RlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("lampo-out"),
            n_demos: 200,
            env: ReacherConfig::default(),
            basis: BasisConfig::default(),
            model: ModelConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| LampoError::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.basis.validate()?;
        self.model.em.validate()?;
        self.rl.lampo().validate()?;
        if self.model.k == 0 {
            return Err(LampoError::Config("model.K must be >= 1".into()));
        }
        if self.model.d_z == 0 {
            return Err(LampoError::Config("model.d_z must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.model.held_out_fraction) {
            return Err(LampoError::Config("model.held_out_fraction must be in [0, 1)".into()));
        }
        if self.n_demos == 0 {
            return Err(LampoError::Config("n_demos must be >= 1".into()));
        }
        if self.rl.n_iterations == 0 {
            return Err(LampoError::Config("rl.n_iterations must be >= 1".into()));
        }
        if self.rl.eval_episodes == 0 {
            return Err(LampoError::Config("rl.eval_episodes must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.env.obstacle = Some(crate::reacher::Obstacle {
            center: [0.0, 1.0],
            radius: 0.2,
        });
        cfg.model.k = 2;
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("sede = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[rl]\nchi_bound = 0.1").is_err());
        assert!(ExperimentConfig::from_toml_str("[model]\nK = 3\nd_z = 2\nfoo = 1").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[rl]\nchi = 0.0").is_err());
        assert!(ExperimentConfig::from_toml_str("[rl]\nn_iterations = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("[env]\nn_goal_clusters = 5").is_err());
    }
}
