use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LampoError, Result};
use crate::mppca::{MppcaComponent, MppcaModel};
use crate::policy::PolicyParams;
use crate::promp::BasisConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentRecord {
    pub weight: f64,
    /// Row-major `D × d_z` loading.
    pub loading: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub noise_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecord {
    pub movement_dim: usize,
    pub context_dim: usize,
    pub latent_dim: usize,
    pub components: Vec<ComponentRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRecord {
    pub logits: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub log_vars: Vec<Vec<f64>>,
}

impl From<&PolicyParams> for PolicyRecord {
    fn from(t: &PolicyParams) -> Self {
        Self {
            logits: t.logits.clone(),
            means: t.means.iter().map(|m| m.iter().copied().collect()).collect(),
            log_vars: t.log_vars.iter().map(|m| m.iter().copied().collect()).collect(),
        }
    }
}

impl PolicyRecord {
    pub fn to_params(&self) -> Result<PolicyParams> {
        let theta = PolicyParams {
            logits: self.logits.clone(),
            means: self.means.iter().map(|m| DVector::from_column_slice(m)).collect(),
            log_vars: self.log_vars.iter().map(|m| DVector::from_column_slice(m)).collect(),
        };
        theta.validate()?;
        Ok(theta)
    }
}

/// Serialized mixture plus the current policy parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub basis: BasisConfig,
    pub n_joints: usize,
    pub mixture: MixtureRecord,
    pub policy: PolicyRecord,
    /// Number of improvement iterations behind `policy`.
    pub iteration: usize,
    pub train_log_likelihood: f64,
    pub held_out_log_likelihood: Option<f64>,
}

impl ModelFile {
    pub fn new(model: &MppcaModel, theta: &PolicyParams, basis: &BasisConfig, n_joints: usize) -> Self {
        let components = model
            .components
            .iter()
            .map(|c| ComponentRecord {
                weight: c.weight,
                loading: c.loading.row_iter().map(|r| r.iter().copied().collect()).collect(),
                offset: c.offset.iter().copied().collect(),
                noise_var: c.noise_var,
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            basis: basis.clone(),
            n_joints,
            mixture: MixtureRecord {
                movement_dim: model.movement_dim,
                context_dim: model.context_dim,
                latent_dim: model.latent_dim,
                components,
            },
            policy: theta.into(),
            iteration: 0,
            train_log_likelihood: f64::NAN,
            held_out_log_likelihood: None,
        }
    }

    pub fn model(&self) -> Result<MppcaModel> {
        let m = &self.mixture;
        let d = m.movement_dim + m.context_dim;
        let components = m
            .components
            .iter()
            .map(|c| {
                if c.loading.len() != d || c.loading.iter().any(|r| r.len() != m.latent_dim) {
                    return Err(LampoError::Format("loading has the wrong shape".into()));
                }
                Ok(MppcaComponent {
                    weight: c.weight,
                    loading: DMatrix::from_fn(d, m.latent_dim, |i, j| c.loading[i][j]),
                    offset: DVector::from_column_slice(&c.offset),
                    noise_var: c.noise_var,
                    latent_mean: DVector::zeros(m.latent_dim),
                    latent_var: DVector::from_element(m.latent_dim, 1.0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = MppcaModel {
            movement_dim: m.movement_dim,
            context_dim: m.context_dim,
            latent_dim: m.latent_dim,
            components,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn policy(&self) -> Result<PolicyParams> {
        self.policy.to_params()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let version: serde_json::Value = serde_json::from_str(&text)?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(LampoError::Format(format!(
                    "{}: format_version {v}, expected {FORMAT_VERSION}",
                    path.display()
                )))
            }
            None => return Err(LampoError::Format(format!("{}: missing format_version", path.display()))),
        }
        let file: Self = serde_json::from_str(&text)?;
        file.model()?;
        file.policy()?;
        Ok(file)
    }
}
