//! Mixture of probabilistic principal component analyzers over stacked
//! `[ω; c]` vectors.
//!
//! Component `k` generates `x = W_k z + offset_k + ε` with
//! `z ~ N(μ_k, Σ_k)`, `ε ~ N(0, σ_k² I)`, so its marginal is
//! `N(offset_k + W_k μ_k, W_k Σ_k W_kᵀ + σ_k² I)`. The first `movement_dim`
//! rows of `W_k` form the movement loading `Ω_k`, the remaining rows form the
//! context loading `C_k`.

mod em;
mod kmeans;

pub use em::{fit_em, fit_em_pairs, EmFit, EmOptions};
pub use kmeans::kmeans;

use nalgebra::{DMatrix, DVector};

use crate::error::{LampoError, Result};
use crate::linalg::{log_sum_exp, SpdFactor};

pub const NOISE_VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct MppcaComponent {
    /// Mixture weight π_k.
    pub weight: f64,
    /// `D × d_z` stacked loading `[Ω_k; C_k]`.
    pub loading: DMatrix<f64>,
    /// Stacked offset `[ω̄_k; c̄_k]`.
    pub offset: DVector<f64>,
    /// Isotropic noise variance σ_k².
    pub noise_var: f64,
    pub latent_mean: DVector<f64>,
    /// Diagonal of Σ_k.
    pub latent_var: DVector<f64>,
}

impl MppcaComponent {
    pub fn marginal_mean(&self) -> DVector<f64> {
        &self.offset + &self.loading * &self.latent_mean
    }

    /// `W Σ Wᵀ + σ² I`.
    pub fn marginal_cov(&self) -> DMatrix<f64> {
        let scaled = scale_columns(&self.loading, &self.latent_var);
        let mut cov = &scaled * self.loading.transpose();
        for i in 0..cov.nrows() {
            cov[(i, i)] += self.noise_var;
        }
        cov
    }
}

/// `M · diag(d)`.
pub(crate) fn scale_columns(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= d[j];
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MppcaModel {
    pub movement_dim: usize,
    pub context_dim: usize,
    pub latent_dim: usize,
    pub components: Vec<MppcaComponent>,
}

impl MppcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn data_dim(&self) -> usize {
        self.movement_dim + self.context_dim
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Rows of the loading that map the latent to the movement vector.
    pub fn movement_loading(&self, k: usize) -> DMatrix<f64> {
        self.components[k]
            .loading
            .rows(0, self.movement_dim)
            .into_owned()
    }

    pub fn movement_offset(&self, k: usize) -> DVector<f64> {
        self.components[k]
            .offset
            .rows(0, self.movement_dim)
            .into_owned()
    }

    pub fn context_loading(&self, k: usize) -> DMatrix<f64> {
        self.components[k]
            .loading
            .rows(self.movement_dim, self.context_dim)
            .into_owned()
    }

    pub fn context_offset(&self, k: usize) -> DVector<f64> {
        self.components[k]
            .offset
            .rows(self.movement_dim, self.context_dim)
            .into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(LampoError::Config("model has no components".into()));
        }
        let d = self.data_dim();
        let mut total = 0.0;
        for c in &self.components {
            if c.loading.nrows() != d || c.offset.len() != d {
                return Err(LampoError::Dimension {
                    what: "component data dimension",
                    expected: d,
                    got: c.loading.nrows().min(c.offset.len()),
                });
            }
            if c.loading.ncols() != self.latent_dim
                || c.latent_mean.len() != self.latent_dim
                || c.latent_var.len() != self.latent_dim
            {
                return Err(LampoError::Dimension {
                    what: "component latent dimension",
                    expected: self.latent_dim,
                    got: c.loading.ncols(),
                });
            }
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(LampoError::Config(format!("invalid mixture weight {}", c.weight)));
            }
            if !(c.noise_var >= NOISE_VAR_FLOOR) || !c.noise_var.is_finite() {
                return Err(LampoError::Config(format!("invalid noise variance {}", c.noise_var)));
            }
            if c.latent_var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(LampoError::Config("latent variances must be positive".into()));
            }
            let finite = c
                .loading
                .iter()
                .chain(c.offset.iter())
                .chain(c.latent_mean.iter())
                .all(|v| v.is_finite());
            if !finite {
                return Err(LampoError::NonFinite("model parameters"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(LampoError::Config(format!("mixture weights sum to {total}")));
        }
        Ok(())
    }

    /// Precomputes per-component factors for repeated evaluation.
    pub fn density(&self) -> Result<MppcaDensity> {
        let comps = self
            .components
            .iter()
            .map(|c| {
                Ok((
                    c.weight.ln(),
                    c.marginal_mean(),
                    SpdFactor::new(c.marginal_cov(), "component covariance")?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MppcaDensity {
            dim: self.data_dim(),
            comps,
        })
    }

    pub fn log_joint_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.density()?.log_density(x)
    }

    pub fn joint_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_joint_density(x)?.exp())
    }

    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.density()?.responsibilities(x)
    }

    /// Total log-likelihood of `N × D` row data.
    pub fn log_likelihood(&self, data: &DMatrix<f64>) -> Result<f64> {
        self.density()?.log_likelihood(data)
    }
}

/// Factored form of an [`MppcaModel`] for density evaluation.
#[derive(Clone, Debug)]
pub struct MppcaDensity {
    dim: usize,
    comps: Vec<(f64, DVector<f64>, SpdFactor)>,
}

impl MppcaDensity {
    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(LampoError::Dimension {
                what: "joint data vector",
                expected: self.dim,
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(LampoError::NonFinite("joint data vector"));
        }
        Ok(())
    }

    /// `log π_k + log N(x | mean_k, cov_k)` per component.
    pub fn component_log_joint(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self
            .comps
            .iter()
            .map(|(lw, mean, f)| lw + f.gaussian_log_pdf(x, mean))
            .collect())
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_joint(x)?))
    }

    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let mut lj = self.component_log_joint(x)?;
        crate::linalg::softmax_in_place(&mut lj);
        Ok(lj)
    }

    pub fn log_likelihood(&self, data: &DMatrix<f64>) -> Result<f64> {
        let mut total = 0.0;
        for row in data.row_iter() {
            total += self.log_density(&row.transpose())?;
        }
        Ok(total)
    }
}
