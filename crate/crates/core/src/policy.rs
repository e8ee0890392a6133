//! Conditional latent policy `p_θ(z, k | c)`.
//!
//! The projection part of a fitted mixture (`Ω_k`, `ω̄_k`, `C_k`, `c̄_k`,
//! `σ_k²`) stays fixed; the trainable parameters θ are the mixture logits,
//! the latent means `μ_k` and the log-diagonal latent variances.
//!
//! Given a context, the component posterior is
//! `p(k|c) ∝ π_k N(c | C_k μ_k + c̄_k, σ_k² I + C_k Σ_k C_kᵀ)` and the latent
//! posterior is Gaussian with precision `Σ_k⁻¹ + σ_k⁻² C_kᵀ C_k` and mean
//! `S_k (σ_k⁻² C_kᵀ (c − c̄_k) + Σ_k⁻¹ μ_k)`. The log-density used for
//! importance weights and gradients is evaluated through the factorization
//! `log p(c|z,k) + log p(z|k) + log π_k − log Σ_j π_j p(c|j)`, which needs
//! only the small `d_c × d_c` context covariances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LampoError, Result};
use crate::linalg::{log_softmax, log_sum_exp, SpdFactor, LN_2PI};
use crate::mppca::MppcaModel;

/// Below this, `max_k log(π_k p(c|k))` is treated as zero probability mass.
pub const SUPPORT_LOG_FLOOR: f64 = -700.0;

/// Trainable policy parameters θ.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub logits: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub log_vars: Vec<DVector<f64>>,
}

impl PolicyParams {
    /// θ₀: the fitted mixture weights with `μ_k = 0`, `Σ_k = I`.
    pub fn initial(model: &MppcaModel) -> Self {
        let dz = model.latent_dim;
        Self {
            logits: model
                .components
                .iter()
                .map(|c| c.weight.max(1e-300).ln())
                .collect(),
            means: vec![DVector::zeros(dz); model.n_components()],
            log_vars: vec![DVector::zeros(dz); model.n_components()],
        }
    }

    /// Reads θ from the latent Gaussian fields stored in a model.
    pub fn from_model(model: &MppcaModel) -> Self {
        Self {
            logits: model
                .components
                .iter()
                .map(|c| c.weight.max(1e-300).ln())
                .collect(),
            means: model.components.iter().map(|c| c.latent_mean.clone()).collect(),
            log_vars: model
                .components
                .iter()
                .map(|c| c.latent_var.map(f64::ln))
                .collect(),
        }
    }

    pub fn n_components(&self) -> usize {
        self.logits.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn dim(&self) -> usize {
        param_dim(self.n_components(), self.latent_dim())
    }

    pub fn weights(&self) -> Vec<f64> {
        crate::linalg::softmax(&self.logits)
    }

    pub fn variances(&self, k: usize) -> DVector<f64> {
        self.log_vars[k].map(f64::exp)
    }

    /// Flat layout: logits, then every μ_k, then every log-variance vector.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.logits.clone();
        for m in &self.means {
            v.extend(m.iter());
        }
        for l in &self.log_vars {
            v.extend(l.iter());
        }
        v
    }

    pub fn from_slice(v: &[f64], k: usize, dz: usize) -> Result<Self> {
        if v.len() != param_dim(k, dz) {
            return Err(LampoError::Dimension {
                what: "policy parameter vector",
                expected: param_dim(k, dz),
                got: v.len(),
            });
        }
        let logits = v[..k].to_vec();
        let means = (0..k)
            .map(|j| DVector::from_column_slice(&v[k + j * dz..k + (j + 1) * dz]))
            .collect();
        let off = k + k * dz;
        let log_vars = (0..k)
            .map(|j| DVector::from_column_slice(&v[off + j * dz..off + (j + 1) * dz]))
            .collect();
        Ok(Self {
            logits,
            means,
            log_vars,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_components();
        let dz = self.latent_dim();
        if k == 0 || self.means.len() != k || self.log_vars.len() != k {
            return Err(LampoError::Dimension {
                what: "policy components",
                expected: k,
                got: self.means.len().min(self.log_vars.len()),
            });
        }
        if self.means.iter().chain(&self.log_vars).any(|v| v.len() != dz) {
            return Err(LampoError::Dimension {
                what: "policy latent dimension",
                expected: dz,
                got: 0,
            });
        }
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(LampoError::NonFinite("policy parameters"));
        }
        Ok(())
    }
}

pub fn param_dim(k: usize, dz: usize) -> usize {
    k + 2 * k * dz
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct ParamLayout {
    pub k: usize,
    pub dz: usize,
}

impl ParamLayout {
    pub fn logit(&self, j: usize) -> usize {
        j
    }
    pub fn mean(&self, j: usize) -> usize {
        self.k + j * self.dz
    }
    pub fn log_var(&self, j: usize) -> usize {
        self.k + self.k * self.dz + j * self.dz
    }
    pub fn dim(&self) -> usize {
        param_dim(self.k, self.dz)
    }
}

#[derive(Clone, Debug)]
struct ProjComponent {
    context_loading: DMatrix<f64>,
    context_offset: DVector<f64>,
    movement_loading: DMatrix<f64>,
    movement_offset: DVector<f64>,
    noise_var: f64,
    /// `σ⁻² Cᵀ C`.
    scaled_ctc: DMatrix<f64>,
}

/// Fixed projection part of a fitted mixture.
#[derive(Clone, Debug)]
pub struct Projections {
    pub movement_dim: usize,
    pub context_dim: usize,
    pub latent_dim: usize,
    comps: Vec<ProjComponent>,
}

impl Projections {
    pub fn from_model(model: &MppcaModel) -> Self {
        let comps = (0..model.n_components())
            .map(|k| {
                let c = model.context_loading(k);
                let noise_var = model.components[k].noise_var;
                ProjComponent {
                    scaled_ctc: c.transpose() * &c / noise_var,
                    context_loading: c,
                    context_offset: model.context_offset(k),
                    movement_loading: model.movement_loading(k),
                    movement_offset: model.movement_offset(k),
                    noise_var,
                }
            })
            .collect();
        Self {
            movement_dim: model.movement_dim,
            context_dim: model.context_dim,
            latent_dim: model.latent_dim,
            comps,
        }
    }

    pub fn n_components(&self) -> usize {
        self.comps.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            k: self.n_components(),
            dz: self.latent_dim,
        }
    }

    pub fn context_loading(&self, k: usize) -> &DMatrix<f64> {
        &self.comps[k].context_loading
    }

    pub fn context_offset(&self, k: usize) -> &DVector<f64> {
        &self.comps[k].context_offset
    }

    pub fn noise_var(&self, k: usize) -> f64 {
        self.comps[k].noise_var
    }

    /// `ω = Ω_k z + ω̄_k`.
    pub fn movement(&self, k: usize, z: &DVector<f64>) -> DVector<f64> {
        let p = &self.comps[k];
        &p.movement_loading * z + &p.movement_offset
    }

    fn check_theta(&self, theta: &PolicyParams) -> Result<()> {
        theta.validate()?;
        if theta.n_components() != self.n_components() {
            return Err(LampoError::Dimension {
                what: "policy components",
                expected: self.n_components(),
                got: theta.n_components(),
            });
        }
        if theta.latent_dim() != self.latent_dim {
            return Err(LampoError::Dimension {
                what: "policy latent dimension",
                expected: self.latent_dim,
                got: theta.latent_dim(),
            });
        }
        Ok(())
    }
}

/// Context-independent per-component quantities for a fixed θ.
#[derive(Clone, Debug)]
pub(crate) struct ComponentCache {
    pub var: DVector<f64>,
    /// Context marginal mean `C μ + c̄`.
    pub ctx_mean: DVector<f64>,
    /// Context marginal covariance `σ² I + C Σ Cᵀ`.
    pub ctx_cov: DMatrix<f64>,
    pub ctx_factor: SpdFactor,
    /// `C_dᵀ P⁻¹ C_d` for every latent coordinate d.
    pub ctx_diag_quad: DVector<f64>,
    /// Posterior covariance `S`.
    pub post_cov: DMatrix<f64>,
    pub post_factor: SpdFactor,
    pub post_chol: DMatrix<f64>,
    /// `σ⁻² S Cᵀ`.
    pub gain: DMatrix<f64>,
    /// `S Σ⁻¹ μ`.
    pub prior_pull: DVector<f64>,
}

/// Per-context quantities for one component.
#[derive(Clone, Debug)]
pub(crate) struct ContextTerm {
    /// `log N(c | C μ + c̄, P)`.
    pub log_marginal: f64,
    /// `P⁻¹ (c − C μ − c̄)`.
    pub alpha: DVector<f64>,
}

/// The conditional policy for one θ over fixed projections.
#[derive(Clone, Debug)]
pub struct LatentPolicy<'a> {
    proj: &'a Projections,
    theta: PolicyParams,
    log_weights: Vec<f64>,
    pub(crate) comps: Vec<ComponentCache>,
}

/// `p(k|c)` and the per-component Gaussian posteriors over z.
#[derive(Clone, Debug)]
pub struct ConditionalPosterior {
    pub comp_probs: Vec<f64>,
    pub log_comp_probs: Vec<f64>,
    pub post_means: Vec<DVector<f64>>,
    pub post_covs: Vec<DMatrix<f64>>,
}

/// One policy draw.
#[derive(Clone, Debug)]
pub struct MovementSample {
    pub component: usize,
    pub latent: DVector<f64>,
    pub movement: DVector<f64>,
}

impl<'a> LatentPolicy<'a> {
    pub fn new(proj: &'a Projections, theta: &PolicyParams) -> Result<Self> {
        proj.check_theta(theta)?;
        let dz = proj.latent_dim;
        let mut comps = Vec::with_capacity(proj.n_components());
        for (k, p) in proj.comps.iter().enumerate() {
            let var = theta.variances(k);
            if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(LampoError::Conditioning("latent variance"));
            }
            let c = &p.context_loading;
            let cs = crate::mppca::scale_columns(c, &var);
            let mut ctx_cov = &cs * c.transpose();
            for i in 0..ctx_cov.nrows() {
                ctx_cov[(i, i)] += p.noise_var;
            }
            let ctx_factor = SpdFactor::new(ctx_cov.clone(), "context marginal covariance")?;
            let p_inv_c = ctx_factor.solve_mat(c);
            let ctx_diag_quad =
                DVector::from_fn(dz, |d, _| c.column(d).dot(&p_inv_c.column(d)));
            let mut precision = p.scaled_ctc.clone();
            for d in 0..dz {
                precision[(d, d)] += 1.0 / var[d];
            }
            let prec_factor = SpdFactor::new(precision, "latent posterior precision")?;
            let post_cov = prec_factor.inverse();
            let post_cov = (&post_cov + post_cov.transpose()) * 0.5;
            let post_factor = SpdFactor::new(post_cov.clone(), "latent posterior covariance")?;
            let post_chol = post_factor.l();
            let gain = &post_cov * c.transpose() / p.noise_var;
            let prior_pull = &post_cov * theta.means[k].component_div(&var);
            comps.push(ComponentCache {
                ctx_mean: c * &theta.means[k] + &p.context_offset,
                ctx_cov,
                ctx_factor,
                ctx_diag_quad,
                post_cov,
                post_factor,
                post_chol,
                gain,
                prior_pull,
                var,
            });
        }
        Ok(Self {
            proj,
            log_weights: log_softmax(&theta.logits),
            theta: theta.clone(),
            comps,
        })
    }

    pub fn theta(&self) -> &PolicyParams {
        &self.theta
    }

    pub fn projections(&self) -> &Projections {
        self.proj
    }

    fn check_context(&self, c: &DVector<f64>) -> Result<()> {
        if c.len() != self.proj.context_dim {
            return Err(LampoError::Dimension {
                what: "context",
                expected: self.proj.context_dim,
                got: c.len(),
            });
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(LampoError::NonFinite("context"));
        }
        Ok(())
    }

    pub(crate) fn context_term(&self, k: usize, c: &DVector<f64>) -> ContextTerm {
        let cc = &self.comps[k];
        let e = c - &cc.ctx_mean;
        let alpha = cc.ctx_factor.solve(&e);
        let d = c.len() as f64;
        let log_marginal = -0.5 * (d * LN_2PI + cc.ctx_factor.log_det() + e.dot(&alpha));
        ContextTerm { log_marginal, alpha }
    }

    /// Context terms for every component plus `log p(k|c)`.
    pub(crate) fn context_terms(&self, c: &DVector<f64>) -> (Vec<ContextTerm>, Vec<f64>) {
        let terms: Vec<ContextTerm> = (0..self.comps.len()).map(|k| self.context_term(k, c)).collect();
        let joint: Vec<f64> = terms
            .iter()
            .zip(&self.log_weights)
            .map(|(t, lw)| lw + t.log_marginal)
            .collect();
        let lse = log_sum_exp(&joint);
        let log_probs = joint.iter().map(|j| j - lse).collect();
        (terms, log_probs)
    }

    /// Posterior mean of z for component k at context c.
    pub(crate) fn posterior_mean(&self, k: usize, c: &DVector<f64>) -> DVector<f64> {
        let cc = &self.comps[k];
        &cc.gain * (c - &self.proj.comps[k].context_offset) + &cc.prior_pull
    }

    /// `log p(k|c)` for every component.
    pub fn log_component_probs(&self, c: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_context(c)?;
        let (terms, log_probs) = self.context_terms(c);
        let max = terms
            .iter()
            .zip(&self.log_weights)
            .map(|(t, lw)| lw + t.log_marginal)
            .fold(f64::NEG_INFINITY, f64::max);
        if !(max > SUPPORT_LOG_FLOOR) {
            return Err(LampoError::OutOfSupport { max_log_density: max });
        }
        Ok(log_probs)
    }

    pub fn condition(&self, c: &DVector<f64>) -> Result<ConditionalPosterior> {
        let log_comp_probs = self.log_component_probs(c)?;
        Ok(ConditionalPosterior {
            comp_probs: log_comp_probs.iter().map(|l| l.exp()).collect(),
            log_comp_probs,
            post_means: (0..self.comps.len()).map(|k| self.posterior_mean(k, c)).collect(),
            post_covs: self.comps.iter().map(|cc| cc.post_cov.clone()).collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, c: &DVector<f64>, rng: &mut R) -> Result<MovementSample> {
        let log_probs = self.log_component_probs(c)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = log_probs.len() - 1;
        for (j, lp) in log_probs.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                k = j;
                break;
            }
        }
        let eps = DVector::from_fn(self.proj.latent_dim, |_, _| StandardNormal.sample(rng));
        let z = self.posterior_mean(k, c) + &self.comps[k].post_chol * eps;
        let movement = self.proj.movement(k, &z);
        Ok(MovementSample {
            component: k,
            latent: z,
            movement,
        })
    }

    fn check_latent(&self, z: &DVector<f64>, k: usize) -> Result<()> {
        if k >= self.comps.len() {
            return Err(LampoError::Domain(format!("component index {k} out of range")));
        }
        if z.len() != self.proj.latent_dim {
            return Err(LampoError::Dimension {
                what: "latent",
                expected: self.proj.latent_dim,
                got: z.len(),
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(LampoError::NonFinite("latent"));
        }
        Ok(())
    }

    /// `log p(c | z, k) + log p(z | k)`, the terms that do not involve the normalizer.
    fn log_joint_given_k(&self, z: &DVector<f64>, k: usize, c: &DVector<f64>) -> f64 {
        let p = &self.proj.comps[k];
        let cc = &self.comps[k];
        let dc = c.len() as f64;
        let resid = c - (&p.context_loading * z + &p.context_offset);
        let log_c = -0.5 * (dc * (LN_2PI + p.noise_var.ln()) + resid.norm_squared() / p.noise_var);
        let dz = z.len() as f64;
        let dev = z - &self.theta.means[k];
        let maha: f64 = dev.iter().zip(cc.var.iter()).map(|(d, v)| d * d / v).sum();
        let log_det: f64 = self.theta.log_vars[k].sum();
        let log_z = -0.5 * (dz * LN_2PI + log_det + maha);
        log_c + log_z
    }

    /// `log p_θ(z, k | c)`.
    pub fn log_density(&self, z: &DVector<f64>, k: usize, c: &DVector<f64>) -> Result<f64> {
        self.check_context(c)?;
        self.check_latent(z, k)?;
        Ok(self.log_density_unchecked(z, k, c))
    }

    pub(crate) fn log_density_unchecked(&self, z: &DVector<f64>, k: usize, c: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = (0..self.comps.len())
            .map(|j| self.log_weights[j] + self.context_term(j, c).log_marginal)
            .collect();
        self.log_joint_given_k(z, k, c) + self.log_weights[k] - log_sum_exp(&terms)
    }

    /// Log-density and its gradient with respect to the flat θ.
    pub fn log_density_and_grad(
        &self,
        z: &DVector<f64>,
        k: usize,
        c: &DVector<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_context(c)?;
        self.check_latent(z, k)?;
        Ok(self.log_density_and_grad_unchecked(z, k, c))
    }

    pub(crate) fn log_density_and_grad_unchecked(
        &self,
        z: &DVector<f64>,
        k: usize,
        c: &DVector<f64>,
    ) -> (f64, Vec<f64>) {
        let layout = self.proj.layout();
        let dz = layout.dz;
        let mut grad = vec![0.0; layout.dim()];
        let (terms, log_probs) = self.context_terms(c);
        let value = self.log_joint_given_k(z, k, c) + log_probs[k] - terms[k].log_marginal;

        for (j, (term, lp)) in terms.iter().zip(&log_probs).enumerate() {
            let r = lp.exp();
            grad[layout.logit(j)] = if j == k { 1.0 } else { 0.0 } - r;
            let (dmu, dlv) = self.context_marginal_grads(j, term);
            for d in 0..dz {
                grad[layout.mean(j) + d] -= r * dmu[d];
                grad[layout.log_var(j) + d] -= r * dlv[d];
            }
        }
        let var = &self.comps[k].var;
        for d in 0..dz {
            let dev = z[d] - self.theta.means[k][d];
            grad[layout.mean(k) + d] += dev / var[d];
            grad[layout.log_var(k) + d] += 0.5 * (dev * dev / var[d] - 1.0);
        }
        (value, grad)
    }

    pub fn grad_log_density(&self, z: &DVector<f64>, k: usize, c: &DVector<f64>) -> Result<Vec<f64>> {
        Ok(self.log_density_and_grad(z, k, c)?.1)
    }

    /// Gradients of `log N(c | C_j μ_j + c̄_j, P_j)` with respect to μ_j and
    /// the log-variances of component j.
    pub(crate) fn context_marginal_grads(&self, j: usize, term: &ContextTerm) -> (DVector<f64>, DVector<f64>) {
        let c = &self.proj.comps[j].context_loading;
        let cc = &self.comps[j];
        let ct_alpha = c.transpose() * &term.alpha;
        let dlv = DVector::from_fn(ct_alpha.len(), |d, _| {
            0.5 * cc.var[d] * (ct_alpha[d] * ct_alpha[d] - cc.ctx_diag_quad[d])
        });
        (ct_alpha, dlv)
    }

    #[cfg(test)]
    pub(crate) fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }
}
