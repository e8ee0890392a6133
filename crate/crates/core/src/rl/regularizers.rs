use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::{gaussian_kl, log_softmax};
use crate::policy::{LatentPolicy, PolicyParams, Projections};

fn same_component(a: &PolicyParams, b: &PolicyParams, k: usize) -> bool {
    a.means[k] == b.means[k] && a.log_vars[k] == b.log_vars[k]
}

/// `η(θ) = Σ_k π_k KL(p_θ(c|k) ‖ p_θ₀(c|k)) + KL(π ‖ π⁰)` and its gradient.
pub fn context_regularizer(
    proj: &Projections,
    theta: &PolicyParams,
    theta0: &PolicyParams,
) -> Result<(f64, Vec<f64>)> {
    let cur = LatentPolicy::new(proj, theta)?;
    let base = LatentPolicy::new(proj, theta0)?;
    let layout = proj.layout();
    let log_pi = log_softmax(&theta.logits);
    let log_pi0 = log_softmax(&theta0.logits);
    let mut grad = vec![0.0; layout.dim()];
    let mut f = vec![0.0; layout.k];
    for k in 0..layout.k {
        let pi = log_pi[k].exp();
        let kl = if same_component(theta, theta0, k) {
            0.0
        } else {
            let (c1, c0) = (&cur.comps[k], &base.comps[k]);
            let kl = gaussian_kl(&c1.ctx_mean, &c1.ctx_cov, c1.ctx_factor.log_det(), &c0.ctx_mean, &c0.ctx_factor)
                .max(0.0);
            let cl = proj.context_loading(k);
            let dmu = cl.transpose() * c0.ctx_factor.solve(&(&c1.ctx_mean - &c0.ctx_mean));
            let p0_inv_c = c0.ctx_factor.solve_mat(cl);
            for d in 0..layout.dz {
                grad[layout.mean(k) + d] = pi * dmu[d];
                let quad0 = cl.column(d).dot(&p0_inv_c.column(d));
                grad[layout.log_var(k) + d] = pi * 0.5 * c1.var[d] * (quad0 - c1.ctx_diag_quad[d]);
            }
            kl
        };
        f[k] = kl + log_pi[k] - log_pi0[k];
    }
    let eta: f64 = (0..layout.k).map(|k| log_pi[k].exp() * f[k]).sum();
    for k in 0..layout.k {
        grad[layout.logit(k)] = log_pi[k].exp() * (f[k] - eta);
    }
    Ok((eta.max(0.0), grad))
}

struct PrevPosterior {
    log_probs: Vec<f64>,
    means: Vec<DVector<f64>>,
}

/// Conditionals of the previous policy at a fixed set of contexts, reused
/// across evaluations of the trust-region constraint.
pub struct TrustRegion<'a> {
    proj: &'a Projections,
    theta_prev: PolicyParams,
    contexts: Vec<DVector<f64>>,
    prev: Vec<PrevPosterior>,
    prev_covs: Vec<DMatrix<f64>>,
    prev_log_dets: Vec<f64>,
}

impl<'a> TrustRegion<'a> {
    pub fn new(proj: &'a Projections, theta_prev: &PolicyParams, contexts: &[DVector<f64>]) -> Result<Self> {
        let pol = LatentPolicy::new(proj, theta_prev)?;
        let prev = contexts
            .iter()
            .map(|c| PrevPosterior {
                log_probs: pol.context_terms(c).1,
                means: (0..proj.n_components()).map(|k| pol.posterior_mean(k, c)).collect(),
            })
            .collect();
        Ok(Self {
            proj,
            theta_prev: theta_prev.clone(),
            contexts: contexts.to_vec(),
            prev,
            prev_covs: pol.comps.iter().map(|c| c.post_cov.clone()).collect(),
            prev_log_dets: pol.comps.iter().map(|c| c.post_factor.log_det()).collect(),
        })
    }

    /// Mean over contexts of `KL(p_prev(z,k|c) ‖ p_θ(z,k|c))` and its gradient in θ.
    pub fn evaluate(&self, theta: &PolicyParams) -> Result<(f64, Vec<f64>)> {
        let layout = self.proj.layout();
        let mut grad = vec![0.0; layout.dim()];
        if self.contexts.is_empty() {
            return Ok((0.0, grad));
        }
        let pol = LatentPolicy::new(self.proj, theta)?;
        let same: Vec<bool> = (0..layout.k).map(|k| same_component(theta, &self.theta_prev, k)).collect();
        let mut total = 0.0;
        for (c, prev) in self.contexts.iter().zip(&self.prev) {
            let (terms, log_r) = pol.context_terms(c);
            let mut g = 0.0;
            for k in 0..layout.k {
                let q = prev.log_probs[k].exp();
                let r = log_r[k].exp();
                grad[layout.logit(k)] += r - q;
                let (dmu_l, dlv_l) = pol.context_marginal_grads(k, &terms[k]);
                for d in 0..layout.dz {
                    grad[layout.mean(k) + d] -= (q - r) * dmu_l[d];
                    grad[layout.log_var(k) + d] -= (q - r) * dlv_l[d];
                }
                if q == 0.0 {
                    continue;
                }
                let mut term = prev.log_probs[k] - log_r[k];
                if !same[k] {
                    let cc = &pol.comps[k];
                    let m = pol.posterior_mean(k, c);
                    let a = &prev.means[k];
                    let kl = gaussian_kl(a, &self.prev_covs[k], self.prev_log_dets[k], &m, &cc.post_factor);
                    term += kl.max(0.0);
                    let delta = &m - a;
                    let mu = &theta.means[k];
                    let cov_prev = &self.prev_covs[k];
                    for d in 0..layout.dz {
                        let v = cc.var[d];
                        grad[layout.mean(k) + d] += q * delta[d] / v;
                        grad[layout.log_var(k) + d] += q
                            * (-(cov_prev[(d, d)] + delta[d] * delta[d] - cc.post_cov[(d, d)]) / (2.0 * v)
                                + delta[d] * (m[d] - mu[d]) / v);
                    }
                }
                g += q * term;
            }
            total += g;
        }
        let n = self.contexts.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        Ok(((total / n).max(0.0), grad))
    }
}

/// Mean trust-region divergence over `contexts` and its gradient.
pub fn trust_region(
    proj: &Projections,
    theta_prev: &PolicyParams,
    theta: &PolicyParams,
    contexts: &[DVector<f64>],
) -> Result<(f64, Vec<f64>)> {
    TrustRegion::new(proj, theta_prev, contexts)?.evaluate(theta)
}
