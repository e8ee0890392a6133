use serde::{Deserialize, Serialize};

use crate::error::{LampoError, Result};
use crate::optimizer::{solve, NlpProblem, SolveOptions, SolveReport};
use crate::policy::{PolicyParams, Projections};

use super::regularizers::{context_regularizer, TrustRegion};
use super::snis::snis_estimate;
use super::ExperienceBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LampoConfig {
    /// Weight of the context regularizer.
    pub gamma: f64,
    /// Trust-region bound on the mean KL to the previous policy.
    pub chi: f64,
    pub n_per_iter: usize,
    pub solver: SolveOptions,
}

impl Default for LampoConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            chi: 0.2,
            n_per_iter: 50,
            solver: SolveOptions::default(),
        }
    }
}

impl LampoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(LampoError::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.chi > 0.0) || !self.chi.is_finite() {
            return Err(LampoError::Config(format!("chi must be finite and > 0, got {}", self.chi)));
        }
        if self.n_per_iter == 0 {
            return Err(LampoError::Config("n_per_iter must be >= 1".into()));
        }
        if self.solver.max_iters == 0 {
            return Err(LampoError::Config("solver.max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImproveOutcome {
    pub theta: PolicyParams,
    pub accepted: bool,
    pub j_hat: f64,
    pub eta: f64,
    pub mean_g: f64,
    pub ess: f64,
    pub nu: f64,
    pub objective: f64,
    pub report: SolveReport,
}

struct RlProblem<'a> {
    buffer: &'a ExperienceBuffer,
    theta0: &'a PolicyParams,
    trust: TrustRegion<'a>,
    gamma: f64,
    chi: f64,
    k: usize,
    dz: usize,
}

impl RlProblem<'_> {
    fn theta(&self, x: &[f64]) -> Option<PolicyParams> {
        PolicyParams::from_slice(x, self.k, self.dz).ok()
    }

    fn objective_checked(&self, theta: &PolicyParams) -> Result<(f64, Vec<f64>)> {
        let est = snis_estimate(self.buffer, theta, true)?;
        let (eta, eta_grad) = context_regularizer(self.buffer.projections(), theta, self.theta0)?;
        let mut grad = est.gradient.expect("gradient requested");
        for (g, e) in grad.iter_mut().zip(&eta_grad) {
            *g -= self.gamma * e;
        }
        Ok((est.j_hat - self.gamma * eta, grad))
    }
}

fn nan_pair(n: usize) -> (f64, Vec<f64>) {
    (f64::NAN, vec![f64::NAN; n])
}

impl NlpProblem for RlProblem<'_> {
    fn dim(&self) -> usize {
        crate::policy::param_dim(self.k, self.dz)
    }
    fn objective(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.theta(x)
            .and_then(|t| self.objective_checked(&t).ok())
            .unwrap_or_else(|| nan_pair(x.len()))
    }
    fn constraint(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.theta(x)
            .and_then(|t| self.trust.evaluate(&t).ok())
            .unwrap_or_else(|| nan_pair(x.len()))
    }
    fn bound(&self) -> f64 {
        self.chi
    }
}

/// `Ĵ(θ) − γ η(θ)` for θ on the buffer.
pub fn objective_value(
    buffer: &ExperienceBuffer,
    theta: &PolicyParams,
    theta0: &PolicyParams,
    gamma: f64,
) -> Result<f64> {
    let j = snis_estimate(buffer, theta, false)?.j_hat;
    let (eta, _) = context_regularizer(buffer.projections(), theta, theta0)?;
    Ok(j - gamma * eta)
}

/// One constrained update from `theta_t`. Falls back to `theta_t` whenever
/// the solver result is not both feasible and no worse than the start.
pub fn improve(
    buffer: &ExperienceBuffer,
    theta_t: &PolicyParams,
    theta0: &PolicyParams,
    config: &LampoConfig,
) -> Result<ImproveOutcome> {
    config.validate()?;
    let proj: &Projections = buffer.projections();
    let contexts = buffer.contexts();
    let problem = RlProblem {
        buffer,
        theta0,
        trust: TrustRegion::new(proj, theta_t, &contexts)?,
        gamma: config.gamma,
        chi: config.chi,
        k: theta_t.n_components(),
        dz: theta_t.latent_dim(),
    };
    let x0 = theta_t.to_vec();
    let obj0 = problem.objective_checked(theta_t)?.0;
    let report = solve(&problem, &x0, &config.solver);

    let point = |alpha: f64| -> (Vec<f64>, f64, f64) {
        let x: Vec<f64> = x0
            .iter()
            .zip(&report.x_star)
            .map(|(a, b)| a + alpha * (b - a))
            .collect();
        let f = problem.objective(&x).0;
        let g = problem.constraint(&x).0;
        (x, f, g)
    };
    let good = |f: f64, g: f64, slack: f64| f.is_finite() && g.is_finite() && g <= config.chi + slack && f >= obj0 - 1e-8;
    let mut candidate = None;
    if report.x_star.iter().all(|v| v.is_finite()) {
        // Pull a slightly infeasible solver point back along the segment to
        // θ_T, where the divergence shrinks roughly quadratically.
        let mut alpha = 1.0;
        for _ in 0..30 {
            let (x, f, g) = point(alpha);
            if good(f, g, 0.0) {
                candidate = Some(x);
                break;
            }
            alpha *= 0.5;
        }
        if candidate.is_none() {
            let (x, f, g) = point(1.0);
            if good(f, g, 1e-4) {
                candidate = Some(x);
            }
        }
    }

    let (theta, accepted) = match candidate {
        Some(x) => (PolicyParams::from_slice(&x, theta_t.n_components(), theta_t.latent_dim())?, true),
        None => {
            log::warn!(
                "update rejected ({}: {}); keeping previous policy",
                report.status,
                report.message
            );
            (theta_t.clone(), false)
        }
    };
    let est = snis_estimate(buffer, &theta, false)?;
    let (eta, _) = context_regularizer(proj, &theta, theta0)?;
    let (mean_g, _) = problem.trust.evaluate(&theta)?;
    Ok(ImproveOutcome {
        objective: est.j_hat - config.gamma * eta,
        j_hat: est.j_hat,
        eta,
        mean_g,
        ess: est.ess,
        nu: est.nu(),
        theta,
        accepted,
        report,
    })
}
