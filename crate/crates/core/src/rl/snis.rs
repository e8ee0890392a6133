use crate::error::{LampoError, Result};
use crate::linalg::log_sum_exp;
use crate::policy::{LatentPolicy, PolicyParams};

use super::ExperienceBuffer;

/// Log-denominators below this are clamped.
pub const LOG_DENOMINATOR_FLOOR: f64 = -700.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SnisEstimate {
    pub log_ratios: Vec<f64>,
    /// Normalized weights `ρ_i / ν`.
    pub weights: Vec<f64>,
    pub j_hat: f64,
    /// `log ν = log Σ ρ_i`.
    pub log_nu: f64,
    pub ess: f64,
    pub gradient: Option<Vec<f64>>,
}

impl SnisEstimate {
    pub fn nu(&self) -> f64 {
        self.log_nu.exp()
    }
}

fn log_denominators(buffer: &ExperienceBuffer) -> Vec<f64> {
    let ln_t = (buffer.n_policies() as f64).ln();
    buffer
        .log_density_cache()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let v = log_sum_exp(row) - ln_t;
            if v < LOG_DENOMINATOR_FLOOR || v.is_nan() {
                log::warn!("episode {i}: behavior log-density {v} clamped");
                LOG_DENOMINATOR_FLOOR
            } else {
                v
            }
        })
        .collect()
}

/// Log-ratios and, optionally, the log-density gradients of every episode.
fn evaluate(
    buffer: &ExperienceBuffer,
    theta: &PolicyParams,
    with_grad: bool,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
    if buffer.is_empty() {
        return Err(LampoError::InsufficientData("experience buffer is empty".into()));
    }
    let policy = LatentPolicy::new(buffer.projections(), theta)?;
    let denoms = log_denominators(buffer);
    let mut log_ratios = Vec::with_capacity(buffer.len());
    let mut grads = with_grad.then(|| Vec::with_capacity(buffer.len()));
    for (ep, den) in buffer.episodes().iter().zip(&denoms) {
        let (z, c) = (ep.latent_vec(), ep.context_vec());
        let lp = match grads.as_mut() {
            Some(g) => {
                let (v, grad) = policy.log_density_and_grad_unchecked(&z, ep.component, &c);
                g.push(grad);
                v
            }
            None => policy.log_density_unchecked(&z, ep.component, &c),
        };
        log_ratios.push(lp - den);
    }
    Ok((log_ratios, grads))
}

/// Self-normalized estimate of the expected reward under θ, with its gradient on request.
pub fn snis_estimate(buffer: &ExperienceBuffer, theta: &PolicyParams, with_grad: bool) -> Result<SnisEstimate> {
    let (log_ratios, grads) = evaluate(buffer, theta, with_grad)?;
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(LampoError::NonFinite("importance ratios"));
    }
    let scaled: Vec<f64> = log_ratios.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = scaled.iter().sum();
    let weights: Vec<f64> = scaled.iter().map(|s| s / total).collect();
    let weighted: f64 = scaled
        .iter()
        .zip(buffer.episodes())
        .map(|(s, ep)| s * ep.reward)
        .sum();
    let j_hat = weighted / total;
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let gradient = grads.map(|grads| {
        let mut g = vec![0.0; theta.dim()];
        for ((gi, w), ep) in grads.iter().zip(&weights).zip(buffer.episodes()) {
            let a = w * (ep.reward - j_hat);
            for (acc, v) in g.iter_mut().zip(gi) {
                *acc += a * v;
            }
        }
        g
    });
    Ok(SnisEstimate {
        log_nu: max + total.ln(),
        log_ratios,
        weights,
        j_hat,
        ess,
        gradient,
    })
}

/// `ρ_i = p_θ(z_i,k_i|c_i) / ((1/T) Σ_t p_{θ_t}(z_i,k_i|c_i))`.
pub fn importance_ratios(buffer: &ExperienceBuffer, theta: &PolicyParams) -> Result<Vec<f64>> {
    Ok(evaluate(buffer, theta, false)?.0.into_iter().map(f64::exp).collect())
}

pub fn snis_objective(buffer: &ExperienceBuffer, theta: &PolicyParams) -> Result<f64> {
    Ok(snis_estimate(buffer, theta, false)?.j_hat)
}

pub fn snis_gradient(buffer: &ExperienceBuffer, theta: &PolicyParams) -> Result<Vec<f64>> {
    Ok(snis_estimate(buffer, theta, true)?
        .gradient
        .expect("gradient requested"))
}
