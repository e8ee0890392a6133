//! Off-policy improvement of the latent policy.
//!
//! All episodes from every past policy stay in the buffer. Importance
//! ratios use the equal-weight mixture of the behavior policies as the
//! denominator, the objective is the self-normalized estimate of the
//! expected reward minus a context regularizer, and each update is bounded
//! by a KL trust region around the previous policy.

mod buffer;
mod improve;
mod regularizers;
mod snis;

pub use buffer::{Episode, ExperienceBuffer};
pub use improve::{improve, objective_value, ImproveOutcome, LampoConfig};
pub use regularizers::{context_regularizer, trust_region, TrustRegion};
pub use snis::{importance_ratios, snis_estimate, snis_gradient, snis_objective, SnisEstimate};

#[cfg(test)]
mod tests;
