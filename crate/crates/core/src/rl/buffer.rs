use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{LampoError, Result};
use crate::policy::{LatentPolicy, PolicyParams, Projections};

/// One rollout: the sampled latent pair, the executed movement and its reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub context: Vec<f64>,
    pub component: usize,
    pub latent: Vec<f64>,
    pub movement: Vec<f64>,
    pub reward: f64,
    pub policy_index: usize,
}

impl Episode {
    pub fn context_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.context)
    }
    pub fn latent_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.latent)
    }
}

/// Episodes from all past policies with their log-densities under each of them.
#[derive(Clone, Debug)]
pub struct ExperienceBuffer {
    proj: Projections,
    episodes: Vec<Episode>,
    policies: Vec<PolicyParams>,
    /// `logdens[i][t] = log p_{θ_t}(z_i, k_i | c_i)`.
    logdens: Vec<Vec<f64>>,
}

impl ExperienceBuffer {
    pub fn new(proj: Projections) -> Self {
        Self {
            proj,
            episodes: Vec::new(),
            policies: Vec::new(),
            logdens: Vec::new(),
        }
    }

    pub fn projections(&self) -> &Projections {
        &self.proj
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn policies(&self) -> &[PolicyParams] {
        &self.policies
    }

    pub fn log_density_cache(&self) -> &[Vec<f64>] {
        &self.logdens
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn n_policies(&self) -> usize {
        self.policies.len()
    }

    pub fn contexts(&self) -> Vec<DVector<f64>> {
        self.episodes.iter().map(Episode::context_vec).collect()
    }

    /// Registers the behavior policy of the next iteration and extends every
    /// cached row by its log-density.
    pub fn push_policy(&mut self, theta: PolicyParams) -> Result<usize> {
        let policy = LatentPolicy::new(&self.proj, &theta)?;
        for (ep, row) in self.episodes.iter().zip(self.logdens.iter_mut()) {
            row.push(policy.log_density_unchecked(&ep.latent_vec(), ep.component, &ep.context_vec()));
        }
        self.policies.push(theta);
        Ok(self.policies.len() - 1)
    }

    /// Adds an episode collected with policy `episode.policy_index`.
    pub fn push_episode(&mut self, episode: Episode) -> Result<()> {
        if episode.policy_index >= self.policies.len() {
            return Err(LampoError::Domain(format!(
                "episode references policy {} but only {} are registered",
                episode.policy_index,
                self.policies.len()
            )));
        }
        self.check_episode(&episode)?;
        let row = self.compute_row(&episode)?;
        self.episodes.push(episode);
        self.logdens.push(row);
        Ok(())
    }

    fn check_episode(&self, ep: &Episode) -> Result<()> {
        if ep.context.len() != self.proj.context_dim {
            return Err(LampoError::Dimension {
                what: "episode context",
                expected: self.proj.context_dim,
                got: ep.context.len(),
            });
        }
        if ep.latent.len() != self.proj.latent_dim {
            return Err(LampoError::Dimension {
                what: "episode latent",
                expected: self.proj.latent_dim,
                got: ep.latent.len(),
            });
        }
        if ep.component >= self.proj.n_components() {
            return Err(LampoError::Domain(format!("component index {} out of range", ep.component)));
        }
        if !ep.reward.is_finite() || !ep.context.iter().chain(&ep.latent).all(|v| v.is_finite()) {
            return Err(LampoError::NonFinite("episode"));
        }
        Ok(())
    }

    /// Log-densities of one episode under every registered policy.
    pub fn compute_row(&self, ep: &Episode) -> Result<Vec<f64>> {
        let (z, c) = (ep.latent_vec(), ep.context_vec());
        self.policies
            .iter()
            .map(|theta| Ok(LatentPolicy::new(&self.proj, theta)?.log_density_unchecked(&z, ep.component, &c)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mppca::tests::random_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cache_stays_complete_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 2, 2, 3, 2);
        let proj = Projections::from_model(&model);
        let mut buf = ExperienceBuffer::new(proj.clone());
        let mut theta = PolicyParams::initial(&model);
        for t in 0..3 {
            buf.push_policy(theta.clone()).unwrap();
            let pol = LatentPolicy::new(&proj, &theta).unwrap();
            for _ in 0..5 {
                let c = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let s = pol.sample(&c, &mut rng).unwrap();
                buf.push_episode(Episode {
                    context: c.iter().copied().collect(),
                    component: s.component,
                    latent: s.latent.iter().copied().collect(),
                    movement: s.movement.iter().copied().collect(),
                    reward: rng.random(),
                    policy_index: t,
                })
                .unwrap();
            }
            theta.means[0][0] += 0.3;
            theta.log_vars[1][1] -= 0.2;
        }
        for (ep, row) in buf.episodes().iter().zip(buf.log_density_cache()) {
            assert_eq!(row.len(), 3);
            let fresh = buf.compute_row(ep).unwrap();
            for (a, b) in row.iter().zip(&fresh) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn episode_needs_registered_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 1, 1, 2, 1);
        let mut buf = ExperienceBuffer::new(Projections::from_model(&model));
        let ep = Episode {
            context: vec![0.0],
            component: 0,
            latent: vec![0.0],
            movement: vec![0.0, 0.0],
            reward: 0.0,
            policy_index: 0,
        };
        assert!(buf.push_episode(ep).is_err());
    }
}
