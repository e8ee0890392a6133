//! Latent movement-primitive policy optimization.
//!
//! Demonstrated trajectories are encoded as basis-weight vectors, a mixture
//! of probabilistic PCA is fitted over joint (movement, context) data, and the
//! latent conditional policy is then improved off-policy with self-normalized
//! importance sampling under a KL trust region. A planar two-link reacher
//! serves as the evaluation environment.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod mppca;
pub mod optimizer;
pub mod policy;
pub mod promp;
pub mod reacher;
pub mod rl;

pub use error::{LampoError, Result};
