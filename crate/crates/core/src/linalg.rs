//! Small dense helpers shared by the density, conditioning and gradient code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{LampoError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `log Σ exp(xs)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights into probabilities in place and returns the log normalizer.
pub fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

/// A symmetric positive-definite matrix held by its Cholesky factor.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl SpdFactor {
    pub fn new(m: DMatrix<f64>, what: &'static str) -> Result<Self> {
        let chol = Cholesky::new(m).ok_or(LampoError::Conditioning(what))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(LampoError::Conditioning(what));
        }
        Ok(Self { chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Mahalanobis form `xᵀ M⁻¹ x` via a triangular solve.
    pub fn quad_inv(&self, x: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let y = l
            .solve_lower_triangular(x)
            .expect("cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    /// Log-density of `N(x | mean, M)` where `self` factors `M`.
    pub fn gaussian_log_pdf(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        -0.5 * (d * LN_2PI + self.log_det + self.quad_inv(&(x - mean)))
    }
}

/// KL(N(m0, S0) ‖ N(m1, S1)) given the factor of `S1`.
pub fn gaussian_kl(
    m0: &DVector<f64>,
    s0: &DMatrix<f64>,
    log_det_s0: f64,
    m1: &DVector<f64>,
    s1: &SpdFactor,
) -> f64 {
    let d = m0.len() as f64;
    let trace = s1.solve_mat(s0).trace();
    let maha = s1.quad_inv(&(m1 - m0));
    0.5 * (trace + maha - d + s1.log_det() - log_det_s0)
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}
