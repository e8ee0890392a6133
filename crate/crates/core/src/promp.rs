//! Trajectory codec: normalized Gaussian radial basis functions over a phase
//! variable in `[0, 1]`, fitted per joint by ridge regression. The parameter
//! vector carries one extra slot holding the movement duration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LampoError, Result};
use crate::linalg::SpdFactor;

/// Time-stamped joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    /// `T × d_joints`, radians.
    positions: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, positions: DMatrix<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(LampoError::InvalidTrajectory(format!(
                "need at least 2 samples, got {}",
                times.len()
            )));
        }
        if positions.nrows() != times.len() {
            return Err(LampoError::Dimension {
                what: "trajectory rows",
                expected: times.len(),
                got: positions.nrows(),
            });
        }
        if positions.ncols() == 0 {
            return Err(LampoError::InvalidTrajectory("no joints".into()));
        }
        if !times.iter().chain(positions.iter()).all(|v| v.is_finite()) {
            return Err(LampoError::NonFinite("trajectory"));
        }
        if times[0] < 0.0 {
            return Err(LampoError::InvalidTrajectory("negative start time".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LampoError::InvalidTrajectory(
                "times must be strictly increasing".into(),
            ));
        }
        Ok(Self { times, positions })
    }

    /// Builds from `(t, q_1..q_d)` rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len().saturating_sub(1));
        let mut times = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.len() != d + 1 {
                return Err(LampoError::Dimension {
                    what: "trajectory row width",
                    expected: d + 1,
                    got: row.len(),
                });
            }
            times.push(row[0]);
            data.extend_from_slice(&row[1..]);
        }
        Self::new(times, DMatrix::from_row_slice(rows.len(), d, &data))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let mut row = vec![self.times[i]];
                row.extend(self.positions.row(i).iter());
                row
            })
            .collect()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_joints(&self) -> usize {
        self.positions.ncols()
    }

    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    pub fn final_position(&self) -> Vec<f64> {
        self.positions.row(self.len() - 1).iter().copied().collect()
    }
}

fn default_ridge() -> f64 {
    1e-6
}

fn default_min_duration() -> f64 {
    0.1
}

fn default_max_duration() -> f64 {
    30.0
}

/// Basis layout. Centers are evenly spaced over `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub n_basis: usize,
    /// Gaussian bandwidth in phase units; defaults to the center spacing.
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default = "default_ridge")]
    pub ridge_lambda: f64,
    #[serde(default = "default_min_duration")]
    pub min_duration: f64,
    #[serde(default = "default_max_duration")]
    pub max_duration: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self::with_basis(20)
    }
}

impl BasisConfig {
    pub fn with_basis(n_basis: usize) -> Self {
        Self {
            n_basis,
            width: None,
            ridge_lambda: default_ridge(),
            min_duration: default_min_duration(),
            max_duration: default_max_duration(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_basis == 0 {
            return Err(LampoError::Config("n_basis must be at least 1".into()));
        }
        let w = self.width();
        if !(w > 0.0 && w.is_finite()) {
            return Err(LampoError::Config(format!("basis width must be > 0, got {w}")));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(LampoError::Config("ridge_lambda must be >= 0".into()));
        }
        if !(self.min_duration > 0.0 && self.max_duration >= self.min_duration) {
            return Err(LampoError::Config("duration clamp must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.width.unwrap_or(if self.n_basis > 1 {
            1.0 / (self.n_basis - 1) as f64
        } else {
            1.0
        })
    }

    pub fn centers(&self) -> Vec<f64> {
        if self.n_basis == 1 {
            return vec![0.5];
        }
        let step = 1.0 / (self.n_basis - 1) as f64;
        (0..self.n_basis).map(|i| i as f64 * step).collect()
    }

    /// Length of a parameter vector for `n_joints` joints.
    pub fn param_dim(&self, n_joints: usize) -> usize {
        n_joints * self.n_basis + 1
    }

    /// Basis values at each phase as a `phases.len() × n_basis` matrix.
    pub fn feature_matrix(&self, phases: &[f64]) -> Result<DMatrix<f64>> {
        let mut phi = DMatrix::zeros(phases.len(), self.n_basis);
        for (r, &s) in phases.iter().enumerate() {
            let row = rbf_features(s, self)?;
            for (c, v) in row.into_iter().enumerate() {
                phi[(r, c)] = v;
            }
        }
        Ok(phi)
    }
}

/// Movement parameter vector: joint-major basis weights followed by the duration slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovementParams {
    pub weights: Vec<f64>,
    pub duration_raw: f64,
}

impl MovementParams {
    pub fn dim(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = self.weights.clone();
        v.push(self.duration_raw);
        DVector::from_vec(v)
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(LampoError::Dimension {
                what: "movement parameters",
                expected: 2,
                got: v.len(),
            });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(LampoError::NonFinite("movement parameters"));
        }
        let (w, d) = v.split_at(v.len() - 1);
        Ok(Self {
            weights: w.to_vec(),
            duration_raw: d[0],
        })
    }

    pub fn n_joints(&self, config: &BasisConfig) -> Result<usize> {
        if config.n_basis == 0 || self.weights.len() % config.n_basis != 0 {
            return Err(LampoError::Dimension {
                what: "movement weights (multiple of n_basis)",
                expected: config.n_basis,
                got: self.weights.len(),
            });
        }
        Ok(self.weights.len() / config.n_basis)
    }

    fn joint_weights(&self, joint: usize, n_basis: usize) -> &[f64] {
        &self.weights[joint * n_basis..(joint + 1) * n_basis]
    }

    /// Joint positions at a single phase.
    pub fn position_at(&self, phase: f64, config: &BasisConfig) -> Result<Vec<f64>> {
        let phi = rbf_features(phase, config)?;
        let n_joints = self.n_joints(config)?;
        Ok((0..n_joints)
            .map(|j| {
                self.joint_weights(j, config.n_basis)
                    .iter()
                    .zip(&phi)
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect())
    }
}

/// Normalized Gaussian basis values at `phase`; entries sum to one.
pub fn rbf_features(phase: f64, config: &BasisConfig) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&phase) {
        return Err(LampoError::Domain(format!("phase {phase} outside [0, 1]")));
    }
    let w = config.width();
    let inv = 1.0 / (2.0 * w * w);
    let centers = config.centers();
    // Log-space normalization: far-from-center phases would otherwise
    // underflow every unnormalized value to zero for narrow widths.
    let logs: Vec<f64> = centers.iter().map(|c| -(phase - c).powi(2) * inv).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut g: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    Ok(g)
}

/// Ridge-regression fit of the basis weights to a trajectory.
pub fn encode(traj: &Trajectory, config: &BasisConfig) -> Result<MovementParams> {
    config.validate()?;
    let duration = traj.duration();
    if !(duration > 0.0) {
        return Err(LampoError::InvalidTrajectory("zero duration".into()));
    }
    let t0 = traj.times()[0];
    let phases: Vec<f64> = traj
        .times()
        .iter()
        .map(|t| ((t - t0) / duration).clamp(0.0, 1.0))
        .collect();
    let phi = config.feature_matrix(&phases)?;
    let mut gram = phi.transpose() * &phi;
    for i in 0..config.n_basis {
        gram[(i, i)] += config.ridge_lambda;
    }
    let factor = SpdFactor::new(gram, "basis gram matrix")?;
    let rhs = phi.transpose() * traj.positions();
    let w = factor.solve_mat(&rhs);

    let n_joints = traj.n_joints();
    let mut weights = Vec::with_capacity(n_joints * config.n_basis);
    for j in 0..n_joints {
        weights.extend(w.column(j).iter());
    }
    Ok(MovementParams {
        weights,
        duration_raw: duration,
    })
}

/// Clamped execution duration for a raw duration slot.
pub fn clamped_duration(duration_raw: f64, config: &BasisConfig) -> f64 {
    duration_raw.clamp(config.min_duration, config.max_duration)
}

/// Evaluates the movement at `n_steps` evenly spaced phases.
pub fn decode(params: &MovementParams, config: &BasisConfig, n_steps: usize) -> Result<Trajectory> {
    config.validate()?;
    if n_steps < 2 {
        return Err(LampoError::Domain(format!("n_steps must be >= 2, got {n_steps}")));
    }
    if !params.weights.iter().all(|w| w.is_finite()) || !params.duration_raw.is_finite() {
        return Err(LampoError::NonFinite("movement parameters"));
    }
    let n_joints = params.n_joints(config)?;
    let duration = clamped_duration(params.duration_raw, config);
    let last = (n_steps - 1) as f64;
    let phases: Vec<f64> = (0..n_steps).map(|i| i as f64 / last).collect();
    let times: Vec<f64> = phases.iter().map(|s| s * duration).collect();
    let phi = config.feature_matrix(&phases)?;
    let w = DMatrix::from_column_slice(config.n_basis, n_joints, &params.weights);
    Trajectory::new(times, phi * w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> BasisConfig {
        BasisConfig::with_basis(n)
    }

    fn min_jerk(q0: f64, q1: f64, s: f64) -> f64 {
        q0 + (q1 - q0) * (10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5))
    }

    fn sample_traj(n: usize, duration: f64, f: impl Fn(f64) -> (f64, f64)) -> Trajectory {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                let (a, b) = f(s);
                vec![s * duration, a, b]
            })
            .collect();
        Trajectory::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_basis_is_one() {
        for s in [0.0, 0.37, 1.0] {
            assert_eq!(rbf_features(s, &cfg(1)).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn two_basis_symmetric_midpoint() {
        let phi = rbf_features(0.5, &cfg(2)).unwrap();
        assert!((phi[0] - 0.5).abs() < 1e-15 && (phi[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn five_basis_matches_reference_values() {
        // Direct evaluation of exp(-(s-c)^2 / (2 w^2)) normalized, computed offline.
        let expected = [
            0.010796111749647622,
            0.8576413851802899,
            0.13152356618916186,
            3.893685864858544e-05,
            2.2252444841037813e-11,
        ];
        let config = BasisConfig {
            width: Some(0.1),
            ..cfg(5)
        };
        let phi = rbf_features(0.3, &config).unwrap();
        for (a, b) in phi.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn phase_out_of_range_is_domain_error() {
        assert!(matches!(rbf_features(-0.01, &cfg(3)), Err(LampoError::Domain(_))));
        assert!(matches!(rbf_features(1.5, &cfg(3)), Err(LampoError::Domain(_))));
    }

    #[test]
    fn features_sum_to_one() {
        let config = cfg(20);
        for i in 0..=200 {
            let phi = rbf_features(i as f64 / 200.0, &config).unwrap();
            assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(phi.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn param_dimension_two_joints_twenty_basis() {
        let traj = sample_traj(100, 2.0, |s| (s, -s));
        let p = encode(&traj, &cfg(20)).unwrap();
        assert_eq!(p.dim(), 41);
        assert_eq!(cfg(20).param_dim(2), 41);
    }

    #[test]
    fn constant_trajectory_round_trip() {
        let traj = sample_traj(100, 1.7, |_| (0.7, 0.7));
        let config = BasisConfig {
            ridge_lambda: 1e-8,
            ..cfg(20)
        };
        let p = encode(&traj, &config).unwrap();
        let back = decode(&p, &config, 57).unwrap();
        for v in back.positions().iter() {
            assert!((v - 0.7).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn equal_weights_decode_constant() {
        let config = cfg(7);
        let p = MovementParams {
            weights: vec![-0.25; 14],
            duration_raw: 1.0,
        };
        let t = decode(&p, &config, 33).unwrap();
        assert!(t.positions().iter().all(|v| (v + 0.25).abs() < 1e-14));
    }

    #[test]
    fn decode_times_evenly_spaced() {
        let p = MovementParams {
            weights: vec![0.0; 20],
            duration_raw: 2.0,
        };
        let t = decode(&p, &cfg(20), 5).unwrap();
        assert_eq!(t.times(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn decode_clamps_duration() {
        let p = MovementParams {
            weights: vec![0.0; 4],
            duration_raw: -3.0,
        };
        let t = decode(&p, &cfg(2), 2).unwrap();
        assert_eq!(t.times(), &[0.0, 0.1]);
        let p = MovementParams { duration_raw: 1e4, ..p };
        assert_eq!(decode(&p, &cfg(2), 2).unwrap().duration(), 30.0);
    }

    #[test]
    fn decode_rejects_short_output() {
        let p = MovementParams {
            weights: vec![0.0; 4],
            duration_raw: 1.0,
        };
        assert!(decode(&p, &cfg(2), 1).is_err());
    }

    #[test]
    fn zero_duration_rejected() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!(Trajectory::from_rows(&rows).is_err());
    }

    #[test]
    fn invalid_trajectories_rejected() {
        assert!(Trajectory::from_rows(&[vec![0.0, 1.0]]).is_err());
        assert!(Trajectory::from_rows(&[vec![-1.0, 1.0], vec![0.0, 1.0]]).is_err());
        assert!(Trajectory::from_rows(&[vec![0.0, f64::NAN], vec![1.0, 1.0]]).is_err());
        assert!(Trajectory::from_rows(&[vec![0.5, 0.0], vec![0.2, 1.0]]).is_err());
    }

    #[test]
    fn min_jerk_round_trip_is_accurate() {
        let traj = sample_traj(100, 2.0, |s| (min_jerk(0.1, 1.9, s), min_jerk(-0.4, -2.2, s)));
        let config = cfg(20);
        let p = encode(&traj, &config).unwrap();
        let back = decode(&p, &config, 100).unwrap();
        let rmse = ((traj.positions() - back.positions()).norm_squared() / 200.0).sqrt();
        assert!(rmse < 1e-3, "rmse {rmse}");
    }

    #[test]
    fn position_at_matches_decode() {
        let traj = sample_traj(60, 1.0, |s| (s.sin(), (2.0 * s).cos()));
        let config = cfg(10);
        let p = encode(&traj, &config).unwrap();
        let back = decode(&p, &config, 11).unwrap();
        for i in 0..11 {
            let q = p.position_at(i as f64 / 10.0, &config).unwrap();
            assert!((q[0] - back.positions()[(i, 0)]).abs() < 1e-14);
            assert!((q[1] - back.positions()[(i, 1)]).abs() < 1e-14);
        }
    }
}
