//! Planar two-link reacher with unit links.
//!
//! Goals are drawn from a small set of Gaussian clusters. Demonstrations are
//! minimum-jerk joint-space motions to an analytic IK solution whose elbow
//! branch alternates from cluster to cluster, so the demonstration data is
//! multimodal in joint space. The reward is the negative final distance to
//! the goal; touching the optional circular obstacle ends the episode with
//! a fixed penalty.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LampoError, Result};
use crate::promp::{decode, BasisConfig, MovementParams, Trajectory};

pub const LINK_LENGTH: f64 = 1.0;
pub const MAX_REACH: f64 = 2.0 * LINK_LENGTH;
/// Sampled goals stay this far inside the reachable annulus.
pub const GOAL_MARGIN: f64 = 0.05;
pub const MAX_GOAL_REJECTIONS: usize = 1000;
pub const COLLISION_REWARD: f64 = -2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Elbow {
    /// `q₂ ≥ 0`.
    Up,
    /// `q₂ ≤ 0`.
    Down,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReacherConfig {
    pub n_goal_clusters: usize,
    /// Defaults to evenly spaced centers when empty.
    pub cluster_centers: Vec<[f64; 2]>,
    pub cluster_std: f64,
    pub success_radius: f64,
    /// Start posture. The base joint's wrap-around sits at `q_start[0] ± π`,
    /// so the default points the arm between the clusters' joint targets.
    pub q_start: [f64; 2],
    pub obstacle: Option<Obstacle>,
    /// Amplitude scale of the smooth joint-space perturbation added to demonstrations.
    pub demo_noise_std: f64,
    pub demo_duration: [f64; 2],
    pub demo_samples: usize,
    /// Samples used when decoding a movement for evaluation.
    pub eval_samples: usize,
}

impl Default for ReacherConfig {
    fn default() -> Self {
        Self {
            n_goal_clusters: 4,
            cluster_centers: Vec::new(),
            cluster_std: 0.23,
            success_radius: 0.1,
            q_start: [FRAC_PI_2, 0.0],
            obstacle: None,
            demo_noise_std: 0.005,
            demo_duration: [1.5, 2.5],
            demo_samples: 100,
            eval_samples: 100,
        }
    }
}

/// Evenly spaced cluster centers at radius 1.3, starting at 45°.
pub fn default_cluster_centers(n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let a = PI / 4.0 + i as f64 * PI / 2.0;
            [1.3 * a.cos(), 1.3 * a.sin()]
        })
        .collect()
}

impl ReacherConfig {
    pub fn with_clusters(n: usize) -> Self {
        Self {
            n_goal_clusters: n,
            ..Self::default()
        }
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        if self.cluster_centers.is_empty() {
            default_cluster_centers(self.n_goal_clusters)
        } else {
            self.cluster_centers.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.n_goal_clusters) {
            return Err(LampoError::Config(format!(
                "n_goal_clusters must be in 1..=4, got {}",
                self.n_goal_clusters
            )));
        }
        let centers = self.centers();
        if centers.len() != self.n_goal_clusters {
            return Err(LampoError::Config(format!(
                "expected {} cluster centers, got {}",
                self.n_goal_clusters,
                centers.len()
            )));
        }
        for c in &centers {
            let r = c[0].hypot(c[1]);
            if !(r > 0.0 && r <= MAX_REACH) {
                return Err(LampoError::Config(format!("cluster center {c:?} is not reachable")));
            }
        }
        if !(self.cluster_std >= 0.0) || !self.cluster_std.is_finite() {
            return Err(LampoError::Config("cluster_std must be finite and >= 0".into()));
        }
        if !(self.success_radius > 0.0) {
            return Err(LampoError::Config("success_radius must be > 0".into()));
        }
        if !(self.demo_noise_std >= 0.0) {
            return Err(LampoError::Config("demo_noise_std must be >= 0".into()));
        }
        let [lo, hi] = self.demo_duration;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(LampoError::Config("demo_duration must satisfy 0 < lo <= hi".into()));
        }
        if self.demo_samples < 2 || self.eval_samples < 2 {
            return Err(LampoError::Config("demo_samples and eval_samples must be >= 2".into()));
        }
        if let Some(o) = &self.obstacle {
            if !(o.radius > 0.0) || !o.center.iter().all(|v| v.is_finite()) {
                return Err(LampoError::Config("obstacle radius must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Elbow branch used by the demonstrator for a cluster.
    pub fn cluster_elbow(&self, cluster: usize) -> Elbow {
        if cluster % 2 == 0 {
            Elbow::Up
        } else {
            Elbow::Down
        }
    }

    /// Index of the cluster center closest to `p`.
    pub fn nearest_cluster(&self, p: [f64; 2]) -> usize {
        let centers = self.centers();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in centers.iter().enumerate() {
            let d = (c[0] - p[0]).hypot(c[1] - p[1]);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub reward: f64,
    pub success: bool,
    pub final_ee: [f64; 2],
    pub collided: bool,
}

pub fn forward_kinematics(q: [f64; 2]) -> [f64; 2] {
    let a = q[0] + q[1];
    [
        LINK_LENGTH * (q[0].cos() + a.cos()),
        LINK_LENGTH * (q[0].sin() + a.sin()),
    ]
}

fn elbow_position(q: [f64; 2]) -> [f64; 2] {
    [LINK_LENGTH * q[0].cos(), LINK_LENGTH * q[0].sin()]
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

pub fn inverse_kinematics(p: [f64; 2], elbow: Elbow) -> Result<[f64; 2]> {
    let r2 = p[0] * p[0] + p[1] * p[1];
    let r = r2.sqrt();
    if !(r > 0.0) || r > MAX_REACH + 1e-9 || !r.is_finite() {
        return Err(LampoError::Unreachable { x: p[0], y: p[1] });
    }
    let l2 = LINK_LENGTH * LINK_LENGTH;
    let cos_q2 = ((r2 - 2.0 * l2) / (2.0 * l2)).clamp(-1.0, 1.0);
    let mut q2 = cos_q2.acos();
    if elbow == Elbow::Down {
        q2 = -q2;
    }
    let q1 = p[1].atan2(p[0]) - (LINK_LENGTH * q2.sin()).atan2(LINK_LENGTH * (1.0 + q2.cos()));
    Ok([wrap_angle(q1), q2])
}

/// Draws a goal and reports the cluster it came from.
pub fn sample_goal<R: Rng + ?Sized>(config: &ReacherConfig, rng: &mut R) -> Result<([f64; 2], usize)> {
    let centers = config.centers();
    if centers.is_empty() {
        return Err(LampoError::Config("no goal clusters configured".into()));
    }
    let normal = Normal::new(0.0, config.cluster_std)
        .map_err(|e| LampoError::Config(format!("cluster_std: {e}")))?;
    for _ in 0..MAX_GOAL_REJECTIONS {
        let k = rng.random_range(0..centers.len());
        let p = [
            centers[k][0] + normal.sample(rng),
            centers[k][1] + normal.sample(rng),
        ];
        let r = p[0].hypot(p[1]);
        if r >= GOAL_MARGIN && r <= MAX_REACH - GOAL_MARGIN {
            return Ok((p, k));
        }
    }
    Err(LampoError::Config(format!(
        "no reachable goal after {MAX_GOAL_REJECTIONS} draws; check cluster centers and cluster_std"
    )))
}

pub fn sample_context<R: Rng + ?Sized>(config: &ReacherConfig, rng: &mut R) -> Result<[f64; 2]> {
    Ok(sample_goal(config, rng)?.0)
}

/// Minimum-jerk blend `10s³ − 15s⁴ + 6s⁵`.
pub fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

/// IK target for a goal, unwrapped to the branch of `q1` nearest the start posture.
pub fn demo_target(config: &ReacherConfig, goal: [f64; 2]) -> Result<[f64; 2]> {
    let elbow = config.cluster_elbow(config.nearest_cluster(goal));
    let q = inverse_kinematics(goal, elbow)?;
    Ok([
        config.q_start[0] + wrap_angle(q[0] - config.q_start[0]),
        q[1],
    ])
}

/// Demonstration from `q_start` to the IK posture for `goal`.
///
/// The demonstrator perturbs the path with a smooth bump that vanishes,
/// along with its slope, at both ends.
pub fn demonstrate<R: Rng + ?Sized>(config: &ReacherConfig, goal: [f64; 2], rng: &mut R) -> Result<Trajectory> {
    let target = demo_target(config, goal)?;
    let [lo, hi] = config.demo_duration;
    let duration = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let eps: Vec<f64> = if config.demo_noise_std > 0.0 {
        let normal = Normal::new(0.0, config.demo_noise_std)
            .map_err(|e| LampoError::Config(format!("demo_noise_std: {e}")))?;
        (0..2).map(|_| normal.sample(rng)).collect()
    } else {
        vec![0.0, 0.0]
    };
    let n = config.demo_samples;
    let times: Vec<f64> = (0..n).map(|i| duration * i as f64 / (n - 1) as f64).collect();
    let positions = DMatrix::from_fn(n, 2, |i, j| {
        demo_posture(config.q_start[j], target[j], eps[j], i as f64 / (n - 1) as f64)
    });
    Trajectory::new(times, positions)
}

/// Demonstrated joint angle at normalized time `s`.
pub(crate) fn demo_posture(start: f64, target: f64, eps: f64, s: f64) -> f64 {
    let bump = 16.0 * (s * (1.0 - s)).powi(2);
    start + (target - start) * min_jerk(s) + eps * bump
}

/// Whether segment `a→b` meets the closed disk.
pub fn segment_hits_disk(a: [f64; 2], b: [f64; 2], center: [f64; 2], radius: f64) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    let f = [center[0] - a[0], center[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        ((f[0] * d[0] + f[1] * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let closest = [a[0] + t * d[0], a[1] + t * d[1]];
    (closest[0] - center[0]).hypot(closest[1] - center[1]) <= radius
}

pub fn arm_collides(q: [f64; 2], obstacle: &Obstacle) -> bool {
    let elbow = elbow_position(q);
    let ee = forward_kinematics(q);
    segment_hits_disk([0.0, 0.0], elbow, obstacle.center, obstacle.radius)
        || segment_hits_disk(elbow, ee, obstacle.center, obstacle.radius)
}

pub fn trajectory_collides(traj: &Trajectory, obstacle: &Obstacle) -> bool {
    let pos = traj.positions();
    (0..pos.nrows()).any(|i| arm_collides([pos[(i, 0)], pos[(i, 1)]], obstacle))
}

/// Scores an executed joint trajectory against `goal`.
pub fn evaluate_trajectory(config: &ReacherConfig, traj: &Trajectory, goal: [f64; 2]) -> EpisodeResult {
    let q = traj.final_position();
    let final_ee = forward_kinematics([q[0], q[1]]);
    let collided = config
        .obstacle
        .as_ref()
        .is_some_and(|o| trajectory_collides(traj, o));
    let dist = (final_ee[0] - goal[0]).hypot(final_ee[1] - goal[1]);
    let finite = dist.is_finite();
    if collided {
        return EpisodeResult {
            reward: COLLISION_REWARD,
            success: false,
            final_ee,
            collided,
        };
    }
    EpisodeResult {
        reward: if finite { -dist } else { COLLISION_REWARD },
        success: finite && dist < config.success_radius,
        final_ee,
        collided,
    }
}

/// Decodes a movement and scores it.
pub fn evaluate(config: &ReacherConfig, basis: &BasisConfig, params: &MovementParams, goal: [f64; 2]) -> Result<EpisodeResult> {
    let traj = decode(params, basis, config.eval_samples)?;
    if traj.n_joints() != 2 {
        return Err(LampoError::Dimension {
            what: "reacher joints",
            expected: 2,
            got: traj.n_joints(),
        });
    }
    Ok(evaluate_trajectory(config, &traj, goal))
}
