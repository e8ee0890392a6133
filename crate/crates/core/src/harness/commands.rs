use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::{read_dataset, write_dataset, DemoRecord};
use super::model_io::{ModelFile, PolicyRecord};
use super::stats::clopper_pearson;
use crate::error::{LampoError, Result};
use crate::mppca::{fit_em_pairs, EmOptions, MppcaModel};
use crate::policy::{LatentPolicy, MovementSample, PolicyParams, Projections};
use crate::promp::{encode, BasisConfig, MovementParams};
use crate::reacher::{demonstrate, evaluate, sample_goal, trajectory_collides, EpisodeResult, ReacherConfig};
use crate::rl::{improve, Episode, ExperienceBuffer};

pub const DEMOS_FILE: &str = "demos.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const IMPROVED_MODEL_FILE: &str = "model_improved.json";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const POLICIES_FILE: &str = "policies.jsonl";
pub const BUFFER_FILE: &str = "buffer.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Attempts per demonstration before giving up on a collision-free path.
const MAX_DEMO_ATTEMPTS: usize = 1000;
/// Context redraws allowed when the policy has no support at a context.
const MAX_CONTEXT_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Stream {
    Demos = 1,
    Split = 2,
    Em = 3,
    Rollout = 4,
    EvalContext = 5,
    EvalAction = 6,
}

/// Independent generator for `(seed, purpose, a, b)`.
fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream((a << 32) ^ b);
    rng
}

pub fn generate_demos(cfg: &ExperimentConfig) -> Result<Vec<DemoRecord>> {
    cfg.env.validate()?;
    (0..cfg.n_demos)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, Stream::Demos, 0, i as u64);
            for _ in 0..MAX_DEMO_ATTEMPTS {
                let (goal, _) = sample_goal(&cfg.env, &mut rng)?;
                let traj = demonstrate(&cfg.env, goal, &mut rng)?;
                if cfg.env.obstacle.as_ref().is_some_and(|o| trajectory_collides(&traj, o)) {
                    continue;
                }
                return Ok(DemoRecord::new(goal.to_vec(), &traj));
            }
            Err(LampoError::Config(format!(
                "no collision-free demonstration after {MAX_DEMO_ATTEMPTS} attempts"
            )))
        })
        .collect()
}

pub fn cmd_gen_demos(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let records = generate_demos(cfg)?;
    let path = out.join(DEMOS_FILE);
    write_dataset(&path, &records)?;
    log::info!("wrote {} demonstrations to {}", records.len(), path.display());
    Ok(path)
}

fn encode_records(records: &[DemoRecord], basis: &BasisConfig) -> Result<(Vec<(DVector<f64>, DVector<f64>)>, usize)> {
    let mut n_joints = None;
    let pairs = records
        .iter()
        .map(|r| {
            let traj = r.trajectory()?;
            match n_joints {
                None => n_joints = Some(traj.n_joints()),
                Some(j) if j != traj.n_joints() => {
                    return Err(LampoError::Dimension {
                        what: "trajectory joints",
                        expected: j,
                        got: traj.n_joints(),
                    })
                }
                _ => {}
            }
            let w = encode(&traj, basis)?.to_vector();
            Ok((w, DVector::from_column_slice(&r.context)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, n_joints.unwrap_or(0)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImitateSummary {
    pub n_demos: usize,
    pub em_iterations: usize,
    pub converged: bool,
    pub train_log_likelihood: f64,
    /// Mean log-likelihood per held-out demonstration.
    pub held_out_log_likelihood: Option<f64>,
}

fn em_options(cfg: &ExperimentConfig) -> EmOptions {
    let mut opts = cfg.model.em.clone();
    let mut rng = stream_rng(cfg.seed, Stream::Em, 0, 0);
    opts.seed = opts.seed.wrapping_add(rand::Rng::random::<u64>(&mut rng));
    opts
}

/// Encodes demonstrations, fits the mixture and sets θ₀.
pub fn imitate(cfg: &ExperimentConfig, records: &[DemoRecord]) -> Result<(ModelFile, ImitateSummary)> {
    cfg.validate()?;
    let (pairs, n_joints) = encode_records(records, &cfg.basis)?;
    let opts = em_options(cfg);
    let (k, dz) = (cfg.model.k, cfg.model.d_z);

    let n_held = (cfg.model.held_out_fraction * pairs.len() as f64).floor() as usize;
    let held_out = if n_held > 0 {
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut stream_rng(cfg.seed, Stream::Split, 0, 0));
        let (test_idx, train_idx) = idx.split_at(n_held);
        let train: Vec<_> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
        let fit = fit_em_pairs(&train, k, dz, &opts)?;
        let density = fit.model.density()?;
        let mut total = 0.0;
        for &i in test_idx {
            let (w, c) = &pairs[i];
            let x = DVector::from_iterator(w.len() + c.len(), w.iter().chain(c.iter()).copied());
            total += density.log_density(&x)?;
        }
        Some(total / n_held as f64)
    } else {
        None
    };

    let fit = fit_em_pairs(&pairs, k, dz, &opts)?;
    let theta0 = PolicyParams::initial(&fit.model);
    let mut file = ModelFile::new(&fit.model, &theta0, &cfg.basis, n_joints);
    file.train_log_likelihood = fit.final_log_likelihood();
    file.held_out_log_likelihood = held_out;
    let summary = ImitateSummary {
        n_demos: records.len(),
        em_iterations: fit.log_likelihoods.len(),
        converged: fit.converged,
        train_log_likelihood: file.train_log_likelihood,
        held_out_log_likelihood: held_out,
    };
    Ok((file, summary))
}

pub fn cmd_imitate(cfg: &ExperimentConfig, out: &Path) -> Result<ImitateSummary> {
    let records = read_dataset(&out.join(DEMOS_FILE))?;
    let (file, summary) = imitate(cfg, &records)?;
    file.save(&out.join(MODEL_FILE))?;
    Ok(summary)
}

/// A policy bound to its environment.
pub struct Agent<'a> {
    pub env: &'a ReacherConfig,
    pub basis: &'a BasisConfig,
    pub policy: LatentPolicy<'a>,
}

pub struct Rollout {
    pub goal: [f64; 2],
    pub sample: MovementSample,
    pub result: EpisodeResult,
    pub redraws: usize,
}

impl Agent<'_> {
    /// Draws a context, samples a movement and executes it.
    pub fn rollout(&self, ctx_rng: &mut ChaCha8Rng, act_rng: &mut ChaCha8Rng) -> Result<Rollout> {
        for redraws in 0..MAX_CONTEXT_REDRAWS {
            let (goal, _) = sample_goal(self.env, ctx_rng)?;
            let c = DVector::from_column_slice(&goal);
            let sample = match self.policy.sample(&c, act_rng) {
                Ok(s) => s,
                Err(LampoError::OutOfSupport { .. }) => continue,
                Err(e) => return Err(e),
            };
            let params = MovementParams::from_slice(sample.movement.as_slice())?;
            let result = evaluate(self.env, self.basis, &params, goal)?;
            return Ok(Rollout {
                goal,
                sample,
                result,
                redraws,
            });
        }
        Err(LampoError::OutOfSupport {
            max_log_density: f64::NEG_INFINITY,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_episodes: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub ci_half_width: f64,
    pub collisions: usize,
}

/// Fresh-context rollouts without learning. Contexts depend only on the
/// seed, so two policies evaluated with one seed see the same goals.
pub fn evaluate_policy(
    cfg: &ExperimentConfig,
    model: &MppcaModel,
    theta: &PolicyParams,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(LampoError::Config("n_episodes must be >= 1".into()));
    }
    let proj = Projections::from_model(model);
    let agent = Agent {
        env: &cfg.env,
        basis: &cfg.basis,
        policy: LatentPolicy::new(&proj, theta)?,
    };
    let (mut reward, mut successes, mut collisions) = (0.0, 0, 0);
    for i in 0..n_episodes as u64 {
        let mut ctx = stream_rng(seed, Stream::EvalContext, 0, i);
        let mut act = stream_rng(seed, Stream::EvalAction, 0, i);
        let r = agent.rollout(&mut ctx, &mut act)?;
        reward += r.result.reward;
        successes += r.result.success as usize;
        collisions += r.result.collided as usize;
    }
    let ci = clopper_pearson(successes, n_episodes, 0.95);
    Ok(EvalSummary {
        n_episodes,
        mean_reward: reward / n_episodes as f64,
        success_rate: successes as f64 / n_episodes as f64,
        ci_lower: ci.lower,
        ci_upper: ci.upper,
        ci_half_width: ci.half_width(),
        collisions,
    })
}

/// One line of the learning curve. Rollout statistics describe the batch
/// collected at this iteration; the estimator statistics describe the
/// policy produced by its update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurveRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    #[serde(rename = "J_hat")]
    pub j_hat: f64,
    pub eta: f64,
    pub mean_g: f64,
    pub ess: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub iteration: usize,
    pub nu: f64,
    pub accepted: bool,
    pub solver_status: String,
    pub solver_iterations: usize,
    pub kkt_residual: f64,
    pub context_redraws: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub iteration: usize,
    pub policy: PolicyRecord,
}

pub struct ImprovementRun {
    pub rows: Vec<LearningCurveRow>,
    pub diagnostics: Vec<DiagnosticsRow>,
    /// θ₀ … θ_{N_T}.
    pub snapshots: Vec<PolicyParams>,
    pub buffer: ExperienceBuffer,
}

/// The outer improvement loop: collect `n` episodes with the current
/// policy, then solve one constrained update over the whole buffer.
pub fn run_improvement(cfg: &ExperimentConfig, file: &ModelFile) -> Result<ImprovementRun> {
    cfg.validate()?;
    let model = file.model()?;
    let proj = Projections::from_model(&model);
    let theta0 = PolicyParams::initial(&model);
    let mut theta = file.policy()?;
    let lampo = cfg.rl.lampo();
    let mut buffer = ExperienceBuffer::new(proj.clone());
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    let mut snapshots = vec![theta.clone()];
    let start = Instant::now();
    for t in 1..=cfg.rl.n_iterations {
        let index = buffer.push_policy(theta.clone())?;
        let agent = Agent {
            env: &cfg.env,
            basis: &cfg.basis,
            policy: LatentPolicy::new(&proj, &theta)?,
        };
        let (mut reward, mut successes, mut redraws) = (0.0, 0usize, 0usize);
        for i in 0..lampo.n_per_iter {
            let mut rng = stream_rng(cfg.seed, Stream::Rollout, t as u64, i as u64);
            let mut act = rng.clone();
            act.set_stream(u64::MAX - ((t as u64) << 32 ^ i as u64));
            let r = agent.rollout(&mut rng, &mut act)?;
            reward += r.result.reward;
            successes += r.result.success as usize;
            redraws += r.redraws;
            buffer.push_episode(Episode {
                context: r.goal.to_vec(),
                component: r.sample.component,
                latent: r.sample.latent.iter().copied().collect(),
                movement: r.sample.movement.iter().copied().collect(),
                reward: r.result.reward,
                policy_index: index,
            })?;
        }
        let outcome = improve(&buffer, &theta, &theta0, &lampo)?;
        let n = lampo.n_per_iter as f64;
        rows.push(LearningCurveRow {
            iteration: t,
            mean_reward: reward / n,
            success_rate: successes as f64 / n,
            j_hat: outcome.j_hat,
            eta: outcome.eta,
            mean_g: outcome.mean_g,
            ess: outcome.ess,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        diagnostics.push(DiagnosticsRow {
            iteration: t,
            nu: outcome.nu,
            accepted: outcome.accepted,
            solver_status: outcome.report.status.to_string(),
            solver_iterations: outcome.report.iterations,
            kkt_residual: outcome.report.kkt_residual,
            context_redraws: redraws,
        });
        log::info!(
            "iteration {t}: success {:.3} reward {:.4} J {:.4} eta {:.4} g {:.4} ess {:.1} {}",
            successes as f64 / n,
            reward / n,
            outcome.j_hat,
            outcome.eta,
            outcome.mean_g,
            outcome.ess,
            if outcome.accepted { "accepted" } else { "rejected" }
        );
        theta = outcome.theta;
        snapshots.push(theta.clone());
    }
    Ok(ImprovementRun {
        rows,
        diagnostics,
        snapshots,
        buffer,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, &it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| LampoError::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn cmd_improve(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<LearningCurveRow>> {
    let file = ModelFile::load(&out.join(MODEL_FILE))?;
    let run = run_improvement(cfg, &file)?;
    write_csv(&out.join(CURVE_FILE), &run.rows)?;
    write_csv(&out.join(DIAGNOSTICS_FILE), &run.diagnostics)?;
    write_jsonl(
        &out.join(POLICIES_FILE),
        run.snapshots.iter().enumerate().map(|(i, t)| PolicySnapshot {
            iteration: i,
            policy: t.into(),
        }),
    )?;
    write_jsonl(&out.join(BUFFER_FILE), run.buffer.episodes())?;
    let mut improved = file.clone();
    improved.policy = run.snapshots.last().expect("θ₀ is always present").into();
    improved.iteration = file.iteration + cfg.rl.n_iterations;
    improved.save(&out.join(IMPROVED_MODEL_FILE))?;
    Ok(run.rows)
}

/// Evaluates `model_path`, or the improved model when present, else the imitation model.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, model_path: Option<&Path>) -> Result<EvalSummary> {
    let path = match model_path {
        Some(p) => p.to_path_buf(),
        None if out.join(IMPROVED_MODEL_FILE).exists() => out.join(IMPROVED_MODEL_FILE),
        None => out.join(MODEL_FILE),
    };
    let file = ModelFile::load(&path)?;
    let summary = evaluate_policy(cfg, &file.model()?, &file.policy()?, cfg.rl.eval_episodes, cfg.seed)?;
    std::fs::write(out.join(EVAL_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FullRunSummary {
    pub imitation: ImitateSummary,
    pub imitation_eval: EvalSummary,
    pub final_eval: EvalSummary,
    pub curve: Vec<LearningCurveRow>,
}

pub fn cmd_full_run(cfg: &ExperimentConfig, out: &Path) -> Result<FullRunSummary> {
    cmd_gen_demos(cfg, out)?;
    let imitation = cmd_imitate(cfg, out)?;
    let il = ModelFile::load(&out.join(MODEL_FILE))?;
    let imitation_eval = evaluate_policy(cfg, &il.model()?, &il.policy()?, cfg.rl.eval_episodes, cfg.seed)?;
    let curve = cmd_improve(cfg, out)?;
    let final_eval = cmd_eval(cfg, out, None)?;
    let summary = FullRunSummary {
        imitation,
        imitation_eval,
        final_eval,
        curve,
    };
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
