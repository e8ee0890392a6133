use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::mppca::tests::random_model;
use crate::mppca::{MppcaComponent, MppcaModel};
use crate::policy::{LatentPolicy, PolicyParams, Projections};

fn perturb(rng: &mut ChaCha8Rng, theta: &PolicyParams, scale: f64) -> PolicyParams {
    let v: Vec<f64> = theta.to_vec().iter().map(|x| x + rng.random_range(-scale..scale)).collect();
    PolicyParams::from_slice(&v, theta.n_components(), theta.latent_dim()).unwrap()
}

/// Buffer with `n` episodes per behavior policy and rewards from `reward`.
fn fill_buffer(
    proj: &Projections,
    thetas: &[PolicyParams],
    n: usize,
    contexts: &mut dyn FnMut(&mut ChaCha8Rng) -> DVector<f64>,
    reward: &dyn Fn(&DVector<f64>, &DVector<f64>) -> f64,
    rng: &mut ChaCha8Rng,
) -> ExperienceBuffer {
    let mut buf = ExperienceBuffer::new(proj.clone());
    for theta in thetas {
        let t = buf.push_policy(theta.clone()).unwrap();
        let pol = LatentPolicy::new(proj, theta).unwrap();
        for _ in 0..n {
            let c = contexts(rng);
            let s = pol.sample(&c, rng).unwrap();
            buf.push_episode(Episode {
                reward: reward(&s.movement, &c),
                context: c.iter().copied().collect(),
                component: s.component,
                latent: s.latent.iter().copied().collect(),
                movement: s.movement.iter().copied().collect(),
                policy_index: t,
            })
            .unwrap();
        }
    }
    buf
}

fn random_setup(seed: u64, n_policies: usize, n: usize) -> (MppcaModel, Projections, Vec<PolicyParams>, ExperienceBuffer, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng, 2, 2, 3, 2);
    let proj = Projections::from_model(&model);
    let theta0 = PolicyParams::initial(&model);
    let mut thetas = vec![theta0.clone()];
    for _ in 1..n_policies {
        let next = perturb(&mut rng, thetas.last().unwrap(), 0.2);
        thetas.push(next);
    }
    let offsets: Vec<DVector<f64>> = (0..2).map(|k| proj.context_offset(k).clone()).collect();
    let mut ctx = move |r: &mut ChaCha8Rng| {
        let k = r.random_range(0..2);
        offsets[k].map(|v| v + r.random_range(-0.5..0.5))
    };
    let reward = |w: &DVector<f64>, c: &DVector<f64>| -w.norm() - 0.1 * c.sum();
    let buf = fill_buffer(&proj, &thetas, n, &mut ctx, &reward, &mut rng);
    (model, proj, thetas, buf, rng)
}

fn central_diff(f: &dyn Fn(&PolicyParams) -> f64, theta: &PolicyParams) -> Vec<f64> {
    let x0 = theta.to_vec();
    let (k, dz) = (theta.n_components(), theta.latent_dim());
    let h = 1e-5;
    (0..x0.len())
        .map(|i| {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = f(&PolicyParams::from_slice(&xp, k, dz).unwrap());
            let fm = f(&PolicyParams::from_slice(&xm, k, dz).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn on_policy_ratios_are_one_and_objective_is_mean() {
    let (_, _, thetas, buf, _) = random_setup(1, 1, 40);
    let rho = importance_ratios(&buf, &thetas[0]).unwrap();
    assert!(rho.iter().all(|r| *r == 1.0));
    let mean = buf.episodes().iter().map(|e| e.reward).sum::<f64>() / buf.len() as f64;
    assert_eq!(snis_objective(&buf, &thetas[0]).unwrap(), mean);
}

#[test]
fn identical_snapshots_give_unit_ratios() {
    let (model, proj, _, _, mut rng) = random_setup(2, 1, 1);
    let theta = PolicyParams::initial(&model);
    let mut ctx = |r: &mut ChaCha8Rng| DVector::from_fn(2, |_, _| r.random_range(-1.0..1.0));
    let buf = fill_buffer(&proj, &[theta.clone(), theta.clone()], 20, &mut ctx, &|w, _| w[0], &mut rng);
    for r in importance_ratios(&buf, &theta).unwrap() {
        assert!((r - 1.0).abs() < 1e-12);
    }
}

fn scalar_model(c_load: f64, omega: f64, omega_bar: f64, c_bar: f64, noise: f64) -> MppcaModel {
    MppcaModel {
        movement_dim: 1,
        context_dim: 1,
        latent_dim: 1,
        components: vec![MppcaComponent {
            weight: 1.0,
            loading: DMatrix::from_row_slice(2, 1, &[omega, c_load]),
            offset: DVector::from_vec(vec![omega_bar, c_bar]),
            noise_var: noise,
            latent_mean: DVector::zeros(1),
            latent_var: DVector::from_element(1, 1.0),
        }],
    }
}

fn scalar_theta(mu: f64, var: f64) -> PolicyParams {
    PolicyParams {
        logits: vec![0.0],
        means: vec![DVector::from_element(1, mu)],
        log_vars: vec![DVector::from_element(1, var.ln())],
    }
}

fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

#[test]
fn scalar_ratios_match_direct_density_ratio() {
    let (cl, noise) = (0.7, 0.2);
    let model = scalar_model(cl, 1.0, 0.0, 0.3, noise);
    let proj = Projections::from_model(&model);
    let behaviors = [scalar_theta(0.0, 1.0), scalar_theta(0.4, 0.6)];
    let target = scalar_theta(-0.2, 1.3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ctx = |r: &mut ChaCha8Rng| DVector::from_element(1, r.random_range(-1.0..1.0));
    let buf = fill_buffer(&proj, &behaviors, 10, &mut ctx, &|w, _| w[0], &mut rng);
    // p(z|c) for the scalar linear-Gaussian model, by hand.
    let post = |t: (f64, f64), z: f64, c: f64| {
        let s = 1.0 / (1.0 / t.1 + cl * cl / noise);
        let m = s * (cl * (c - 0.3) / noise + t.0 / t.1);
        normal_pdf(z, m, s)
    };
    let rho = importance_ratios(&buf, &target).unwrap();
    for (ep, r) in buf.episodes().iter().zip(&rho) {
        let (z, c) = (ep.latent[0], ep.context[0]);
        let expected = post((-0.2, 1.3), z, c) / (0.5 * (post((0.0, 1.0), z, c) + post((0.4, 0.6), z, c)));
        assert!((r - expected).abs() < 1e-10 * expected.max(1.0), "{r} vs {expected}");
    }
}

#[test]
fn equal_rewards_give_that_value_and_flat_gradient() {
    let (_, _, thetas, mut buf, mut rng) = random_setup(4, 3, 15);
    let mut episodes = buf.episodes().to_vec();
    for e in &mut episodes {
        e.reward = -0.37;
    }
    let mut rebuilt = ExperienceBuffer::new(buf.projections().clone());
    for t in buf.policies() {
        rebuilt.push_policy(t.clone()).unwrap();
    }
    for e in episodes {
        rebuilt.push_episode(e).unwrap();
    }
    buf = rebuilt;
    for _ in 0..5 {
        let theta = perturb(&mut rng, &thetas[2], 0.3);
        let est = snis_estimate(&buf, &theta, true).unwrap();
        assert!((est.j_hat + 0.37).abs() < 1e-15);
        let norm: f64 = est.gradient.unwrap().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-10, "{norm}");
    }
}

#[test]
fn objective_is_convex_combination_and_shift_equivariant() {
    let (_, proj, thetas, buf, mut rng) = random_setup(5, 3, 15);
    let theta = perturb(&mut rng, &thetas[1], 0.3);
    let est = snis_estimate(&buf, &theta, true).unwrap();
    let rewards: Vec<f64> = buf.episodes().iter().map(|e| e.reward).collect();
    let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(est.j_hat >= lo && est.j_hat <= hi);
    assert!(est.ess >= 1.0 && est.ess <= buf.len() as f64 + 1e-9);

    let mut shifted = ExperienceBuffer::new(proj);
    for t in buf.policies() {
        shifted.push_policy(t.clone()).unwrap();
    }
    for e in buf.episodes() {
        let mut e = e.clone();
        e.reward += 12.5;
        shifted.push_episode(e).unwrap();
    }
    let est2 = snis_estimate(&shifted, &theta, true).unwrap();
    assert!((est2.j_hat - est.j_hat - 12.5).abs() < 1e-12);
    for (a, b) in est.gradient.unwrap().iter().zip(est2.gradient.unwrap()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_episode_has_zero_gradient() {
    let (_, _, thetas, _, mut rng) = random_setup(6, 1, 1);
    let (_, _, _, buf, _) = random_setup(6, 1, 1);
    let theta = perturb(&mut rng, &thetas[0], 0.5);
    let g = snis_gradient(&buf, &theta).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn snis_gradient_matches_finite_differences() {
    let (_, _, thetas, buf, mut rng) = random_setup(7, 2, 10);
    for _ in 0..50 {
        let theta = perturb(&mut rng, &thetas[1], 0.4);
        let g = snis_gradient(&buf, &theta).unwrap();
        let fd = central_diff(&|t| snis_objective(&buf, t).unwrap(), &theta);
        assert!(rel_err(&g, &fd) < 1e-5, "{}", rel_err(&g, &fd));
    }
}

#[test]
fn snis_matches_closed_form_expectation() {
    // Movement equals the latent and rewards are quadratic, so the target
    // expectation is -((μ - 1.5)² + v).
    let model = scalar_model(0.0, 1.0, 0.0, 0.0, 0.1);
    let proj = Projections::from_model(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ctx = |r: &mut ChaCha8Rng| DVector::from_element(1, r.random_range(-0.3..0.3));
    let reward = |w: &DVector<f64>, _: &DVector<f64>| -(w[0] - 1.5).powi(2);
    let buf = fill_buffer(&proj, &[scalar_theta(0.0, 1.0)], 100_000, &mut ctx, &reward, &mut rng);
    let (mu, var) = (0.3, 0.8);
    let est = snis_estimate(&buf, &scalar_theta(mu, var), false).unwrap();
    let expected = -((mu - 1.5f64).powi(2) + var);
    let se = est
        .weights
        .iter()
        .zip(buf.episodes())
        .map(|(w, e)| (w * (e.reward - est.j_hat)).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((est.j_hat - expected).abs() < 3.0 * se, "{} vs {expected} (se {se})", est.j_hat);
}

#[test]
fn regularizer_zero_at_start_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = random_model(&mut rng, 3, 2, 3, 2);
    let proj = Projections::from_model(&model);
    let theta0 = PolicyParams::initial(&model);
    let (eta, grad) = context_regularizer(&proj, &theta0, &theta0).unwrap();
    assert_eq!(eta, 0.0);
    assert!(grad.iter().all(|g| *g == 0.0));
    for _ in 0..100 {
        let theta = perturb(&mut rng, &theta0, 1.0);
        assert!(context_regularizer(&proj, &theta, &theta0).unwrap().0 >= 0.0);
    }
}

#[test]
fn regularizer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let model = random_model(&mut rng, 3, 2, 2, 3);
        let proj = Projections::from_model(&model);
        let theta0 = perturb(&mut rng, &PolicyParams::initial(&model), 0.3);
        let theta = perturb(&mut rng, &theta0, 0.5);
        let (_, g) = context_regularizer(&proj, &theta, &theta0).unwrap();
        let fd = central_diff(&|t| context_regularizer(&proj, t, &theta0).unwrap().0, &theta);
        assert!(rel_err(&g, &fd) < 1e-5, "{}", rel_err(&g, &fd));
    }
}

#[test]
fn regularizer_matches_monte_carlo_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = random_model(&mut rng, 3, 2, 2, 2);
    let proj = Projections::from_model(&model);
    let theta0 = PolicyParams::initial(&model);
    let theta = perturb(&mut rng, &theta0, 0.8);
    let (eta, _) = context_regularizer(&proj, &theta, &theta0).unwrap();

    let cur = LatentPolicy::new(&proj, &theta).unwrap();
    let base = LatentPolicy::new(&proj, &theta0).unwrap();
    let (w, w0) = (theta.weights(), theta0.weights());
    let log_joint = |pol: &LatentPolicy, weights: &[f64], k: usize, c: &DVector<f64>| {
        weights[k].ln() + pol.context_term(k, c).log_marginal
    };
    let n = 100_000;
    let mut total = 0.0;
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = w[0];
        while u >= acc && k + 1 < w.len() {
            k += 1;
            acc += w[k];
        }
        let cc = &cur.comps[k];
        let eps = DVector::from_fn(2, |_, _| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
        let c = &cc.ctx_mean + cc.ctx_factor.l() * eps;
        total += log_joint(&cur, &w, k, &c) - log_joint(&base, &w0, k, &c);
    }
    let mc = total / n as f64;
    assert!(((mc - eta) / eta).abs() < 0.02, "{mc} vs {eta}");
}

#[test]
fn trust_region_zero_at_previous_and_nonnegative() {
    let (_, proj, thetas, buf, mut rng) = random_setup(12, 2, 20);
    let contexts = buf.contexts();
    let (g, grad) = trust_region(&proj, &thetas[1], &thetas[1], &contexts).unwrap();
    assert_eq!(g, 0.0);
    assert!(grad.iter().all(|v| v.abs() < 1e-12));
    for _ in 0..100 {
        let theta = perturb(&mut rng, &thetas[1], 1.0);
        assert!(trust_region(&proj, &thetas[1], &theta, &contexts).unwrap().0 >= 0.0);
    }
}

#[test]
fn trust_region_scalar_case() {
    let (cl, noise, cbar) = (0.8, 0.3, -0.2);
    let model = scalar_model(cl, 1.0, 0.0, cbar, noise);
    let proj = Projections::from_model(&model);
    let (prev, cur) = ((0.1, 0.9), (-0.4, 1.6));
    let contexts: Vec<DVector<f64>> = [-0.5, 0.0, 0.7].iter().map(|c| DVector::from_element(1, *c)).collect();
    let (g, _) = trust_region(&proj, &scalar_theta(prev.0, prev.1), &scalar_theta(cur.0, cur.1), &contexts).unwrap();
    let post = |t: (f64, f64), c: f64| {
        let s = 1.0 / (1.0 / t.1 + cl * cl / noise);
        (s * (cl * (c - cbar) / noise + t.0 / t.1), s)
    };
    let expected = [-0.5, 0.0, 0.7]
        .iter()
        .map(|c| {
            let (a, va) = post(prev, *c);
            let (m, vm) = post(cur, *c);
            0.5 * (va / vm + (m - a).powi(2) / vm - 1.0 + (vm / va).ln())
        })
        .sum::<f64>()
        / 3.0;
    assert!((g - expected).abs() < 1e-12, "{g} vs {expected}");
}

#[test]
fn trust_region_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let model = random_model(&mut rng, 3, 2, 2, 2);
        let proj = Projections::from_model(&model);
        let prev = perturb(&mut rng, &PolicyParams::initial(&model), 0.3);
        let theta = perturb(&mut rng, &prev, 0.4);
        let contexts: Vec<DVector<f64>> = (0..5)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let (_, g) = trust_region(&proj, &prev, &theta, &contexts).unwrap();
        let fd = central_diff(&|t| trust_region(&proj, &prev, t, &contexts).unwrap().0, &theta);
        assert!(rel_err(&g, &fd) < 1e-5, "{}", rel_err(&g, &fd));
    }
}

#[test]
fn huge_gamma_keeps_context_marginals() {
    let (model, _, thetas, buf, _) = random_setup(14, 2, 25);
    let theta0 = PolicyParams::initial(&model);
    let config = LampoConfig {
        gamma: 1e9,
        ..LampoConfig::default()
    };
    let out = improve(&buf, &thetas[1], &theta0, &config).unwrap();
    assert!(out.eta < 1e-4 || !out.accepted, "{}", out.eta);
    let (eta_prev, _) = context_regularizer(buf.projections(), &thetas[1], &theta0).unwrap();
    assert!(out.eta <= eta_prev + 1e-12);
}

#[test]
fn tiny_trust_region_pins_policy() {
    let (model, _, thetas, buf, _) = random_setup(15, 2, 25);
    let theta0 = PolicyParams::initial(&model);
    let config = LampoConfig {
        chi: 1e-12,
        ..LampoConfig::default()
    };
    let out = improve(&buf, &thetas[1], &theta0, &config).unwrap();
    assert!(out.mean_g < 1e-10, "{}", out.mean_g);
}

#[test]
fn accepted_updates_respect_bound_and_improve_objective() {
    let (model, _, thetas, buf, _) = random_setup(16, 2, 25);
    let theta0 = PolicyParams::initial(&model);
    let config = LampoConfig::default();
    let out = improve(&buf, &thetas[1], &theta0, &config).unwrap();
    let before = objective_value(&buf, &thetas[1], &theta0, config.gamma).unwrap();
    assert!(out.objective >= before - 1e-8);
    if out.accepted {
        let (g, _) = trust_region(buf.projections(), &thetas[1], &out.theta, &buf.contexts()).unwrap();
        assert!(g <= config.chi + 1e-4);
    }
}

#[test]
fn quadratic_toy_reaches_optimum() {
    let model = scalar_model(0.0, 1.0, 0.0, 0.0, 0.1);
    let proj = Projections::from_model(&model);
    let theta0 = PolicyParams::initial(&model);
    let config = LampoConfig::default();
    let target = 1.5;
    let expected_reward = |t: &PolicyParams| -((t.means[0][0] - target).powi(2) + t.variances(0)[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut buf = ExperienceBuffer::new(proj.clone());
    let mut theta = theta0.clone();
    let mut best = f64::NEG_INFINITY;
    for _ in 0..20 {
        let t = buf.push_policy(theta.clone()).unwrap();
        let pol = LatentPolicy::new(&proj, &theta).unwrap();
        for _ in 0..config.n_per_iter {
            let c = DVector::from_element(1, rng.random_range(-0.3..0.3));
            let s = pol.sample(&c, &mut rng).unwrap();
            buf.push_episode(Episode {
                reward: -(s.movement[0] - target).powi(2),
                context: vec![c[0]],
                component: 0,
                latent: vec![s.latent[0]],
                movement: vec![s.movement[0]],
                policy_index: t,
            })
            .unwrap();
        }
        theta = improve(&buf, &theta, &theta0, &config).unwrap().theta;
        best = expected_reward(&theta);
        if best > -0.05 {
            break;
        }
    }
    assert!(best > -0.05, "final expected reward {best}");
}
