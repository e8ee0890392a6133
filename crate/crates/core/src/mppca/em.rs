//! Maximum-likelihood fitting of the mixture by EM.
//!
//! Only the component label is treated as missing: given responsibilities,
//! each component's weighted log-likelihood is maximized exactly by the
//! weighted mean and the closed-form PPCA solution on the weighted scatter
//! matrix (leading eigenvectors scaled by `sqrt(λ_i − σ²)`, σ² the mean of
//! the discarded eigenvalues). Every M-step is therefore an exact
//! maximization and the log-likelihood cannot decrease.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kmeans, MppcaComponent, MppcaModel, NOISE_VAR_FLOOR};
use crate::error::{LampoError, Result};
use crate::linalg::{log_sum_exp, SpdFactor};

fn default_max_iters() -> usize {
    500
}

fn default_rel_tol() -> f64 {
    1e-6
}

fn default_kmeans_iters() -> usize {
    100
}

fn default_n_init() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmOptions {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Lloyd iterations of the k-means initializer.
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: usize,
    /// k-means restarts; the partition with the lowest within-cluster
    /// scatter seeds EM.
    #[serde(default = "default_n_init")]
    pub n_init: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            seed: 0,
            kmeans_iters: default_kmeans_iters(),
            n_init: default_n_init(),
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(LampoError::Config("max_iters must be >= 1".into()));
        }
        if self.n_init == 0 {
            return Err(LampoError::Config("n_init must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(LampoError::Config("rel_tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: MppcaModel,
    /// Log-likelihood evaluated at the start of every iteration; the last
    /// entry belongs to the returned model.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    /// Iterations whose M-step re-seeded a collapsed component. The
    /// likelihood is not guaranteed to increase across these.
    pub reinitialized: Vec<usize>,
}

impl EmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihoods.last().expect("at least one E-step")
    }
}

/// Fits from `(ω, c)` pairs.
pub fn fit_em_pairs(
    data: &[(DVector<f64>, DVector<f64>)],
    n_components: usize,
    latent_dim: usize,
    opts: &EmOptions,
) -> Result<EmFit> {
    let (m, dc) = match data.first() {
        Some((w, c)) => (w.len(), c.len()),
        None => return Err(LampoError::InsufficientData("empty dataset".into())),
    };
    let mut stacked = DMatrix::zeros(data.len(), m + dc);
    for (i, (w, c)) in data.iter().enumerate() {
        if w.len() != m || c.len() != dc {
            return Err(LampoError::Dimension {
                what: "(movement, context) pair",
                expected: m + dc,
                got: w.len() + c.len(),
            });
        }
        stacked.view_mut((i, 0), (1, m)).copy_from(&w.transpose());
        stacked.view_mut((i, m), (1, dc)).copy_from(&c.transpose());
    }
    fit_em(&stacked, m, n_components, latent_dim, opts)
}

/// Fits the mixture to `N × (m + d_c)` row data whose first `movement_dim`
/// columns hold ω. The returned model has `μ_k = 0`, `Σ_k = I`.
pub fn fit_em(
    data: &DMatrix<f64>,
    movement_dim: usize,
    n_components: usize,
    latent_dim: usize,
    opts: &EmOptions,
) -> Result<EmFit> {
    opts.validate()?;
    let (n, d) = data.shape();
    if movement_dim > d {
        return Err(LampoError::Dimension {
            what: "movement dimension",
            expected: d,
            got: movement_dim,
        });
    }
    if n_components == 0 || latent_dim == 0 {
        return Err(LampoError::Config("need K >= 1 and d_z >= 1".into()));
    }
    if latent_dim >= d {
        return Err(LampoError::Config(format!(
            "latent dimension {latent_dim} must be below data dimension {d}"
        )));
    }
    if n < n_components * (latent_dim + 1) {
        return Err(LampoError::InsufficientData(format!(
            "{n} points for K={n_components}, d_z={latent_dim}"
        )));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(LampoError::NonFinite("training data"));
    }

    let (n, d) = data.shape();
    let labels = initial_labels(data, n_components, opts);
    let mut resp = DMatrix::zeros(n, n_components);
    for (i, &l) in labels.iter().enumerate() {
        resp[(i, l)] = 1.0;
    }
    let overall_var = (0..d).map(|j| column_variance(data, j)).sum::<f64>() / d as f64;
    let mut components = Vec::with_capacity(n_components);
    for k in 0..n_components {
        components.push(m_step_component(data, resp.column(k).as_slice(), latent_dim));
    }
    let mut reinitialized = Vec::new();
    let mut model = assemble(components, data, movement_dim, latent_dim, overall_var, None, &mut reinitialized, 0)?;

    let mut lls: Vec<f64> = Vec::new();
    let mut converged = false;
    for iter in 0..opts.max_iters {
        let ll = e_step(&model, data, &mut resp)?;
        debug!("EM iteration {iter}: log-likelihood {ll:.6}");
        if let Some(&prev) = lls.last() {
            lls.push(ll);
            if (ll - prev).abs() <= opts.rel_tol * prev.abs().max(1e-300) {
                converged = true;
                break;
            }
        } else {
            lls.push(ll);
        }
        if iter + 1 == opts.max_iters {
            break;
        }
        let comps = (0..n_components)
            .map(|k| m_step_component(data, resp.column(k).as_slice(), latent_dim))
            .collect();
        model = assemble(
            comps,
            data,
            movement_dim,
            latent_dim,
            overall_var,
            Some(&model),
            &mut reinitialized,
            iter + 1,
        )?;
    }
    Ok(EmFit {
        model,
        log_likelihoods: lls,
        converged,
        reinitialized,
    })
}

fn column_variance(data: &DMatrix<f64>, j: usize) -> f64 {
    let col = data.column(j);
    let mean = col.mean();
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.nrows() as f64
}

/// Best of `n_init` k-means runs on per-dimension standardized data.
fn initial_labels(data: &DMatrix<f64>, k: usize, opts: &EmOptions) -> Vec<usize> {
    let mut white = data.clone();
    for j in 0..data.ncols() {
        let mean = data.column(j).mean();
        let sd = column_variance(data, j).sqrt();
        let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
        white.column_mut(j).apply(|v| *v = (*v - mean) * scale);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..opts.n_init {
        let labels = kmeans(&white, k, opts.kmeans_iters, &mut rng);
        let cost = inertia(&white, &labels, k);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, labels));
        }
    }
    best.expect("n_init >= 1").1
}

fn inertia(data: &DMatrix<f64>, labels: &[usize], k: usize) -> f64 {
    let d = data.ncols();
    let mut sums = DMatrix::<f64>::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        let mut row = sums.row_mut(l);
        row += data.row(i);
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let c = sums.row(l) / counts[l] as f64;
            (data.row(i) - c).norm_squared()
        })
        .sum()
}

struct Stats {
    mass: f64,
    mean: DVector<f64>,
    loading: DMatrix<f64>,
    noise_var: f64,
}

/// Weighted mean plus closed-form PPCA on the weighted scatter matrix.
fn m_step_component(data: &DMatrix<f64>, r: &[f64], latent_dim: usize) -> Stats {
    let (n, d) = data.shape();
    let mass: f64 = r.iter().sum();
    if mass <= 0.0 {
        return Stats {
            mass,
            mean: DVector::zeros(d),
            loading: DMatrix::zeros(d, latent_dim),
            noise_var: NOISE_VAR_FLOOR,
        };
    }
    let mut mean = DVector::zeros(d);
    for (i, row) in data.row_iter().enumerate() {
        mean.axpy(r[i], &row.transpose(), 1.0);
    }
    mean /= mass;
    let mut centered = DMatrix::zeros(n, d);
    for (i, row) in data.row_iter().enumerate() {
        let s = r[i].sqrt();
        for j in 0..d {
            centered[(i, j)] = s * (row[j] - mean[j]);
        }
    }
    let scatter = (centered.transpose() * &centered) / mass;
    let (loading, noise_var) = ppca_from_scatter(scatter, latent_dim);
    Stats {
        mass,
        mean,
        loading,
        noise_var,
    }
}

/// Maximum-likelihood PPCA loading and noise variance for a covariance matrix.
pub(crate) fn ppca_from_scatter(scatter: DMatrix<f64>, latent_dim: usize) -> (DMatrix<f64>, f64) {
    let d = scatter.nrows();
    let sym = (&scatter + scatter.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let discarded = &vals[latent_dim..];
    let noise_var = if discarded.is_empty() {
        NOISE_VAR_FLOOR
    } else {
        (discarded.iter().sum::<f64>() / discarded.len() as f64).max(NOISE_VAR_FLOOR)
    };
    let mut loading = DMatrix::zeros(d, latent_dim);
    for (q, &idx) in order.iter().take(latent_dim).enumerate() {
        let scale = (vals[q] - noise_var).max(0.0).sqrt();
        loading.set_column(q, &(eig.eigenvectors.column(idx) * scale));
    }
    (loading, noise_var)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    stats: Vec<Stats>,
    data: &DMatrix<f64>,
    movement_dim: usize,
    latent_dim: usize,
    overall_var: f64,
    previous: Option<&MppcaModel>,
    reinitialized: &mut Vec<usize>,
    iteration: usize,
) -> Result<MppcaModel> {
    let (n, d) = data.shape();
    let threshold = 1e-6 * n as f64;
    let k_total = stats.len();
    let mut worst_point: Option<usize> = None;
    let mut components = Vec::with_capacity(k_total);
    for (k, s) in stats.into_iter().enumerate() {
        if s.mass < threshold {
            // Collapsed component: reseed on the point the current model explains worst.
            let idx = match worst_point {
                Some(i) => i,
                None => {
                    let i = lowest_density_point(data, previous)?;
                    worst_point = Some(i);
                    i
                }
            };
            warn!("EM iteration {iteration}: component {k} collapsed (mass {:.3e}), reinitializing at point {idx}", s.mass);
            if reinitialized.last() != Some(&iteration) {
                reinitialized.push(iteration);
            }
            components.push(MppcaComponent {
                weight: 1.0 / k_total as f64,
                loading: DMatrix::zeros(d, latent_dim),
                offset: data.row(idx).transpose(),
                noise_var: overall_var.max(NOISE_VAR_FLOOR),
                latent_mean: DVector::zeros(latent_dim),
                latent_var: DVector::from_element(latent_dim, 1.0),
            });
        } else {
            components.push(MppcaComponent {
                weight: s.mass / n as f64,
                loading: s.loading,
                offset: s.mean,
                noise_var: s.noise_var,
                latent_mean: DVector::zeros(latent_dim),
                latent_var: DVector::from_element(latent_dim, 1.0),
            });
        }
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= total;
    }
    Ok(MppcaModel {
        movement_dim,
        context_dim: d - movement_dim,
        latent_dim,
        components,
    })
}

fn lowest_density_point(data: &DMatrix<f64>, model: Option<&MppcaModel>) -> Result<usize> {
    let Some(model) = model else {
        return Ok(0);
    };
    let dens = model.density()?;
    let mut worst = (0, f64::INFINITY);
    for (i, row) in data.row_iter().enumerate() {
        let ld = dens.log_density(&row.transpose())?;
        if ld < worst.1 {
            worst = (i, ld);
        }
    }
    Ok(worst.0)
}

/// Fills `resp` with posterior component probabilities and returns the total log-likelihood.
fn e_step(model: &MppcaModel, data: &DMatrix<f64>, resp: &mut DMatrix<f64>) -> Result<f64> {
    let factors: Vec<(f64, DVector<f64>, SpdFactor)> = model
        .components
        .iter()
        .map(|c| {
            Ok((
                c.weight.ln(),
                c.marginal_mean(),
                SpdFactor::new(c.marginal_cov(), "component covariance")?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut ll = 0.0;
    let mut lj = vec![0.0; factors.len()];
    for (i, row) in data.row_iter().enumerate() {
        let x = row.transpose();
        for (k, (lw, mean, f)) in factors.iter().enumerate() {
            lj[k] = lw + f.gaussian_log_pdf(&x, mean);
        }
        let lse = log_sum_exp(&lj);
        ll += lse;
        for (k, v) in lj.iter().enumerate() {
            resp[(i, k)] = (v - lse).exp();
        }
    }
    if !ll.is_finite() {
        return Err(LampoError::NonFinite("EM log-likelihood"));
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identical_points_collapse_to_floor() {
        let x0 = [0.3, -1.0, 2.0, 0.5];
        let data = DMatrix::from_fn(20, 4, |_, j| x0[j]);
        let fit = fit_em(&data, 3, 2, 1, &EmOptions::default()).unwrap();
        for c in &fit.model.components {
            for j in 0..4 {
                assert!((c.offset[j] - x0[j]).abs() < 1e-12);
            }
            assert_eq!(c.noise_var, NOISE_VAR_FLOOR);
        }
    }

    #[test]
    fn too_few_points_is_error() {
        let data = DMatrix::from_fn(5, 4, |i, j| (i * j) as f64);
        assert!(matches!(
            fit_em(&data, 3, 2, 2, &EmOptions::default()),
            Err(LampoError::InsufficientData(_))
        ));
    }

    #[test]
    fn latent_dim_must_be_below_data_dim() {
        let data = DMatrix::from_fn(50, 3, |i, j| ((i + 1) * (j + 2)) as f64);
        assert!(fit_em(&data, 2, 1, 3, &EmOptions::default()).is_err());
    }

    #[test]
    fn near_full_rank_ppca_matches_gaussian_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 5;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let n = 4000;
        let data = DMatrix::from_fn(n, d, |_, _| 0.0);
        let mut data = data;
        for i in 0..n {
            let e = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x: DVector<f64> = &a * e + DVector::from_element(d, 1.0);
            data.set_row(i, &x.transpose());
        }
        let fit = fit_em(&data, 3, 1, d - 1, &EmOptions::default()).unwrap();
        // Closed-form Gaussian MLE log-likelihood: -N/2 (d ln 2π + ln|S| + d).
        let mean = DVector::from_fn(d, |j, _| data.column(j).mean());
        let mut s = DMatrix::zeros(d, d);
        for row in data.row_iter() {
            let r = row.transpose() - &mean;
            s += &r * r.transpose();
        }
        s /= n as f64;
        let logdet = s.clone().cholesky().unwrap().l().diagonal().map(|v| v.ln()).sum() * 2.0;
        let mle = -0.5 * n as f64 * (d as f64 * crate::linalg::LN_2PI + logdet + d as f64);
        let ll = fit.final_log_likelihood();
        assert!((ll - mle).abs() <= 0.01 * mle.abs(), "{ll} vs {mle}");
    }

    #[test]
    fn log_likelihood_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 600;
        let data = DMatrix::from_fn(n, 4, |i, j| {
            let shift = if i % 3 == 0 { 4.0 } else { -1.0 };
            shift * (j as f64 + 1.0) * 0.3 + rng.random_range(-1.0..1.0)
        });
        let fit = fit_em(&data, 2, 3, 1, &EmOptions::default()).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * n as f64, "{} -> {}", w[0], w[1]);
        }
        assert!(fit.model.validate().is_ok());
    }

    #[test]
    fn ppca_closed_form_reproduces_low_rank_plus_noise() {
        let w = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let cov = &w * w.transpose() + DMatrix::identity(3, 3) * 0.1;
        let (l, s2) = ppca_from_scatter(cov.clone(), 1);
        assert!((s2 - 0.1).abs() < 1e-12);
        let rebuilt = &l * l.transpose() + DMatrix::identity(3, 3) * s2;
        assert!((rebuilt - cov).amax() < 1e-12);
    }
}
