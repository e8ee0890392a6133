//! Sequential quadratic programming for one smooth inequality constraint.
//!
//! Solves `max f(x) s.t. g(x) ≤ b`. Internally this is `min F = −f` with
//! `c = g − b ≤ 0`: a damped BFGS model of the Lagrangian Hessian, a QP
//! subproblem with the linearized constraint (closed form for a single
//! constraint), and an ℓ1 merit line search with a second-order correction.
//! An infeasible start first goes through a restoration phase that drives
//! the violation down with Gauss-Newton steps on `c`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Caller-supplied problem. Both callables return a value and its gradient.
pub trait NlpProblem {
    fn dim(&self) -> usize;
    /// Objective to maximize.
    fn objective(&self, x: &[f64]) -> (f64, Vec<f64>);
    /// Constraint function; feasible iff the value is `≤ bound()`.
    fn constraint(&self, x: &[f64]) -> (f64, Vec<f64>);
    fn bound(&self) -> f64;
}

/// Closure-backed problem, convenient for tests and small callers.
pub struct FnProblem<F, G> {
    pub dim: usize,
    pub objective: F,
    pub constraint: G,
    pub bound: f64,
}

impl<F, G> NlpProblem for FnProblem<F, G>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    G: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn objective(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.objective)(x)
    }
    fn constraint(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.constraint)(x)
    }
    fn bound(&self) -> f64 {
        self.bound
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub kkt_tol: f64,
    pub step_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
    pub restoration_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            kkt_tol: 1e-6,
            step_tol: 1e-10,
            armijo: 1e-4,
            max_backtracks: 40,
            restoration_iters: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Failed,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Failed => "failed",
        })
    }
}

/// Merit values around one accepted step, both under the same penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub merit_before: f64,
    pub merit_after: f64,
    pub penalty: f64,
    pub step_norm: f64,
    pub kkt_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub x_star: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Multiplier of the constraint at `x_star`.
    pub multiplier: f64,
    pub objective: f64,
    pub constraint: f64,
    pub status: SolveStatus,
    pub message: String,
    pub trace: Vec<TraceEntry>,
}

/// Internal minimization-form evaluation.
#[derive(Clone, Debug)]
struct Point {
    x: DVector<f64>,
    f: f64,
    gf: DVector<f64>,
    c: f64,
    gc: DVector<f64>,
}

impl Point {
    fn finite(&self) -> bool {
        self.f.is_finite()
            && self.c.is_finite()
            && self.gf.iter().all(|v| v.is_finite())
            && self.gc.iter().all(|v| v.is_finite())
    }

    fn merit(&self, mu: f64) -> f64 {
        if self.finite() {
            self.f + mu * self.c.max(0.0)
        } else {
            f64::INFINITY
        }
    }
}

fn evaluate<P: NlpProblem + ?Sized>(p: &P, x: DVector<f64>) -> Point {
    let (f, gf) = p.objective(x.as_slice());
    let (g, gg) = p.constraint(x.as_slice());
    let n = x.len();
    let fix = |v: Vec<f64>| {
        if v.len() == n {
            DVector::from_vec(v)
        } else {
            DVector::from_element(n, f64::NAN)
        }
    };
    Point {
        x,
        f: -f,
        gf: -fix(gf),
        c: g - p.bound(),
        gc: fix(gg),
    }
}

/// KKT residual for multiplier λ ≥ 0 in minimization form.
fn kkt_for(p: &Point, lambda: f64) -> f64 {
    let stationarity = (&p.gf + &p.gc * lambda).norm() / (1.0 + p.gf.norm());
    stationarity + p.c.max(0.0) + (lambda * p.c).abs()
}

/// Smallest residual over a few multiplier candidates.
fn kkt_residual(p: &Point, lambda_qp: f64) -> (f64, f64) {
    let gc2 = p.gc.norm_squared();
    let lambda_ls = if gc2 > 0.0 {
        (-p.gf.dot(&p.gc) / gc2).max(0.0)
    } else {
        0.0
    };
    [0.0, lambda_ls, lambda_qp.max(0.0)]
        .into_iter()
        .map(|l| (kkt_for(p, l), l))
        .fold((f64::INFINITY, 0.0), |best, cur| if cur.0 < best.0 { cur } else { best })
}

struct QpStep {
    d: DVector<f64>,
    lambda: f64,
}

/// `min ∇Fᵀd + ½ dᵀBd  s.t.  c + ∇cᵀd ≤ 0`.
fn qp_step(chol: &Cholesky<f64, nalgebra::Dyn>, p: &Point) -> QpStep {
    let d0 = -chol.solve(&p.gf);
    let lin = p.c + p.gc.dot(&d0);
    if lin <= 0.0 {
        return QpStep { d: d0, lambda: 0.0 };
    }
    let bgc = chol.solve(&p.gc);
    let denom = p.gc.dot(&bgc);
    if !(denom > 0.0) {
        return QpStep { d: d0, lambda: 0.0 };
    }
    let lambda = lin / denom;
    QpStep {
        d: d0 - bgc * lambda,
        lambda,
    }
}

fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> bool {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 1e-300) {
        return false;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let t = 0.8 * sbs / (sbs - sy);
        y * t + &bs * (1.0 - t)
    };
    let sr = s.dot(&r);
    if !(sr > 0.0) {
        return false;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
    *b = (&*b + b.transpose()) * 0.5;
    b.iter().all(|v| v.is_finite())
}

/// Gauss-Newton steps on the violation until the point is feasible.
fn restore<P: NlpProblem + ?Sized>(problem: &P, mut p: Point, opts: &SolveOptions) -> Point {
    for _ in 0..opts.restoration_iters {
        if p.c <= 0.0 {
            break;
        }
        let gc2 = p.gc.norm_squared();
        if !(gc2 > 0.0) {
            break;
        }
        // Aim slightly inside so the next linearization is not degenerate.
        let target = p.c + 1e-3 * p.c.abs().min(1.0);
        let dir = &p.gc * (-target / gc2);
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..opts.max_backtracks {
            let trial = evaluate(problem, &p.x + &dir * alpha);
            if trial.finite() && trial.c < p.c {
                p = trial;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    p
}

pub fn solve<P: NlpProblem + ?Sized>(problem: &P, x0: &[f64], opts: &SolveOptions) -> SolveReport {
    let n = problem.dim();
    let fail = |x: &[f64], msg: &str| SolveReport {
        x_star: x.to_vec(),
        iterations: 0,
        kkt_residual: f64::INFINITY,
        multiplier: 0.0,
        objective: f64::NAN,
        constraint: f64::NAN,
        status: SolveStatus::Failed,
        message: msg.to_string(),
        trace: Vec::new(),
    };
    if x0.len() != n {
        return fail(x0, "start point has wrong dimension");
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return fail(x0, "start point is not finite");
    }
    let mut p = evaluate(problem, DVector::from_column_slice(x0));
    if !p.finite() {
        return fail(x0, "non-finite evaluation at start point");
    }
    if p.c > 0.0 {
        p = restore(problem, p, opts);
    }

    let mut b = DMatrix::<f64>::identity(n, n);
    let mut first_update = true;
    let mut mu: f64 = 1.0;
    let mut lambda = 0.0;
    let mut trace = Vec::new();
    let mut status = SolveStatus::MaxIter;
    let mut message = String::from("iteration limit reached");
    let mut iterations = 0;

    let finish = |p: &Point, lambda_qp: f64, iterations, status, message, trace| {
        let (kkt, mult) = kkt_residual(p, lambda_qp);
        SolveReport {
            x_star: p.x.iter().copied().collect(),
            iterations,
            kkt_residual: kkt,
            multiplier: mult,
            objective: -p.f,
            constraint: p.c + problem.bound(),
            status,
            message,
            trace,
        }
    };

    while iterations < opts.max_iters {
        let chol = match Cholesky::new(b.clone()) {
            Some(c) => c,
            None => {
                b = DMatrix::identity(n, n);
                first_update = true;
                Cholesky::new(b.clone()).expect("identity is positive definite")
            }
        };
        let qp = qp_step(&chol, &p);
        let (kkt, _) = kkt_residual(&p, qp.lambda);
        if kkt < opts.kkt_tol {
            // One last model step is nearly free and often exact near the optimum.
            let polish = evaluate(problem, &p.x + &qp.d);
            let mu_p = mu.max(1.5 * qp.lambda);
            if polish.merit(mu_p) < p.merit(mu_p) && kkt_residual(&polish, qp.lambda).0 <= kkt {
                trace.push(TraceEntry {
                    iteration: iterations,
                    merit_before: p.merit(mu_p),
                    merit_after: polish.merit(mu_p),
                    penalty: mu_p,
                    step_norm: qp.d.norm(),
                    kkt_residual: kkt,
                });
                p = polish;
            }
            status = SolveStatus::Converged;
            message = "KKT residual below tolerance".into();
            lambda = qp.lambda;
            break;
        }
        iterations += 1;
        let d = qp.d;
        if d.norm() < opts.step_tol {
            status = if kkt < 1e-5 { SolveStatus::Converged } else { SolveStatus::Failed };
            message = "step below tolerance".into();
            lambda = qp.lambda;
            break;
        }
        if qp.lambda > 0.0 && mu < 1.5 * qp.lambda {
            mu = 1.5 * qp.lambda + 1e-8;
        }
        let merit0 = p.merit(mu);
        let slope = p.gf.dot(&d) - mu * p.c.max(0.0);
        if !(slope < 0.0) {
            // No descent available for the model; restart curvature once.
            if !first_update {
                b = DMatrix::identity(n, n);
                first_update = true;
                continue;
            }
            status = if kkt < 1e-5 { SolveStatus::Converged } else { SolveStatus::Failed };
            message = "no descent direction".into();
            lambda = qp.lambda;
            break;
        }

        let mut accepted: Option<Point> = None;
        let full = evaluate(problem, &p.x + &d);
        if full.merit(mu) <= merit0 + opts.armijo * slope {
            accepted = Some(full);
        } else if qp.lambda > 0.0 && full.finite() {
            // Second-order correction toward the curved constraint boundary.
            let gc2 = p.gc.norm_squared();
            if gc2 > 0.0 {
                let corr = &p.gc * (-full.c / gc2);
                let soc = evaluate(problem, &p.x + &d + corr);
                if soc.merit(mu) <= merit0 + opts.armijo * slope {
                    accepted = Some(soc);
                }
            }
        }
        if accepted.is_none() {
            let mut alpha = 0.5;
            for _ in 0..opts.max_backtracks {
                let trial = evaluate(problem, &p.x + &d * alpha);
                if trial.merit(mu) <= merit0 + opts.armijo * alpha * slope {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
        }
        let Some(next) = accepted else {
            if !first_update {
                b = DMatrix::identity(n, n);
                first_update = true;
                continue;
            }
            status = if kkt < 1e-5 { SolveStatus::Converged } else { SolveStatus::Failed };
            message = "line search failed".into();
            lambda = qp.lambda;
            break;
        };

        let s = &next.x - &p.x;
        let step_norm = s.norm();
        let grad_lag = |q: &Point| &q.gf + &q.gc * qp.lambda;
        let y = grad_lag(&next) - grad_lag(&p);
        if first_update {
            let sy = s.dot(&y);
            let yy = y.norm_squared();
            if sy > 0.0 && yy > 0.0 {
                b = DMatrix::identity(n, n) * (yy / sy);
            }
            first_update = false;
        }
        if !damped_bfgs(&mut b, &s, &y) {
            b = DMatrix::identity(n, n);
            first_update = true;
        }
        trace.push(TraceEntry {
            iteration: iterations,
            merit_before: merit0,
            merit_after: next.merit(mu),
            penalty: mu,
            step_norm,
            kkt_residual: kkt,
        });
        p = next;
        lambda = qp.lambda;
        if step_norm < opts.step_tol {
            let (kkt_new, _) = kkt_residual(&p, lambda);
            status = if kkt_new < 1e-5 { SolveStatus::Converged } else { SolveStatus::Failed };
            message = "step below tolerance".into();
            break;
        }
    }
    finish(&p, lambda, iterations, status, message, trace)
}
