//! MAP estimation, Laplace evidence, normal-approximation and adaptive
//! Metropolis sampling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::Posterior;

const GRAD_STEP: f64 = 6.055_454_452_393_343e-6; // ε^(1/3)
const HESS_STEP: f64 = 1.220_703_125e-4; // ε^(1/4)
const STOP_FACTOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DerivativeError {
    #[error("log density is not finite: {0}")]
    NonFinite(String),
    #[error("difference stencil reached the boundary of the support ({0}); shrink the step or move away from the boundary")]
    Boundary(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("optimization failed: every start ended outside the support")]
    OptimizationFailed,
    #[error("initial point has dimension {got}, density has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Derivative(#[from] DerivativeError),
    #[error("Hessian of the negative log posterior is not positive definite; the model is not identifiable at the MAP")]
    NotPositiveDefinite,
    #[error("log density is not finite at the initial point")]
    InfeasibleStart,
    #[error("no proposal was accepted after burn-in")]
    NoAcceptance,
    #[error("invalid settings: {0}")]
    Settings(String),
}

/// A log density on ℝᵈ as consumed by optimizers and samplers.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// `-∞` marks points outside the support.
    fn log_density(&self, x: &[f64]) -> f64;

    /// A density equal to this one at `x` that is smooth in a neighbourhood of
    /// `x`, used for differencing. `None` means the density itself is smooth.
    fn frozen_at(&self, _x: &[f64]) -> Option<Box<dyn LogDensity + '_>> {
        None
    }

    /// Value and gradient by central differences.
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), DerivativeError> {
        let f0 = self.log_density(x);
        if !f0.is_finite() {
            return Err(DerivativeError::NonFinite("centre point".into()));
        }
        let frozen = self.frozen_at(x);
        let f = |p: &[f64]| match &frozen {
            Some(fr) => fr.log_density(p),
            None => self.log_density(p),
        };
        let mut p = x.to_vec();
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            let h = GRAD_STEP * x[i].abs().max(1.0);
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            if !(up.is_finite() && down.is_finite()) {
                return Err(DerivativeError::Boundary(format!("coordinate {i}")));
            }
            grad[i] = (up - down) / (2.0 * h);
        }
        Ok((f0, grad))
    }

    /// Symmetrized Hessian of the log density by central second differences.
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, DerivativeError> {
        let f0 = self.log_density(x);
        if !f0.is_finite() {
            return Err(DerivativeError::NonFinite("centre point".into()));
        }
        let frozen = self.frozen_at(x);
        let f = |p: &[f64]| match &frozen {
            Some(fr) => fr.log_density(p),
            None => self.log_density(p),
        };
        let d = x.len();
        let s: Vec<f64> = x.iter().map(|v| HESS_STEP * v.abs().max(1.0)).collect();
        let eval = |moves: &[(usize, f64)]| {
            let mut p = x.to_vec();
            for &(i, h) in moves {
                p[i] += h;
            }
            let v = f(&p);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DerivativeError::Boundary(format!("stencil point {moves:?}")))
            }
        };
        let mut h = DMatrix::zeros(d, d);
        for i in 0..d {
            h[(i, i)] = (eval(&[(i, s[i])])? - 2.0 * f0 + eval(&[(i, -s[i])])?) / (s[i] * s[i]);
            for j in 0..i {
                let v = (eval(&[(i, s[i]), (j, s[j])])? - eval(&[(i, s[i]), (j, -s[j])])?
                    - eval(&[(i, -s[i]), (j, s[j])])?
                    + eval(&[(i, -s[i]), (j, -s[j])])?)
                    / (4.0 * s[i] * s[j]);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok(h)
    }
}

/// Wraps a closure as a [`LogDensity`].
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    /// Nelder–Mead evaluation budget for the warm start; 0 skips it.
    pub simplex_evals: usize,
    pub max_iter: usize,
    /// Threshold on the scaled gradient norm.
    pub grad_tol: f64,
    /// Jittered restarts in addition to the run from the initial point.
    pub restarts: usize,
    pub jitter_sd: f64,
    pub seed: u64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            simplex_evals: 200,
            max_iter: 200,
            grad_tol: 1e-5,
            restarts: 3,
            jitter_sd: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Scaled gradient norm at `x`.
    pub grad_norm: f64,
}

fn scaled_grad_norm(g: &[f64], x: &[f64], f: f64) -> f64 {
    let denom = f.abs().max(1.0);
    g.iter()
        .zip(x)
        .map(|(gi, xi)| gi.abs() * xi.abs().max(1.0) / denom)
        .fold(0.0, f64::max)
}

/// Nelder–Mead on `-f`, returning the best vertex.
fn nelder_mead(f: &dyn LogDensity, x0: &[f64], max_evals: usize) -> (Vec<f64>, f64) {
    let d = x0.len();
    let cost = |x: &[f64]| {
        let v = f.log_density(x);
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.to_vec(), cost(x0)));
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += 0.1 * x0[i].abs().max(1.0);
        let c = cost(&x);
        simplex.push((x, c));
    }
    let mut evals = d + 1;
    let point = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect()
    };
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        if best.is_finite() && (worst - best).abs() <= 1e-10 * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / d as f64;
            }
        }
        let reflected = point(&centroid, &simplex[d].0, -1.0);
        let fr = cost(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = point(&centroid, &simplex[d].0, -2.0);
            let fe = cost(&expanded);
            evals += 1;
            simplex[d] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (reflected, fr);
        } else {
            let (target, ft) = if fr < simplex[d].1 {
                (reflected.clone(), fr)
            } else {
                (simplex[d].0.clone(), simplex[d].1)
            };
            let contracted = point(&centroid, &target, 0.5);
            let fc = cost(&contracted);
            evals += 1;
            if fc < ft {
                simplex[d] = (contracted, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    v.0 = point(&x_best, &v.0, 0.5);
                    v.1 = cost(&v.0);
                }
                evals += d;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, c) = simplex.swap_remove(0);
    (x, -c)
}

/// BFGS on `-f` with central-difference gradients and backtracking line search.
fn bfgs(f: &dyn LogDensity, x0: &[f64], opts: &OptimOptions) -> Option<Optimum> {
    let d = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, g) = f.value_and_gradient(&x).ok()?;
    let mut grad: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut first = true;
    let mut iterations = 0;
    let mut stalls = 0;
    // Iterate past the convergence threshold; the line search or stall test ends the run.
    while iterations < opts.max_iter {
        if scaled_grad_norm(&grad, &x, fx) < STOP_FACTOR * opts.grad_tol {
            break;
        }
        iterations += 1;
        let g = DVector::from_column_slice(&grad);
        let mut p = -(&hinv * &g);
        let mut slope = p.dot(&g);
        if !(slope < 0.0) {
            hinv.fill_with_identity();
            p = -g.clone();
            slope = p.dot(&g);
        }
        // Keep trial steps within a unit box on the link scale.
        let longest = p.amax();
        if longest > 1.0 {
            p /= longest;
            slope /= longest;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(p.iter()).map(|(xi, pi)| xi + alpha * pi).collect();
            let ft = f.log_density(&trial);
            if ft.is_finite() && -ft <= -fx + 1e-4 * alpha * slope {
                // Points whose gradient cannot be formed are treated like failed trials.
                if let Ok(vg) = f.value_and_gradient(&trial) {
                    accepted = Some((trial, vg));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, (f_new, g_new))) = accepted else {
            break;
        };
        let grad_new: Vec<f64> = g_new.iter().map(|v| -v).collect();
        let s = DVector::from_iterator(d, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(d, grad_new.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                hinv = DMatrix::identity(d, d) * (sy / y.dot(&y));
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let gain = f_new - fx;
        stalls = if gain.abs() <= 1e-13 * (1.0 + fx.abs()) { stalls + 1 } else { 0 };
        x = x_new;
        fx = f_new;
        grad = grad_new;
        if stalls >= 3 {
            break;
        }
    }
    let grad_norm = scaled_grad_norm(&grad, &x, fx);
    Some(Optimum {
        x,
        value: fx,
        converged: grad_norm < opts.grad_tol,
        iterations,
        grad_norm,
    })
}

/// Maximizes a log density: simplex warm start then BFGS, from the initial point
/// and from jittered restarts, keeping the best result.
pub fn maximize(
    f: &dyn LogDensity,
    init: &[f64],
    opts: &OptimOptions,
) -> Result<Optimum, InferenceError> {
    if init.len() != f.dim() {
        return Err(InferenceError::Dimension {
            expected: f.dim(),
            got: init.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<Optimum> = None;
    for r in 0..=opts.restarts {
        let start: Vec<f64> = if r == 0 {
            init.to_vec()
        } else {
            init.iter()
                .map(|v| v + opts.jitter_sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let warm = if opts.simplex_evals > 0 {
            let (x, v) = nelder_mead(f, &start, opts.simplex_evals);
            if v.is_finite() {
                x
            } else {
                continue;
            }
        } else {
            start
        };
        let Some(result) = bfgs(f, &warm, opts) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| result.value > b.value) {
            best = Some(result);
        }
    }
    best.ok_or(InferenceError::OptimizationFailed)
}

/// `-∇² log f` at `x`, symmetrized.
pub fn hessian_at(f: &dyn LogDensity, x: &[f64]) -> Result<DMatrix<f64>, InferenceError> {
    let h = f.hessian(x)?;
    Ok(-(&h + h.transpose()) * 0.5)
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub map: Vec<f64>,
    pub log_post_at_map: f64,
    pub log_lik_at_map: f64,
    /// `-∇²(ℓ + log π)` at the MAP, row-major.
    pub hessian: Vec<Vec<f64>>,
    pub log_evidence: Option<f64>,
    pub aic: f64,
    pub bic: f64,
    /// Optimizer met the gradient tolerance and the Hessian is positive definite.
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl FitResult {
    pub fn dim(&self) -> usize {
        self.map.len()
    }

    pub fn hessian_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.hessian)
    }

    /// Marginal posterior standard deviations under the normal approximation.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let inv = self.hessian_matrix().cholesky()?.inverse();
        Some(inv.diagonal().iter().map(|v| v.sqrt()).collect())
    }
}

/// MAP, Hessian and information criteria for one model.
pub fn find_map(
    post: &Posterior<'_>,
    init: &[f64],
    opts: &OptimOptions,
) -> Result<FitResult, InferenceError> {
    let opt = maximize(post, init, opts)?;
    let hessian = hessian_at(post, &opt.x)?;
    let positive = hessian.clone().cholesky().is_some();
    let log_lik = post.log_likelihood(&opt.x);
    let (aic, bic) = information_criteria(log_lik, opt.x.len(), post.data().n());
    Ok(FitResult {
        log_post_at_map: opt.value,
        log_lik_at_map: log_lik,
        hessian: to_rows(&hessian),
        log_evidence: None,
        aic,
        bic,
        converged: opt.converged && positive,
        iterations: opt.iterations,
        grad_norm: opt.grad_norm,
        map: opt.x,
    })
}

/// Laplace approximation `log p̂ = ℓ + log π + (d/2) log 2π − ½ log det H`.
pub fn laplace_log_evidence(fit: &FitResult) -> Result<f64, InferenceError> {
    let d = fit.dim();
    if d == 0 {
        return Ok(fit.log_post_at_map);
    }
    let chol = fit
        .hessian_matrix()
        .cholesky()
        .ok_or(InferenceError::NotPositiveDefinite)?;
    let half_log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    Ok(fit.log_post_at_map + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - half_log_det)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Mcmc,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub draws: Vec<Vec<f64>>,
    pub source: SampleSource,
    pub seed: u64,
    pub acceptance_rate: Option<f64>,
    pub thinning: Option<usize>,
    pub burn_in: Option<usize>,
}

impl PosteriorSample {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Independent draws from `N(MAP, H⁻¹)`.
pub fn sample_normal_approx(
    fit: &FitResult,
    n: usize,
    seed: u64,
) -> Result<PosteriorSample, InferenceError> {
    if n == 0 {
        return Err(InferenceError::Settings("sample size must be positive".into()));
    }
    let chol = fit
        .hessian_matrix()
        .cholesky()
        .ok_or(InferenceError::NotPositiveDefinite)?;
    let lt = chol.l().transpose();
    let mean = DVector::from_column_slice(&fit.map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = fit.dim();
    let draws = (0..n)
        .map(|_| {
            let z = standard_normal_vec(&mut rng, d);
            // Lᵀ v = z gives cov(v) = (L Lᵀ)⁻¹.
            let v = lt.solve_upper_triangular(&z).expect("non-singular factor");
            (&mean + v).iter().copied().collect()
        })
        .collect();
    Ok(PosteriorSample {
        draws,
        source: SampleSource::NormalApprox,
        seed,
        acceptance_rate: None,
        thinning: None,
        burn_in: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcOptions {
    /// Total iterations including burn-in.
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub target_acceptance: f64,
    /// Proposal covariance used before empirical adaptation starts, row-major.
    pub init_cov: Option<Vec<Vec<f64>>>,
    /// Iteration from which the empirical covariance drives proposals; defaults to `10 d`.
    pub adapt_start: Option<usize>,
}

impl McmcOptions {
    pub fn new(n_iter: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        Self {
            n_iter,
            burn_in,
            thin,
            seed,
            target_acceptance: 0.234,
            init_cov: None,
            adapt_start: None,
        }
    }

    pub fn with_init_cov(mut self, cov: Vec<Vec<f64>>) -> Self {
        self.init_cov = Some(cov);
        self
    }
}

fn proposal_factor(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = cov.nrows();
    let ridge = 1e-10 * (cov.trace() / d as f64).max(1e-300);
    (cov + DMatrix::identity(d, d) * ridge).cholesky().map(|c| c.l())
}

/// Random-walk Metropolis with running-covariance adaptation and Robbins–Monro
/// scaling toward the target acceptance rate. Adaptation stops after burn-in.
pub fn adaptive_metropolis(
    f: &dyn LogDensity,
    init: &[f64],
    opts: &McmcOptions,
) -> Result<PosteriorSample, InferenceError> {
    let d = f.dim();
    if init.len() != d {
        return Err(InferenceError::Dimension {
            expected: d,
            got: init.len(),
        });
    }
    if opts.thin == 0 || opts.n_iter <= opts.burn_in {
        return Err(InferenceError::Settings(
            "need thin > 0 and n_iter > burn_in".into(),
        ));
    }
    let mut x = DVector::from_column_slice(init);
    let mut lp = f.log_density(init);
    if !lp.is_finite() {
        return Err(InferenceError::InfeasibleStart);
    }
    let init_cov = match &opts.init_cov {
        Some(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(InferenceError::Settings("init_cov has the wrong shape".into()));
            }
            from_rows(rows)
        }
        None => DMatrix::identity(d, d) * 0.01,
    };
    let adapt_start = opts.adapt_start.unwrap_or(10 * d);
    let mut factor = proposal_factor(&init_cov)
        .ok_or_else(|| InferenceError::Settings("init_cov is not positive definite".into()))?;
    let mut log_scale = (2.38 / (d as f64).sqrt()).ln();
    let mut mean = x.clone();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draws = Vec::with_capacity((opts.n_iter - opts.burn_in) / opts.thin);
    let mut accepted_after = 0usize;

    for i in 0..opts.n_iter {
        let z = standard_normal_vec(&mut rng, d);
        let prop = &x + (&factor * z) * log_scale.exp();
        let lp_prop = f.log_density(prop.as_slice());
        let log_ratio = lp_prop - lp;
        let accept_prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.exp().min(1.0) };
        let u: f64 = rng.random();
        if u < accept_prob {
            x = prop;
            lp = lp_prop;
            if i >= opts.burn_in {
                accepted_after += 1;
            }
        }
        if i < opts.burn_in {
            let w = 1.0 / (i as f64 + 2.0);
            let delta = &x - &mean;
            mean += &delta * w;
            cov = &cov * (1.0 - w) + (&delta * delta.transpose()) * (w * (1.0 - w));
            log_scale += (i as f64 + 1.0).powf(-0.6) * (accept_prob - opts.target_acceptance);
            if i + 1 >= adapt_start {
                if let Some(l) = proposal_factor(&cov) {
                    factor = l;
                }
            }
        } else if (i - opts.burn_in) % opts.thin == opts.thin - 1 {
            draws.push(x.iter().copied().collect());
        }
    }
    if accepted_after == 0 {
        return Err(InferenceError::NoAcceptance);
    }
    Ok(PosteriorSample {
        draws,
        source: SampleSource::Mcmc,
        seed: opts.seed,
        acceptance_rate: Some(accepted_after as f64 / (opts.n_iter - opts.burn_in) as f64),
        thinning: Some(opts.thin),
        burn_in: Some(opts.burn_in),
    })
}

/// Linear-interpolation (type 7) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Type-7 quantile of unsorted data.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Equal-tailed intervals per coordinate.
pub fn credible_intervals(sample: &PosteriorSample, level: f64) -> Vec<(f64, f64)> {
    let d = sample.draws.first().map_or(0, Vec::len);
    let tail = 0.5 * (1.0 - level);
    (0..d)
        .map(|j| {
            let mut col = sample.column(j);
            col.sort_by(f64::total_cmp);
            (quantile_sorted(&col, tail), quantile_sorted(&col, 1.0 - tail))
        })
        .collect()
}

/// `(AIC, BIC)`.
pub fn information_criteria(log_lik: f64, k: usize, n: usize) -> (f64, f64) {
    let k = k as f64;
    (-2.0 * log_lik + 2.0 * k, -2.0 * log_lik + k * (n as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quad_opts() -> OptimOptions {
        OptimOptions {
            restarts: 0,
            ..Default::default()
        }
    }

    #[test]
    fn quadratic_toy_maximum() {
        let f = FnDensity::new(1, |x: &[f64]| -0.5 * (x[0] - 1.0).powi(2));
        let opt = maximize(&f, &[-3.0], &quad_opts()).unwrap();
        assert_abs_diff_eq!(opt.x[0], 1.0, epsilon = 1e-8);
        assert!(opt.converged);
    }

    #[test]
    fn rosenbrock_is_solved_by_bfgs() {
        let f = FnDensity::new(2, |x: &[f64]| {
            -(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2))
        });
        let opts = OptimOptions {
            simplex_evals: 0,
            restarts: 0,
            ..Default::default()
        };
        let opt = maximize(&f, &[-1.2, 1.0], &opts).unwrap();
        assert_abs_diff_eq!(opt.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(opt.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn infeasible_everywhere_fails() {
        let f = FnDensity::new(1, |_: &[f64]| f64::NEG_INFINITY);
        assert_eq!(
            maximize(&f, &[0.0], &Default::default()).unwrap_err(),
            InferenceError::OptimizationFailed
        );
    }

    #[test]
    fn restarts_are_deterministic() {
        let f = FnDensity::new(2, |x: &[f64]| -(x[0] - 0.3).powi(2) - 2.0 * (x[1] + 0.7).powi(4));
        let a = maximize(&f, &[1.0, 1.0], &Default::default()).unwrap();
        let b = maximize(&f, &[1.0, 1.0], &Default::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hessian_of_quadratic() {
        let a = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 4.0]];
        let f = FnDensity::new(3, move |x: &[f64]| {
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += x[i] * a[i][j] * x[j];
                }
            }
            -0.5 * q
        });
        let h = hessian_at(&f, &[0.3, -1.0, 2.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(h[(i, j)], a[i][j], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn hessian_of_normal_log_density() {
        let sigma: f64 = 0.7;
        let f = FnDensity::new(1, move |x: &[f64]| -0.5 * (x[0] / sigma).powi(2) - sigma.ln());
        let h = hessian_at(&f, &[0.4]).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 1.0 / (sigma * sigma), epsilon = 1e-6);
    }

    #[test]
    fn hessian_near_boundary_is_reported() {
        let f = FnDensity::new(1, |x: &[f64]| if x[0] > 0.0 { x[0].ln() } else { f64::NEG_INFINITY });
        let err = hessian_at(&f, &[1e-6]).unwrap_err();
        assert!(matches!(err, InferenceError::Derivative(DerivativeError::Boundary(_))));
    }

    fn gaussian_fit(map: Vec<f64>, hessian: Vec<Vec<f64>>, log_post: f64) -> FitResult {
        FitResult {
            map,
            log_post_at_map: log_post,
            log_lik_at_map: log_post,
            hessian,
            log_evidence: None,
            aic: 0.0,
            bic: 0.0,
            converged: true,
            iterations: 0,
            grad_norm: 0.0,
        }
    }

    #[test]
    fn laplace_is_exact_for_gaussian_toy() {
        // x = 0 with unit-variance likelihood and standard normal prior on the mean.
        let norm = |v: f64| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let f = FnDensity::new(1, move |m: &[f64]| norm(0.0 - m[0]) + norm(m[0]));
        let opt = maximize(&f, &[0.5], &quad_opts()).unwrap();
        let h = hessian_at(&f, &opt.x).unwrap();
        let fit = gaussian_fit(opt.x.clone(), vec![vec![h[(0, 0)]]], opt.value);
        let ev = laplace_log_evidence(&fit).unwrap().exp();
        let exact = 1.0 / (2.0 * std::f64::consts::PI * 2.0).sqrt();
        assert!((ev - exact).abs() / exact < 1e-6, "{ev} vs {exact}");
    }

    #[test]
    fn laplace_of_empty_model_is_likelihood() {
        let fit = gaussian_fit(vec![], vec![], -12.5);
        assert_eq!(laplace_log_evidence(&fit).unwrap(), -12.5);
    }

    #[test]
    fn laplace_rejects_indefinite_hessian() {
        let fit = gaussian_fit(vec![0.0], vec![vec![-1.0]], 0.0);
        assert_eq!(laplace_log_evidence(&fit).unwrap_err(), InferenceError::NotPositiveDefinite);
    }

    #[test]
    fn normal_approx_moments() {
        let h = vec![vec![4.0, 1.0], vec![1.0, 2.0]];
        let fit = gaussian_fit(vec![1.0, -2.0], h.clone(), 0.0);
        let n = 10_000;
        let s = sample_normal_approx(&fit, n, 11).unwrap();
        let cov = from_rows(&h).try_inverse().unwrap();
        let cols: Vec<Vec<f64>> = (0..2).map(|j| s.column(j)).collect();
        let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
        for j in 0..2 {
            let sd = cov[(j, j)].sqrt();
            assert!((means[j] - fit.map[j]).abs() < 4.0 * sd / (n as f64).sqrt());
        }
        for a in 0..2 {
            for b in 0..2 {
                let c: f64 = cols[a]
                    .iter()
                    .zip(&cols[b])
                    .map(|(x, y)| (x - means[a]) * (y - means[b]))
                    .sum::<f64>()
                    / (n - 1) as f64;
                assert!((c - cov[(a, b)]).abs() < 0.1 * cov[(a, b)].abs(), "{a}{b}: {c}");
            }
        }
        assert_eq!(s, sample_normal_approx(&fit, n, 11).unwrap());
    }

    #[test]
    fn metropolis_standard_normal() {
        let f = FnDensity::new(1, |x: &[f64]| -0.5 * x[0] * x[0]);
        let opts = McmcOptions::new(2_000 + 5_000 * 5, 2_000, 5, 3);
        let s = adaptive_metropolis(&f, &[0.0], &opts).unwrap();
        assert_eq!(s.len(), 5_000);
        let x = s.column(0);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        let rate = s.acceptance_rate.unwrap();
        assert!((0.1..0.6).contains(&rate), "rate {rate}");
    }

    #[test]
    fn metropolis_visits_both_modes() {
        let f = FnDensity::new(1, |x: &[f64]| {
            let a = -0.5 * (x[0] - 3.0).powi(2);
            let b = -0.5 * (x[0] + 3.0).powi(2);
            a.max(b) + (1.0 + (-(a - b).abs()).exp()).ln()
        });
        let s = adaptive_metropolis(&f, &[3.0], &McmcOptions::new(40_000, 10_000, 10, 5)).unwrap();
        let x = s.column(0);
        let changes = x.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
        assert!(changes > 10, "{changes} sign changes");
    }

    #[test]
    fn metropolis_rejects_bad_start() {
        let f = FnDensity::new(1, |x: &[f64]| if x[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY });
        let err = adaptive_metropolis(&f, &[-1.0], &McmcOptions::new(10, 5, 1, 0)).unwrap_err();
        assert_eq!(err, InferenceError::InfeasibleStart);
    }

    #[test]
    fn intervals() {
        let constant = PosteriorSample {
            draws: vec![vec![2.5]; 200],
            source: SampleSource::Mcmc,
            seed: 0,
            acceptance_rate: None,
            thinning: None,
            burn_in: None,
        };
        assert_eq!(credible_intervals(&constant, 0.95), vec![(2.5, 2.5)]);
        let seq = PosteriorSample {
            draws: (0..100).map(|i| vec![i as f64]).collect(),
            ..constant
        };
        let (lo, hi) = credible_intervals(&seq, 0.5)[0];
        assert_abs_diff_eq!(lo, 24.75, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 74.25, epsilon = 1e-12);
    }

    #[test]
    fn normal_quantiles_from_draws() {
        let fit = gaussian_fit(vec![0.0], vec![vec![1.0]], 0.0);
        let s = sample_normal_approx(&fit, 100_000, 21).unwrap();
        let (lo, hi) = credible_intervals(&s, 0.95)[0];
        assert!((lo + 1.959_963_984_540_054).abs() < 0.03, "{lo}");
        assert!((hi - 1.959_963_984_540_054).abs() < 0.03, "{hi}");
    }

    #[test]
    fn criteria() {
        let (aic, bic) = information_criteria(-100.0, 5, 100);
        assert_abs_diff_eq!(aic, 210.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bic, 223.025_850_929_940_46, epsilon = 1e-9);
        let (aic, bic) = information_criteria(-7.0, 0, 50);
        assert_eq!((aic, bic), (14.0, 14.0));
    }
    mod posterior {
        use super::super::*;
        use crate::likelihood::{GammaPrior, GramCache, PriorSpec, SurvivalDataset};
        use crate::model::{Family, InitialHazard, ModelSpec};
        use approx::assert_abs_diff_eq;

        fn toy_data(n: usize) -> SurvivalDataset {
            let mut cov = Vec::new();
            let mut times = Vec::new();
            let mut status = Vec::new();
            for i in 0..n {
                cov.extend([(i % 2) as f64, ((i * 7919) % 101) as f64 / 50.0 - 1.0]);
                times.push(0.05 + (i % 37) as f64 * 0.1);
                status.push(i % 5 != 0);
            }
            SurvivalDataset::new(times, status, cov, vec!["a".into(), "b".into()], Some(5.0)).unwrap()
        }

        /// Plain finite differences of the posterior, bypassing its own derivative code.
        struct Generic<'a>(&'a Posterior<'a>);

        impl LogDensity for Generic<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                self.0.log_density(x)
            }
            fn frozen_at(&self, x: &[f64]) -> Option<Box<dyn LogDensity + '_>> {
                self.0.frozen_at(x)
            }
        }

        fn check_derivatives(post: &Posterior<'_>, eta: &[f64]) {
            let (v, g) = post.value_and_gradient(eta).unwrap();
            let (vg, gg) = Generic(post).value_and_gradient(eta).unwrap();
            assert_eq!(v, vg);
            for (a, b) in g.iter().zip(&gg) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-5 * (1.0 + b.abs()));
            }
            let h = hessian_at(post, eta).unwrap();
            let hg = hessian_at(&Generic(post), eta).unwrap();
            for (a, b) in h.iter().zip(hg.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-4 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn logistic_row_derivatives_match_generic_differences() {
            let data = toy_data(60);
            let spec = ModelSpec::logistic(vec![vec![0], vec![1]], InitialHazard::Free, 5.0);
            let priors = PriorSpec::normal(Family::Logistic, 10.0)
                .with_h0(GammaPrior { shape: 2.0, rate: 0.5 });
            let post = Posterior::new(&data, spec, priors, Default::default(), &GramCache::new()).unwrap();
            check_derivatives(&post, &[0.2, -0.3, -0.5, 0.4, -1.5]);
        }

        #[test]
        fn hazard_response_row_derivatives_match_generic_differences() {
            let data = toy_data(40);
            let spec = ModelSpec::hazard_response(vec![vec![0], vec![1], vec![], vec![0]], 0.01, 1e-6, 5.0);
            let cache = GramCache::new();
            let priors = PriorSpec {
                coefficients: crate::likelihood::CoefficientPrior::GPrior { g: vec![40.0, 40.0, 0.4, 40.0] },
                ..PriorSpec::normal(Family::HazardResponse, 10.0)
            };
            let post = Posterior::new(&data, spec, priors, Default::default(), &cache).unwrap();
            check_derivatives(&post, &[1.5, 0.5, 0.5, -0.5, 1.0, 3.0, -0.5]);
        }

        #[test]
        fn exponential_map_matches_closed_form() {
            let data = SurvivalDataset::new(vec![1.0, 2.0, 3.0], vec![true; 3], vec![], vec![], None).unwrap();
            let spec = ModelSpec::logistic(vec![vec![], vec![]], InitialHazard::Kappa, 10.0);
            let post = Posterior::new(
                &data,
                spec,
                PriorSpec::normal(Family::Logistic, 1e3),
                Default::default(),
                &GramCache::new(),
            )
            .unwrap();
            let fit = find_map(&post, &[0.0, 0.0], &OptimOptions::default()).unwrap();
            assert_abs_diff_eq!(fit.map[1], 0.5f64.ln(), epsilon = 1e-3);
        }

        #[test]
        fn hessian_is_stable_under_step_rescaling() {
            let data = toy_data(80);
            let spec = ModelSpec::logistic(vec![vec![0], vec![1]], InitialHazard::Free, 5.0);
            let priors = PriorSpec::normal(Family::Logistic, 10.0)
                .with_h0(GammaPrior { shape: 2.0, rate: 0.5 });
            let post = Posterior::new(&data, spec, priors, Default::default(), &GramCache::new()).unwrap();
            let fit = find_map(&post, &[0.0, 0.0, 0.0, 0.0, -1.0], &OptimOptions::default()).unwrap();
            assert!(fit.converged);
            // Richardson-style check: a generic stencil with the step doubled agrees.
            struct Doubled<'a>(&'a Posterior<'a>);
            impl LogDensity for Doubled<'_> {
                fn dim(&self) -> usize {
                    self.0.dim()
                }
                fn log_density(&self, x: &[f64]) -> f64 {
                    let half: Vec<f64> = x.iter().map(|v| v / 2.0).collect();
                    self.0.log_density(&half)
                }
            }
            let doubled_at: Vec<f64> = fit.map.iter().map(|v| v * 2.0).collect();
            let h2 = hessian_at(&Doubled(&post), &doubled_at).unwrap() * 4.0;
            let h = fit.hessian_matrix();
            for (a, b) in h.iter().zip(h2.iter()) {
                assert!((a - b).abs() <= 1e-3 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}
