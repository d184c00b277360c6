//! Right-censored log-likelihood, priors and the log-posterior.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::inference::{DerivativeError, LogDensity};
use crate::model::{
    eval_predictors, linear_predictors, params_from_predictors, Family, ModelError, ModelSpec,
    OdeParams, MAX_PREDICTORS,
};
use crate::ode::{self, SolverOptions};

/// Rows per parallel work unit.
pub const CHUNK_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LikelihoodError {
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("design columns {columns:?} for parameter {parameter} are collinear")]
    Collinear {
        parameter: &'static str,
        columns: Vec<usize>,
    },
    #[error("invalid prior: {0}")]
    Prior(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    times: Vec<f64>,
    status: Vec<bool>,
    /// Row-major `n × p`.
    covariates: Vec<f64>,
    column_names: Vec<String>,
    max_time: Option<f64>,
}

impl SurvivalDataset {
    pub fn new(
        times: Vec<f64>,
        status: Vec<bool>,
        covariates: Vec<f64>,
        column_names: Vec<String>,
        max_time: Option<f64>,
    ) -> Result<Self, LikelihoodError> {
        let n = times.len();
        let p = column_names.len();
        if status.len() != n {
            return Err(LikelihoodError::Data(format!(
                "{n} times but {} status values",
                status.len()
            )));
        }
        if covariates.len() != n * p {
            return Err(LikelihoodError::Data(format!(
                "covariate matrix has {} entries, expected {n} x {p}",
                covariates.len()
            )));
        }
        if let Some(m) = max_time {
            if !(m.is_finite() && m > 0.0) {
                return Err(LikelihoodError::Data(format!("max_time must be positive, got {m}")));
            }
        }
        for (i, &t) in times.iter().enumerate() {
            if !(t.is_finite() && t > 0.0) {
                return Err(LikelihoodError::Data(format!("row {i}: time {t} is not positive")));
            }
            if let Some(m) = max_time {
                if t > m {
                    return Err(LikelihoodError::Data(format!(
                        "row {i}: time {t} exceeds max_time {m}"
                    )));
                }
            }
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(LikelihoodError::Data(format!(
                "row {}: covariate {} is not finite",
                pos / p.max(1),
                column_names[pos % p.max(1)]
            )));
        }
        Ok(Self {
            times,
            status,
            covariates,
            column_names,
            max_time,
        })
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.column_names.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn status(&self) -> &[bool] {
        &self.status
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn max_time(&self) -> Option<f64> {
        self.max_time
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_covariates();
        &self.covariates[i * p..(i + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.row(i)[j]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn n_events(&self) -> usize {
        self.status.iter().filter(|&&d| d).count()
    }

    pub fn n_censored(&self) -> usize {
        self.n() - self.n_events()
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut covariates = Vec::with_capacity(rows.len() * self.n_covariates());
        for &i in rows {
            covariates.extend_from_slice(self.row(i));
        }
        Self {
            times: rows.iter().map(|&i| self.times[i]).collect(),
            status: rows.iter().map(|&i| self.status[i]).collect(),
            covariates,
            column_names: self.column_names.clone(),
            max_time: self.max_time,
        }
    }

    /// Centers and scales the given columns in place, returning `(mean, sd)` per column.
    pub fn standardize(&mut self, columns: &[usize]) -> Result<Vec<(f64, f64)>, LikelihoodError> {
        let p = self.n_covariates();
        let n = self.n() as f64;
        let mut out = Vec::with_capacity(columns.len());
        for &j in columns {
            let col = self.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if !(sd > 0.0) {
                return Err(LikelihoodError::Data(format!(
                    "column {} has zero variance",
                    self.column_names[j]
                )));
            }
            for i in 0..self.n() {
                let v = &mut self.covariates[i * p + j];
                *v = (*v - mean) / sd;
            }
            out.push((mean, sd));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * PI).ln()
    }
}

/// Gamma prior in the shape/rate parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientPrior {
    /// `N(0, g_k (X_kᵀ X_k)⁻¹)` per parameter block.
    GPrior { g: Vec<f64> },
    /// Independent `N(0, sd²)`.
    Normal { sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub intercepts: Vec<NormalPrior>,
    pub coefficients: CoefficientPrior,
    /// Prior on `h0` itself; the Jacobian of the log parameterization is added.
    pub h0: Option<GammaPrior>,
    /// Model-space complexity penalty.
    pub complexity: f64,
}

impl PriorSpec {
    /// Independent `N(0, sd²)` on every intercept and coefficient.
    pub fn normal(family: Family, sd: f64) -> Self {
        Self {
            intercepts: vec![NormalPrior { mean: 0.0, sd }; family.n_parameters()],
            coefficients: CoefficientPrior::Normal { sd },
            h0: None,
            complexity: 0.0,
        }
    }

    pub fn with_h0(mut self, prior: GammaPrior) -> Self {
        self.h0 = Some(prior);
        self
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<(), LikelihoodError> {
        let k = spec.family.n_parameters();
        let bad = |msg: String| Err(LikelihoodError::Prior(msg));
        if self.intercepts.len() != k {
            return bad(format!("{} intercept priors for {k} parameters", self.intercepts.len()));
        }
        if self.intercepts.iter().any(|p| !(p.sd > 0.0 && p.mean.is_finite())) {
            return bad("intercept prior sd must be positive".into());
        }
        match &self.coefficients {
            CoefficientPrior::GPrior { g } => {
                if g.len() != k || g.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return bad(format!("g-prior needs {k} positive scales"));
                }
            }
            CoefficientPrior::Normal { sd } => {
                if !(*sd > 0.0 && sd.is_finite()) {
                    return bad("coefficient prior sd must be positive".into());
                }
            }
        }
        if let Some(h) = self.h0 {
            if !(h.shape > 0.0 && h.rate > 0.0) {
                return bad("gamma prior shape and rate must be positive".into());
            }
        }
        if spec.has_free_h0() && self.h0.is_none() {
            return bad("a free h0 needs a gamma prior".into());
        }
        if !(self.complexity >= 0.0 && self.complexity.is_finite()) {
            return bad(format!("complexity must be non-negative, got {}", self.complexity));
        }
        Ok(())
    }
}

/// Effective-sample-size g calibration `n - factor·c`, divided per parameter.
pub fn effective_sample_size_g(
    data: &SurvivalDataset,
    censor_factor: f64,
    divisors: &[f64],
) -> Vec<f64> {
    let base = data.n() as f64 - censor_factor * data.n_censored() as f64;
    divisors.iter().map(|d| base / d).collect()
}

/// Unnormalized log complexity prior `-C |γ| log d̃`.
pub fn log_complexity_prior(model_size: usize, complexity: f64, d_tilde: usize) -> f64 {
    if model_size == 0 || complexity == 0.0 {
        return 0.0;
    }
    -complexity * model_size as f64 * (d_tilde as f64).ln()
}

#[derive(Debug, Clone)]
struct GramFactor {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

/// Cholesky factors of `XᵀX` keyed by column subset, shared across masks.
#[derive(Debug, Default)]
pub struct GramCache {
    factors: RwLock<HashMap<Vec<usize>, Option<Arc<GramFactor>>>>,
}

impl GramCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.factors.read().expect("gram cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn factor(&self, data: &SurvivalDataset, cols: &[usize]) -> Option<Arc<GramFactor>> {
        if let Some(hit) = self.factors.read().expect("gram cache poisoned").get(cols) {
            return hit.clone();
        }
        let m = cols.len();
        let mut gram = DMatrix::<f64>::zeros(m, m);
        for i in 0..data.n() {
            let row = data.row(i);
            for a in 0..m {
                for b in 0..=a {
                    gram[(a, b)] += row[cols[a]] * row[cols[b]];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        let factor = gram.cholesky().and_then(|chol| {
            let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            // Reject numerically singular designs rather than returning a huge density.
            let scale = chol.l().diagonal().max();
            (chol.l().diagonal().min() > 1e-10 * scale).then(|| Arc::new(GramFactor { chol, log_det }))
        });
        self.factors
            .write()
            .expect("gram cache poisoned")
            .insert(cols.to_vec(), factor.clone());
        factor
    }
}

fn log_mvn_gprior(beta: &[f64], g: f64, f: &GramFactor) -> f64 {
    let m = beta.len() as f64;
    let b = DVector::from_column_slice(beta);
    // βᵀ (XᵀX) β = ‖Lᵀβ‖²
    let quad = (f.chol.l().transpose() * b).norm_squared();
    -0.5 * m * (2.0 * PI).ln() + 0.5 * (f.log_det - m * g.ln()) - 0.5 * quad / g
}

fn check_gram_blocks(
    spec: &ModelSpec,
    priors: &PriorSpec,
    data: &SurvivalDataset,
    cache: &GramCache,
) -> Result<Vec<Option<Arc<GramFactor>>>, LikelihoodError> {
    let names = spec.family.parameter_names();
    spec.formulas
        .iter()
        .enumerate()
        .map(|(k, cols)| match &priors.coefficients {
            CoefficientPrior::GPrior { .. } if !cols.is_empty() => cache
                .factor(data, cols)
                .map(Some)
                .ok_or_else(|| LikelihoodError::Collinear {
                    parameter: names[k],
                    columns: cols.clone(),
                }),
            _ => Ok(None),
        })
        .collect()
}

fn log_prior_with(
    spec: &ModelSpec,
    eta: &[f64],
    priors: &PriorSpec,
    factors: &[Option<Arc<GramFactor>>],
) -> Result<f64, LikelihoodError> {
    let blocks = spec.blocks(eta)?;
    let mut lp = 0.0;
    for k in 0..blocks.n_blocks() {
        lp += priors.intercepts[k].log_density(blocks.intercept(k));
        let beta = blocks.coefficients(k);
        if beta.is_empty() {
            continue;
        }
        lp += match (&priors.coefficients, &factors[k]) {
            (CoefficientPrior::GPrior { g }, Some(f)) => log_mvn_gprior(beta, g[k], f),
            (CoefficientPrior::Normal { sd }, _) => {
                let p = NormalPrior { mean: 0.0, sd: *sd };
                beta.iter().map(|&b| p.log_density(b)).sum()
            }
            (CoefficientPrior::GPrior { .. }, None) => unreachable!("gram factor checked"),
        };
    }
    if let (Some(log_h0), Some(prior)) = (blocks.log_h0(), priors.h0) {
        lp += prior.log_density(log_h0.exp()) + log_h0;
    }
    Ok(lp)
}

/// Log prior density of η under the model whose formulas encode the inclusion mask.
pub fn log_prior(
    spec: &ModelSpec,
    eta: &[f64],
    priors: &PriorSpec,
    data: &SurvivalDataset,
    cache: &GramCache,
) -> Result<f64, LikelihoodError> {
    priors.validate(spec)?;
    let factors = check_gram_blocks(spec, priors, data, cache)?;
    log_prior_with(spec, eta, priors, &factors)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodOptions {
    pub solver: SolverOptions,
    /// Integrate closed-form families numerically as well.
    pub force_numeric: bool,
}

fn row_hazard(
    params: &OdeParams,
    t: f64,
    opts: &LikelihoodOptions,
    mesh: Option<&[f64]>,
    record: Option<&mut Vec<f64>>,
) -> Option<(f64, f64)> {
    match (params, mesh) {
        (OdeParams::Logistic(p), _) if !opts.force_numeric => Some(params_closed_form(p, t)),
        (OdeParams::Logistic(p), Some(m)) => ode::replay(p, &[p.h0, 0.0], m).ok().map(|y| (y[0], y[1])),
        (OdeParams::Logistic(p), None) => ode::solve_final(p, &[p.h0, 0.0], t, &opts.solver, record)
            .ok()
            .map(|y| (y[0], y[1])),
        (OdeParams::HazardResponse(p), Some(m)) => {
            ode::replay(p, &p.initial_state(), m).ok().map(|y| (y[0], y[2]))
        }
        (OdeParams::HazardResponse(p), None) => {
            ode::solve_final(p, &p.initial_state(), t, &opts.solver, record)
                .ok()
                .map(|y| (y[0], y[2]))
        }
    }
}

fn params_closed_form(p: &crate::model::LogisticParams, t: f64) -> (f64, f64) {
    (crate::model::logistic_hazard(t, p), crate::model::logistic_cumhaz(t, p))
}

fn row_term(event: bool, hazard: f64, cumhaz: f64) -> f64 {
    if !cumhaz.is_finite() {
        return f64::NEG_INFINITY;
    }
    if event {
        if !(hazard > 0.0 && hazard.is_finite()) {
            return f64::NEG_INFINITY;
        }
        hazard.ln() - cumhaz
    } else {
        -cumhaz
    }
}

/// Sums `f(i)` over rows in chunks of [`CHUNK_SIZE`], reducing the chunk sums in
/// index order so the result does not depend on the thread count.
fn ordered_sum<F: Fn(usize) -> f64 + Sync>(n: usize, f: F) -> f64 {
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK_SIZE))
        .into_par_iter()
        .map(|c| {
            let mut s = 0.0;
            for i in c * CHUNK_SIZE..((c + 1) * CHUNK_SIZE).min(n) {
                s += f(i);
                if s == f64::NEG_INFINITY {
                    break;
                }
            }
            s
        })
        .collect();
    let total: f64 = partial.iter().sum();
    if total.is_nan() {
        f64::NEG_INFINITY
    } else {
        total
    }
}

/// `Σ δᵢ log h(tᵢ) − H(tᵢ)`; `-∞` flags an invalid parameter region.
pub fn log_likelihood(
    data: &SurvivalDataset,
    spec: &ModelSpec,
    eta: &[f64],
    opts: &LikelihoodOptions,
) -> Result<f64, LikelihoodError> {
    spec.blocks(eta)?;
    Ok(log_likelihood_unchecked(data, spec, eta, opts, None))
}

fn log_likelihood_unchecked(
    data: &SurvivalDataset,
    spec: &ModelSpec,
    eta: &[f64],
    opts: &LikelihoodOptions,
    meshes: Option<&[Vec<f64>]>,
) -> f64 {
    if eta.iter().any(|v| !v.is_finite()) {
        return f64::NEG_INFINITY;
    }
    ordered_sum(data.n(), |i| {
        let Ok(pred) = eval_predictors(spec, eta, data.row(i)) else {
            return f64::NEG_INFINITY;
        };
        let mesh = meshes.map(|m| m[i].as_slice());
        match row_hazard(&pred.params, data.times[i], opts, mesh, None) {
            Some((h, cum)) => row_term(data.status[i], h, cum),
            None => f64::NEG_INFINITY,
        }
    })
}

/// Per-row solver step sequences at η, or `None` if the family needs no solver.
fn record_meshes(
    data: &SurvivalDataset,
    spec: &ModelSpec,
    eta: &[f64],
    opts: &LikelihoodOptions,
) -> Option<Vec<Vec<f64>>> {
    if spec.family == Family::Logistic && !opts.force_numeric {
        return None;
    }
    (0..data.n())
        .into_par_iter()
        .map(|i| {
            let pred = eval_predictors(spec, eta, data.row(i)).ok()?;
            let mut steps = Vec::new();
            row_hazard(&pred.params, data.times[i], opts, None, Some(&mut steps))?;
            Some(steps)
        })
        .collect()
}

/// Log-posterior of one model: likelihood plus priors.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    data: &'a SurvivalDataset,
    spec: ModelSpec,
    priors: PriorSpec,
    opts: LikelihoodOptions,
    factors: Vec<Option<Arc<GramFactor>>>,
    meshes: Option<Arc<Vec<Vec<f64>>>>,
}

impl<'a> Posterior<'a> {
    pub fn new(
        data: &'a SurvivalDataset,
        spec: ModelSpec,
        priors: PriorSpec,
        opts: LikelihoodOptions,
        cache: &GramCache,
    ) -> Result<Self, LikelihoodError> {
        spec.validate(data.n_covariates())?;
        priors.validate(&spec)?;
        if let Some(m) = data.max_time() {
            if m > spec.max_time {
                return Err(LikelihoodError::Data(format!(
                    "data horizon {m} exceeds the model horizon {}",
                    spec.max_time
                )));
            }
        }
        let factors = check_gram_blocks(&spec, &priors, data, cache)?;
        Ok(Self {
            data,
            spec,
            priors,
            opts,
            factors,
            meshes: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn data(&self) -> &SurvivalDataset {
        self.data
    }

    pub fn options(&self) -> &LikelihoodOptions {
        &self.opts
    }

    pub fn log_likelihood(&self, eta: &[f64]) -> f64 {
        if eta.len() != self.spec.dim() {
            return f64::NEG_INFINITY;
        }
        log_likelihood_unchecked(self.data, &self.spec, eta, &self.opts, self.meshes.as_deref().map(Vec::as_slice))
    }

    pub fn log_prior(&self, eta: &[f64]) -> f64 {
        log_prior_with(&self.spec, eta, &self.priors, &self.factors).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn log_posterior(&self, eta: &[f64]) -> f64 {
        let lp = self.log_prior(eta);
        if lp == f64::NEG_INFINITY || lp.is_nan() {
            return f64::NEG_INFINITY;
        }
        let ll = self.log_likelihood(eta);
        if ll == f64::NEG_INFINITY {
            return ll;
        }
        ll + lp
    }
}

// Central-difference steps relative to max(1, |φ|).
const GRAD_STEP: f64 = 6.055_454_452_393_343e-6; // ε^(1/3)
const HESS_STEP: f64 = 1.220_703_125e-4; // ε^(1/4)

/// Per-chunk accumulator of value, gradient and optional Hessian.
struct Accum {
    value: f64,
    grad: Vec<f64>,
    hess: Option<DMatrix<f64>>,
}

impl<'a> Posterior<'a> {
    fn row_value(&self, i: usize, phi: &[f64], mesh: Option<&[f64]>) -> f64 {
        match params_from_predictors(&self.spec, phi) {
            Ok(pred) => match row_hazard(&pred.params, self.data.times[i], &self.opts, mesh, None) {
                Some((h, cum)) => row_term(self.data.status[i], h, cum),
                None => f64::NEG_INFINITY,
            },
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Row contribution and its derivatives with respect to the row's predictors,
    /// by central differences on the solver mesh recorded at the centre.
    fn row_derivatives(&self, i: usize, eta: &[f64], acc: &mut Accum) -> Result<(), DerivativeError> {
        let x = self.data.row(i);
        let phi = linear_predictors(&self.spec, eta, x)
            .map_err(|e| DerivativeError::NonFinite(e.to_string()))?;
        let m = self.spec.n_predictors();
        let pred = params_from_predictors(&self.spec, &phi[..m])
            .map_err(|e| DerivativeError::NonFinite(e.to_string()))?;
        let mut steps = Vec::new();
        let record = !(self.spec.family == Family::Logistic && !self.opts.force_numeric);
        let centre = match row_hazard(
            &pred.params,
            self.data.times[i],
            &self.opts,
            None,
            record.then_some(&mut steps),
        ) {
            Some((h, cum)) => row_term(self.data.status[i], h, cum),
            None => f64::NEG_INFINITY,
        };
        if !centre.is_finite() {
            return Err(DerivativeError::NonFinite(format!("row {i} at the centre point")));
        }
        let mesh = record.then_some(steps.as_slice());
        let eval = |d: &[(usize, f64)]| {
            let mut p = phi;
            for &(k, h) in d {
                p[k] += h;
            }
            let v = self.row_value(i, &p[..m], mesh);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DerivativeError::Boundary(format!(
                    "row {i} leaves the support within one difference step"
                )))
            }
        };
        let mut g = [0.0; MAX_PREDICTORS];
        let mut hm = [[0.0; MAX_PREDICTORS]; MAX_PREDICTORS];
        if acc.hess.is_none() {
            for k in 0..m {
                let h = GRAD_STEP * phi[k].abs().max(1.0);
                g[k] = (eval(&[(k, h)])? - eval(&[(k, -h)])?) / (2.0 * h);
            }
        } else {
            for k in 0..m {
                let h = GRAD_STEP * phi[k].abs().max(1.0);
                g[k] = (eval(&[(k, h)])? - eval(&[(k, -h)])?) / (2.0 * h);
            }
            // Richardson extrapolation over steps s and s/2 removes the O(s²) term.
            let coarse = self.second_differences(&eval, centre, &phi, m, 1.0)?;
            let fine = self.second_differences(&eval, centre, &phi, m, 0.5)?;
            for k in 0..m {
                for l in 0..m {
                    hm[k][l] = (4.0 * fine[k][l] - coarse[k][l]) / 3.0;
                }
            }
        }
        acc.value += centre;
        let terms = self.spec.predictor_terms(x);
        for (k, tk) in terms.iter().enumerate() {
            for &(a, xa) in tk {
                acc.grad[a] += g[k] * xa;
            }
        }
        if let Some(hess) = acc.hess.as_mut() {
            for (k, tk) in terms.iter().enumerate() {
                for (l, tl) in terms.iter().enumerate() {
                    let v = hm[k][l];
                    for &(a, xa) in tk {
                        for &(b, xb) in tl {
                            hess[(a, b)] += v * xa * xb;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn second_differences<F>(
        &self,
        eval: &F,
        centre: f64,
        phi: &[f64],
        m: usize,
        scale: f64,
    ) -> Result<[[f64; MAX_PREDICTORS]; MAX_PREDICTORS], DerivativeError>
    where
        F: Fn(&[(usize, f64)]) -> Result<f64, DerivativeError>,
    {
        let s: Vec<f64> = (0..m).map(|k| scale * HESS_STEP * phi[k].abs().max(1.0)).collect();
        let mut hm = [[0.0; MAX_PREDICTORS]; MAX_PREDICTORS];
        for k in 0..m {
            hm[k][k] = (eval(&[(k, s[k])])? - 2.0 * centre + eval(&[(k, -s[k])])?) / (s[k] * s[k]);
            for l in 0..k {
                let pp = eval(&[(k, s[k]), (l, s[l])])?;
                let pm = eval(&[(k, s[k]), (l, -s[l])])?;
                let mp = eval(&[(k, -s[k]), (l, s[l])])?;
                let mm = eval(&[(k, -s[k]), (l, -s[l])])?;
                let v = (pp - pm - mp + mm) / (4.0 * s[k] * s[l]);
                hm[k][l] = v;
                hm[l][k] = v;
            }
        }
        Ok(hm)
    }

    fn likelihood_derivatives(&self, eta: &[f64], hessian: bool) -> Result<Accum, DerivativeError> {
        let d = self.spec.dim();
        let n = self.data.n();
        let fresh = || Accum {
            value: 0.0,
            grad: vec![0.0; d],
            hess: hessian.then(|| DMatrix::zeros(d, d)),
        };
        let chunks: Vec<Result<Accum, DerivativeError>> = (0..n.div_ceil(CHUNK_SIZE))
            .into_par_iter()
            .map(|c| {
                let mut acc = fresh();
                for i in c * CHUNK_SIZE..((c + 1) * CHUNK_SIZE).min(n) {
                    self.row_derivatives(i, eta, &mut acc)?;
                }
                Ok(acc)
            })
            .collect();
        let mut total = fresh();
        for chunk in chunks {
            let chunk = chunk?;
            total.value += chunk.value;
            for (t, v) in total.grad.iter_mut().zip(&chunk.grad) {
                *t += v;
            }
            if let (Some(t), Some(v)) = (total.hess.as_mut(), chunk.hess.as_ref()) {
                *t += v;
            }
        }
        Ok(total)
    }

    /// Adds the prior's gradient and Hessian, which are available in closed form.
    fn add_prior_derivatives(&self, eta: &[f64], acc: &mut Accum) {
        let offsets = self.spec.block_offsets();
        let add_h = |a: usize, b: usize, v: f64, hess: &mut Option<DMatrix<f64>>| {
            if let Some(h) = hess.as_mut() {
                h[(a, b)] += v;
            }
        };
        for (k, cols) in self.spec.formulas.iter().enumerate() {
            let off = offsets[k];
            let p = self.priors.intercepts[k];
            acc.grad[off] -= (eta[off] - p.mean) / (p.sd * p.sd);
            add_h(off, off, -1.0 / (p.sd * p.sd), &mut acc.hess);
            let m = cols.len();
            if m == 0 {
                continue;
            }
            let beta = &eta[off + 1..off + 1 + m];
            match (&self.priors.coefficients, &self.factors[k]) {
                (CoefficientPrior::GPrior { g }, Some(f)) => {
                    let l = f.chol.l();
                    let gram = &l * l.transpose();
                    for a in 0..m {
                        for b in 0..m {
                            acc.grad[off + 1 + a] -= gram[(a, b)] * beta[b] / g[k];
                            add_h(off + 1 + a, off + 1 + b, -gram[(a, b)] / g[k], &mut acc.hess);
                        }
                    }
                }
                (CoefficientPrior::Normal { sd }, _) => {
                    for (a, b) in beta.iter().enumerate() {
                        acc.grad[off + 1 + a] -= b / (sd * sd);
                        add_h(off + 1 + a, off + 1 + a, -1.0 / (sd * sd), &mut acc.hess);
                    }
                }
                (CoefficientPrior::GPrior { .. }, None) => unreachable!("gram factor checked"),
            }
        }
        if let (true, Some(prior)) = (self.spec.has_free_h0(), self.priors.h0) {
            let i = self.spec.dim() - 1;
            let h0 = eta[i].exp();
            acc.grad[i] += prior.shape - prior.rate * h0;
            add_h(i, i, -prior.rate * h0, &mut acc.hess);
        }
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_posterior(x)
    }

    fn frozen_at(&self, x: &[f64]) -> Option<Box<dyn LogDensity + '_>> {
        let meshes = record_meshes(self.data, &self.spec, x, &self.opts)?;
        Some(Box::new(Self {
            meshes: Some(Arc::new(meshes)),
            ..self.clone()
        }))
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), DerivativeError> {
        let lp = self.log_prior(x);
        if !lp.is_finite() || x.len() != self.spec.dim() {
            return Err(DerivativeError::NonFinite("log prior".into()));
        }
        let mut acc = self.likelihood_derivatives(x, false)?;
        self.add_prior_derivatives(x, &mut acc);
        Ok((acc.value + lp, acc.grad))
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, DerivativeError> {
        if !self.log_prior(x).is_finite() || x.len() != self.spec.dim() {
            return Err(DerivativeError::NonFinite("log prior".into()));
        }
        let mut acc = self.likelihood_derivatives(x, true)?;
        self.add_prior_derivatives(x, &mut acc);
        let h = acc.hess.expect("requested");
        Ok((&h + h.transpose()) * 0.5)
    }
}

/// Log-likelihood plus log prior; `-∞` propagates.
pub fn log_posterior(
    data: &SurvivalDataset,
    spec: &ModelSpec,
    eta: &[f64],
    priors: &PriorSpec,
    cache: &GramCache,
) -> Result<f64, LikelihoodError> {
    let post = Posterior::new(data, spec.clone(), priors.clone(), LikelihoodOptions::default(), cache)?;
    spec.blocks(eta)?;
    Ok(post.log_posterior(eta))
}
