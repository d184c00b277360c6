//! ODE hazard families, link functions and covariate predictors.
//!
//! Two families are supported. The logistic growth hazard
//!
//! ```text
//! h' = λ h (1 - h/κ),            h(0) = h0
//! H' = h,                        H(0) = 0
//! ```
//!
//! has a closed form and is evaluated without the solver. The hazard-response
//! system couples the hazard to a latent response `q` through a competition term:
//!
//! ```text
//! h' = λ h (1 - h/κ) - α q h,    h(0) = h0
//! q' = μ q (1 - q/κ) - α q h,    q(0) = q0
//! H' = h,                        H(0) = 0
//! ```
//!
//! Every ODE parameter θ_k is driven by a linear predictor
//! `φ_k(θ_k) = β_k0 + x_kᵀ β_k`. A parameter vector η is the concatenation of the
//! per-parameter blocks `[β_k0, β_k...]`, followed by `log h0` when the initial
//! hazard is estimated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{self, OdeError, OdeSystem, SolverOptions, Trajectory};

/// Upper bound applied to inverse-log-link outputs.
pub const LOG_LINK_CAP: f64 = 1e12;

/// Tolerance below which attractor boundaries are treated as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("parameter {name} must be positive and finite, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("parameter vector has length {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariate row has length {got}, expected {expected}")]
    CovariateMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Log,
    Identity,
}

impl Link {
    pub fn forward(self, theta: f64) -> f64 {
        match self {
            Link::Log => theta.ln(),
            Link::Identity => theta,
        }
    }

    /// Maps a predictor value back to the parameter scale. The flag is set when
    /// the log link saturates at [`LOG_LINK_CAP`].
    pub fn inverse(self, eta: f64) -> (f64, bool) {
        match self {
            Link::Log => {
                let v = eta.exp();
                if v > LOG_LINK_CAP {
                    (LOG_LINK_CAP, true)
                } else {
                    (v, false)
                }
            }
            Link::Identity => (eta, false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    HazardResponse,
}

impl Family {
    /// ODE parameters driven by linear predictors, in block order.
    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            Family::Logistic => &["lambda", "kappa"],
            Family::HazardResponse => &["lambda", "kappa", "alpha", "mu"],
        }
    }

    pub fn n_parameters(self) -> usize {
        self.parameter_names().len()
    }
}

/// How the initial hazard `h(0)` is determined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialHazard {
    Fixed(f64),
    /// Estimated; stored as `log h0` at the end of η.
    Free,
    /// Tied to the carrying capacity, giving a constant hazard (logistic only).
    Kappa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub links: Vec<Link>,
    /// Covariate column indices entering each parameter's predictor.
    pub formulas: Vec<Vec<usize>>,
    pub h0: InitialHazard,
    /// Initial response, hazard-response family only.
    pub q0: Option<f64>,
    /// Follow-up horizon τ.
    pub max_time: f64,
}

impl ModelSpec {
    pub fn logistic(formulas: Vec<Vec<usize>>, h0: InitialHazard, max_time: f64) -> Self {
        Self {
            family: Family::Logistic,
            links: vec![Link::Log; 2],
            formulas,
            h0,
            q0: None,
            max_time,
        }
    }

    pub fn hazard_response(formulas: Vec<Vec<usize>>, h0: f64, q0: f64, max_time: f64) -> Self {
        Self {
            family: Family::HazardResponse,
            links: vec![Link::Log; 4],
            formulas,
            h0: InitialHazard::Fixed(h0),
            q0: Some(q0),
            max_time,
        }
    }

    pub fn with_formulas(&self, formulas: Vec<Vec<usize>>) -> Self {
        Self {
            formulas,
            ..self.clone()
        }
    }

    pub fn has_free_h0(&self) -> bool {
        matches!(self.h0, InitialHazard::Free)
    }

    /// Number of regression coefficients, excluding intercepts and `log h0`.
    pub fn n_coefficients(&self) -> usize {
        self.formulas.iter().map(Vec::len).sum()
    }

    /// Length of η.
    pub fn dim(&self) -> usize {
        self.formulas.iter().map(|f| 1 + f.len()).sum::<usize>() + usize::from(self.has_free_h0())
    }

    /// Offset of each parameter block within η.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.formulas.len());
        let mut off = 0;
        for f in &self.formulas {
            out.push(off);
            off += 1 + f.len();
        }
        out
    }

    /// Human-readable labels for the entries of η.
    pub fn labels(&self, column_names: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        for (name, cols) in self.family.parameter_names().iter().zip(&self.formulas) {
            out.push(format!("{name}:intercept"));
            for &c in cols {
                let col = column_names
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| format!("x{c}"));
                out.push(format!("{name}:{col}"));
            }
        }
        if self.has_free_h0() {
            out.push("log_h0".to_string());
        }
        out
    }

    pub fn validate(&self, n_covariates: usize) -> Result<(), ModelError> {
        let k = self.family.n_parameters();
        if self.links.len() != k || self.formulas.len() != k {
            return Err(ModelError::InvalidSpec(format!(
                "{:?} needs {k} links and formulas, got {} and {}",
                self.family,
                self.links.len(),
                self.formulas.len()
            )));
        }
        for (name, link) in self.family.parameter_names().iter().zip(&self.links) {
            // Every ODE parameter of both families is positivity constrained.
            if *link == Link::Identity {
                return Err(ModelError::InvalidSpec(format!(
                    "identity link is not allowed for the positive parameter {name}"
                )));
            }
        }
        for (name, cols) in self.family.parameter_names().iter().zip(&self.formulas) {
            for (i, &c) in cols.iter().enumerate() {
                if c >= n_covariates {
                    return Err(ModelError::InvalidSpec(format!(
                        "formula for {name} references column {c}, data has {n_covariates}"
                    )));
                }
                if cols[..i].contains(&c) {
                    return Err(ModelError::InvalidSpec(format!(
                        "formula for {name} lists column {c} twice"
                    )));
                }
            }
        }
        match (self.family, self.h0) {
            (_, InitialHazard::Fixed(v)) if !(v.is_finite() && v > 0.0) => {
                return Err(ModelError::InvalidParameter { name: "h0", value: v })
            }
            (Family::HazardResponse, InitialHazard::Free | InitialHazard::Kappa) => {
                return Err(ModelError::InvalidSpec(
                    "hazard-response initial conditions must be fixed".into(),
                ))
            }
            _ => {}
        }
        match (self.family, self.q0) {
            (Family::HazardResponse, Some(q)) if q.is_finite() && q > 0.0 => {}
            (Family::HazardResponse, q) => {
                return Err(ModelError::InvalidParameter {
                    name: "q0",
                    value: q.unwrap_or(f64::NAN),
                })
            }
            (Family::Logistic, Some(_)) => {
                return Err(ModelError::InvalidSpec("q0 given for the logistic family".into()))
            }
            (Family::Logistic, None) => {}
        }
        if !(self.max_time.is_finite() && self.max_time > 0.0) {
            return Err(ModelError::InvalidSpec(format!(
                "max_time must be positive, got {}",
                self.max_time
            )));
        }
        Ok(())
    }

    /// Structured read access to η.
    pub fn blocks<'a>(&self, eta: &'a [f64]) -> Result<ParamBlocks<'a>, ModelError> {
        if eta.len() != self.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                got: eta.len(),
            });
        }
        Ok(ParamBlocks {
            values: eta,
            offsets: self.block_offsets(),
            lengths: self.formulas.iter().map(Vec::len).collect(),
            free_h0: self.has_free_h0(),
        })
    }
}

/// View of η split into per-parameter `(intercept, coefficients)` blocks.
#[derive(Debug, Clone)]
pub struct ParamBlocks<'a> {
    values: &'a [f64],
    offsets: Vec<usize>,
    lengths: Vec<usize>,
    free_h0: bool,
}

impl<'a> ParamBlocks<'a> {
    pub fn n_blocks(&self) -> usize {
        self.offsets.len()
    }

    pub fn intercept(&self, k: usize) -> f64 {
        self.values[self.offsets[k]]
    }

    pub fn coefficients(&self, k: usize) -> &'a [f64] {
        let start = self.offsets[k] + 1;
        &self.values[start..start + self.lengths[k]]
    }

    pub fn log_h0(&self) -> Option<f64> {
        self.free_h0.then(|| *self.values.last().expect("non-empty"))
    }
}

fn positive(name: &'static str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ModelError::InvalidParameter { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub lambda: f64,
    pub kappa: f64,
    pub h0: f64,
}

impl LogisticParams {
    pub fn new(lambda: f64, kappa: f64, h0: f64) -> Result<Self, ModelError> {
        Ok(Self {
            lambda: positive("lambda", lambda)?,
            kappa: positive("kappa", kappa)?,
            h0: positive("h0", h0)?,
        })
    }
}

// Beyond this value of λt the large-t form of H is used.
const LOGISTIC_LARGE_EXPONENT: f64 = 30.0;

/// Closed-form logistic hazard.
pub fn logistic_hazard(t: f64, p: &LogisticParams) -> f64 {
    if p.h0 == p.kappa {
        return p.kappa;
    }
    // κ h0 e^{λt} / (κ + h0 (e^{λt} - 1)), rewritten to avoid overflow.
    p.kappa * p.h0 / (p.h0 + (p.kappa - p.h0) * (-p.lambda * t).exp())
}

/// Closed-form logistic cumulative hazard.
pub fn logistic_cumhaz(t: f64, p: &LogisticParams) -> f64 {
    if p.h0 == p.kappa {
        return p.kappa * t;
    }
    let x = p.lambda * t;
    let r = p.h0 / p.kappa;
    let log_term = if x <= LOGISTIC_LARGE_EXPONENT {
        (r * x.exp_m1()).ln_1p()
    } else {
        // log(1 + r(e^x - 1)) = x + log(r + (1 - r) e^{-x})
        x + (r + (1.0 - r) * (-x).exp()).ln()
    };
    p.kappa / p.lambda * log_term
}

/// State `(h, H)`.
impl OdeSystem<2> for LogisticParams {
    fn rhs(&self, y: &[f64; 2]) -> [f64; 2] {
        [self.lambda * y[0] * (1.0 - y[0] / self.kappa), y[0]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardResponseParams {
    pub lambda: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub mu: f64,
    pub h0: f64,
    pub q0: f64,
}

impl HazardResponseParams {
    pub fn new(
        lambda: f64,
        kappa: f64,
        alpha: f64,
        mu: f64,
        h0: f64,
        q0: f64,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            lambda: positive("lambda", lambda)?,
            kappa: positive("kappa", kappa)?,
            alpha: positive("alpha", alpha)?,
            mu: positive("mu", mu)?,
            h0: positive("h0", h0)?,
            q0: positive("q0", q0)?,
        })
    }

    pub fn initial_state(&self) -> [f64; 3] {
        [self.h0, self.q0, 0.0]
    }
}

/// Derivative of the hazard-response state `(h, q, H)`.
pub fn hazard_response_rhs(state: &[f64; 3], p: &HazardResponseParams) -> [f64; 3] {
    let [h, q, _] = *state;
    let competition = p.alpha * q * h;
    [
        p.lambda * h * (1.0 - h / p.kappa) - competition,
        p.mu * q * (1.0 - q / p.kappa) - competition,
        h,
    ]
}

impl OdeSystem<3> for HazardResponseParams {
    fn rhs(&self, y: &[f64; 3]) -> [f64; 3] {
        hazard_response_rhs(y, self)
    }
}

/// Long-time regime of the hazard-response system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attractor {
    /// `h → κ`, `q → 0`.
    HazardWins,
    /// `h → 0`, `q → κ`.
    ResponseWins,
    /// `h → h*`, `q → q*`, both positive.
    Coexistence,
    /// Both boundary equilibria are stable; the initial condition picks one.
    Bistable,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttractorSummary {
    pub kind: Attractor,
    pub h_star: f64,
    pub q_star: f64,
    pub d: f64,
}

/// Classifies the long-time behaviour from the interior equilibrium `(h*, q*)`.
///
/// With `D > 0` the interior equilibrium is stable whenever it is positive and
/// the signs of `h*`, `q*` pick the winner directly. With `D < 0` the
/// competition is strong, the stability of the boundary equilibria flips, and a
/// positive interior point is a saddle separating two basins.
pub fn classify_attractor(p: &HazardResponseParams) -> AttractorSummary {
    let ak = p.alpha * p.kappa;
    let d = 1.0 - ak * ak / (p.lambda * p.mu);
    let h_star = p.kappa * (1.0 - ak / p.lambda) / d;
    let q_star = p.kappa * (1.0 - ak / p.mu) / d;
    let degenerate = !(d.is_finite() && h_star.is_finite() && q_star.is_finite())
        || d.abs() < DEGENERACY_TOL
        || h_star.abs() < DEGENERACY_TOL
        || q_star.abs() < DEGENERACY_TOL;
    let kind = if degenerate {
        Attractor::Degenerate
    } else if d > 0.0 {
        if q_star < 0.0 {
            Attractor::HazardWins
        } else if h_star < 0.0 {
            Attractor::ResponseWins
        } else {
            Attractor::Coexistence
        }
    } else if q_star < 0.0 {
        Attractor::ResponseWins
    } else if h_star < 0.0 {
        Attractor::HazardWins
    } else {
        Attractor::Bistable
    };
    AttractorSummary {
        kind,
        h_star,
        q_star,
        d,
    }
}

/// ODE parameters for one individual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OdeParams {
    Logistic(LogisticParams),
    HazardResponse(HazardResponseParams),
}

/// Hazard, response (if any) and cumulative hazard at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardPoint {
    pub hazard: f64,
    pub response: Option<f64>,
    pub cumhaz: f64,
}

impl OdeParams {
    /// `(h(t), H(t))`, closed form for the logistic family and one solve otherwise.
    pub fn hazard_cumhaz(&self, t: f64, opts: &SolverOptions) -> Result<(f64, f64), OdeError> {
        match self {
            OdeParams::Logistic(p) => Ok((logistic_hazard(t, p), logistic_cumhaz(t, p))),
            OdeParams::HazardResponse(p) => {
                let y = ode::solve_final(p, &p.initial_state(), t, opts, None)?;
                Ok((y[0], y[2]))
            }
        }
    }

    /// Evaluates the model on a sorted grid inside `[0, t_end]`.
    pub fn curve(&self, grid: &[f64], opts: &SolverOptions) -> Result<Vec<HazardPoint>, OdeError> {
        match self {
            OdeParams::Logistic(p) => Ok(grid
                .iter()
                .map(|&t| HazardPoint {
                    hazard: logistic_hazard(t, p),
                    response: None,
                    cumhaz: logistic_cumhaz(t, p),
                })
                .collect()),
            OdeParams::HazardResponse(p) => {
                let t_end = grid.iter().copied().fold(0.0, f64::max);
                let traj: Trajectory<3> = ode::integrate(p, &p.initial_state(), t_end, opts)?;
                grid.iter()
                    .map(|&t| {
                        traj.evaluate_at(t).map(|y| HazardPoint {
                            hazard: y[0],
                            response: Some(y[1]),
                            cumhaz: y[2],
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Parameters produced by [`eval_predictors`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predicted {
    pub params: OdeParams,
    /// Some inverse-log-link output hit [`LOG_LINK_CAP`].
    pub saturated: bool,
}

/// Most predictors any family uses: four ODE parameters plus `log h0`.
pub const MAX_PREDICTORS: usize = 5;

impl ModelSpec {
    /// Number of scalar predictors per individual, counting a free `log h0`.
    pub fn n_predictors(&self) -> usize {
        self.formulas.len() + usize::from(self.has_free_h0())
    }

    /// For each predictor, the η indices and covariate multipliers entering it.
    pub fn predictor_terms(&self, x: &[f64]) -> Vec<Vec<(usize, f64)>> {
        let mut out = Vec::with_capacity(self.n_predictors());
        for (off, cols) in self.block_offsets().into_iter().zip(&self.formulas) {
            let mut terms = vec![(off, 1.0)];
            terms.extend(cols.iter().enumerate().map(|(j, &c)| (off + 1 + j, x[c])));
            out.push(terms);
        }
        if self.has_free_h0() {
            out.push(vec![(self.dim() - 1, 1.0)]);
        }
        out
    }
}

/// Linear predictor values `β_k0 + x_kᵀ β_k`, followed by `log h0` when free.
pub fn linear_predictors(
    spec: &ModelSpec,
    eta: &[f64],
    x: &[f64],
) -> Result<[f64; MAX_PREDICTORS], ModelError> {
    let blocks = spec.blocks(eta)?;
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("parameter vector"));
    }
    let mut phi = [0.0; MAX_PREDICTORS];
    for (k, cols) in spec.formulas.iter().enumerate() {
        let mut lin = blocks.intercept(k);
        for (&c, &b) in cols.iter().zip(blocks.coefficients(k)) {
            let xv = *x.get(c).ok_or(ModelError::CovariateMismatch {
                expected: c + 1,
                got: x.len(),
            })?;
            if !xv.is_finite() {
                return Err(ModelError::NonFinite("covariate row"));
            }
            lin += b * xv;
        }
        phi[k] = lin;
    }
    if let Some(l) = blocks.log_h0() {
        phi[spec.formulas.len()] = l;
    }
    Ok(phi)
}

/// Applies the inverse links to predictor values.
pub fn params_from_predictors(spec: &ModelSpec, phi: &[f64]) -> Result<Predicted, ModelError> {
    let mut theta = [0.0; 4];
    let mut saturated = false;
    for (k, link) in spec.links.iter().enumerate() {
        let (v, sat) = link.inverse(phi[k]);
        theta[k] = v;
        saturated |= sat;
    }
    let params = match spec.family {
        Family::Logistic => {
            let h0 = match spec.h0 {
                InitialHazard::Fixed(v) => v,
                InitialHazard::Kappa => theta[1],
                InitialHazard::Free => {
                    let (v, sat) = Link::Log.inverse(phi[spec.formulas.len()]);
                    saturated |= sat;
                    v
                }
            };
            OdeParams::Logistic(LogisticParams::new(theta[0], theta[1], h0)?)
        }
        Family::HazardResponse => {
            let InitialHazard::Fixed(h0) = spec.h0 else {
                return Err(ModelError::InvalidSpec(
                    "hazard-response initial conditions must be fixed".into(),
                ));
            };
            let q0 = spec.q0.unwrap_or(f64::NAN);
            OdeParams::HazardResponse(HazardResponseParams::new(
                theta[0], theta[1], theta[2], theta[3], h0, q0,
            )?)
        }
    };
    Ok(Predicted { params, saturated })
}

/// Maps a covariate row and η to the individual's ODE parameters.
pub fn eval_predictors(spec: &ModelSpec, eta: &[f64], x: &[f64]) -> Result<Predicted, ModelError> {
    let phi = linear_predictors(spec, eta, x)?;
    params_from_predictors(spec, &phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn logistic_spec() -> ModelSpec {
        ModelSpec::logistic(vec![vec![0], vec![1]], InitialHazard::Fixed(0.1), 10.0)
    }

    fn scenario_spec() -> ModelSpec {
        ModelSpec::hazard_response(vec![vec![0], vec![1], vec![2], vec![3]], 0.01, 1e-6, 5.0)
    }

    #[test]
    fn zero_slopes_give_intercept_parameters() {
        let eta = [2f64.ln(), 0.0, 3f64.ln(), 0.0];
        let p = eval_predictors(&logistic_spec(), &eta, &[0.7, -1.2]).unwrap();
        let OdeParams::Logistic(lp) = p.params else { panic!() };
        assert_abs_diff_eq!(lp.lambda, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lp.kappa, 3.0, epsilon = 1e-14);
        assert_eq!(lp.h0, 0.1);
        assert!(!p.saturated);
    }

    #[test]
    fn scenario_truth_substitution() {
        let eta = [1.5, 0.5, 0.5, -0.5, 1.0, 0.5, 3.0, -0.5];
        let p = eval_predictors(&scenario_spec(), &eta, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let OdeParams::HazardResponse(hp) = p.params else { panic!() };
        assert_abs_diff_eq!(hp.lambda, 2f64.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(hp.kappa, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(hp.alpha, 1f64.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(hp.mu, 3f64.exp(), epsilon = 1e-12);
        assert_eq!((hp.h0, hp.q0), (0.01, 1e-6));
    }

    #[test]
    fn identity_link_negative_value_is_rejected() {
        let mut spec = logistic_spec();
        spec.links[0] = Link::Identity;
        assert!(spec.validate(2).is_err());
        let err = eval_predictors(&spec, &[-1.0, 0.0, 0.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, ModelError::InvalidParameter { name: "lambda", .. }));
    }

    #[test]
    fn log_link_saturates() {
        let p = eval_predictors(&logistic_spec(), &[40.0, 0.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(p.saturated);
        let OdeParams::Logistic(lp) = p.params else { panic!() };
        assert_eq!(lp.lambda, LOG_LINK_CAP);
    }

    #[test]
    fn nan_covariate_is_an_error() {
        let err = eval_predictors(&logistic_spec(), &[0.0; 4], &[f64::NAN, 0.0]).unwrap_err();
        assert_eq!(err, ModelError::NonFinite("covariate row"));
    }

    #[test]
    fn dimension_mismatch() {
        let err = eval_predictors(&logistic_spec(), &[0.0; 3], &[0.0, 0.0]).unwrap_err();
        assert_eq!(err, ModelError::DimensionMismatch { expected: 4, got: 3 });
    }

    #[test]
    fn spec_validation() {
        assert!(logistic_spec().validate(2).is_ok());
        assert!(logistic_spec().validate(1).is_err());
        assert!(scenario_spec().validate(4).is_ok());
        let mut bad = scenario_spec();
        bad.q0 = None;
        assert!(bad.validate(4).is_err());
        let mut dup = logistic_spec();
        dup.formulas[0] = vec![1, 1];
        assert!(dup.validate(2).is_err());
    }

    #[test]
    fn dimension_counts_free_h0() {
        let spec = ModelSpec::logistic(vec![vec![0], vec![0]], InitialHazard::Free, 1.0);
        assert_eq!(spec.dim(), 5);
        assert_eq!(spec.n_coefficients(), 2);
        let names = vec!["trt".to_string()];
        assert_eq!(
            spec.labels(&names),
            ["lambda:intercept", "lambda:trt", "kappa:intercept", "kappa:trt", "log_h0"]
        );
    }

    #[test]
    fn logistic_closed_form_values() {
        let p = LogisticParams::new(1.0, 2.0, 0.5).unwrap();
        assert_abs_diff_eq!(logistic_hazard(1.0, &p), 0.950_733_772_837_343_4, epsilon = 1e-14);
        assert_abs_diff_eq!(logistic_cumhaz(1.0, &p), 0.714_748_039_017_576_9, epsilon = 1e-14);
        assert_eq!(logistic_hazard(0.0, &p), 0.5);
        assert_eq!(logistic_cumhaz(0.0, &p), 0.0);
    }

    #[test]
    fn logistic_equilibrium_is_constant() {
        let p = LogisticParams::new(1.3, 2.0, 2.0).unwrap();
        for t in [0.0, 0.5, 3.0, 100.0] {
            assert_eq!(logistic_hazard(t, &p), 2.0);
            assert_eq!(logistic_cumhaz(t, &p), 2.0 * t);
        }
    }

    #[test]
    fn logistic_large_time_is_finite() {
        let p = LogisticParams::new(50.0, 2.0, 1e-3).unwrap();
        let t = 1000.0;
        let h = logistic_hazard(t, &p);
        let cum = logistic_cumhaz(t, &p);
        assert_abs_diff_eq!(h, 2.0, epsilon = 1e-12);
        // H ≈ κ t + (κ/λ) log(h0/κ) for large t.
        assert_abs_diff_eq!(cum, 2.0 * t + 2.0 / 50.0 * (1e-3f64 / 2.0).ln(), epsilon = 1e-9);
        // Both branches agree around the switch point.
        let t_switch = LOGISTIC_LARGE_EXPONENT / p.lambda;
        let below = logistic_cumhaz(t_switch * (1.0 - 1e-12), &p);
        let above = logistic_cumhaz(t_switch * (1.0 + 1e-12), &p);
        assert_abs_diff_eq!(below, above, epsilon = 1e-9);
    }

    #[test]
    fn no_response_reduces_to_logistic() {
        let p = HazardResponseParams::new(1.5f64.exp(), 0.5f64.exp(), 1.0f64.exp(), 3.0f64.exp(), 0.01, 1e-6)
            .unwrap();
        let d = hazard_response_rhs(&[0.3, 0.0, 0.1], &p);
        assert_abs_diff_eq!(d[0], p.lambda * 0.3 * (1.0 - 0.3 / p.kappa), epsilon = 1e-15);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.3);
    }

    #[test]
    fn carrying_capacity_fixed_point_without_competition() {
        // α = 0 is outside the parameter space but the right-hand side is plain arithmetic.
        let p = HazardResponseParams {
            lambda: 1.2,
            kappa: 0.8,
            alpha: 0.0,
            mu: 3.0,
            h0: 0.01,
            q0: 1e-6,
        };
        let d = hazard_response_rhs(&[0.8, 0.8, 0.0], &p);
        assert_eq!(&d[..2], &[0.0, 0.0]);
    }

    #[test]
    fn rhs_hand_evaluated() {
        let p = HazardResponseParams::new(1.5f64.exp(), 0.5f64.exp(), 1.0f64.exp(), 3.0f64.exp(), 0.01, 1e-6)
            .unwrap();
        let d = hazard_response_rhs(&[0.01, 1e-6, 0.0], &p);
        // Evaluated independently with mpmath at 30 digits.
        assert_abs_diff_eq!(d[0], 0.044_545_035_337_716_46, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 2.005_834_192_240_912e-5, epsilon = 1e-18);
        assert_eq!(d[2], 0.01);
    }

    #[test]
    fn attractor_examples() {
        let p = HazardResponseParams::new(1.0, 1.0, 1.5, 2.0, 0.01, 1e-6).unwrap();
        let s = classify_attractor(&p);
        assert_abs_diff_eq!(s.d, -0.125, epsilon = 1e-14);
        assert_abs_diff_eq!(s.h_star, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.q_star, -2.0, epsilon = 1e-12);
        // Strong competition: (κ, 0) is invadable by q (μ > ακ), so h → 0.
        assert_eq!(s.kind, Attractor::ResponseWins);

        let p = HazardResponseParams::new(0.5, 1.0, 0.8, 2.0, 0.01, 1e-6).unwrap();
        let s = classify_attractor(&p);
        assert_abs_diff_eq!(s.d, 0.36, epsilon = 1e-14);
        assert_abs_diff_eq!(s.h_star, -5.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.q_star, 5.0 / 3.0, epsilon = 1e-12);
        assert_eq!(s.kind, Attractor::ResponseWins);

        let p = HazardResponseParams::new(1.0, 1.0, 0.5, 1.0, 0.01, 1e-6).unwrap();
        let s = classify_attractor(&p);
        assert_abs_diff_eq!(s.d, 0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(s.h_star, 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(s.kind, Attractor::Coexistence);

        // Weak competition with ακ > μ: the hazard wins.
        let p = HazardResponseParams::new(4.0, 1.0, 1.5, 1.0, 0.01, 1e-6).unwrap();
        assert_eq!(classify_attractor(&p).kind, Attractor::HazardWins);
    }

    #[test]
    fn degenerate_boundary() {
        // ακ = λ puts h* exactly on zero.
        let p = HazardResponseParams::new(1.0, 1.0, 1.0, 2.0, 0.01, 1e-6).unwrap();
        assert_eq!(classify_attractor(&p).kind, Attractor::Degenerate);
        // (ακ)² = λμ gives D = 0.
        let p = HazardResponseParams::new(1.0, 1.0, 2.0, 4.0, 0.01, 1e-6).unwrap();
        assert_eq!(classify_attractor(&p).kind, Attractor::Degenerate);
    }

    #[test]
    fn hazard_response_curve_starts_at_initials() {
        let p = HazardResponseParams::new(2.0, 1.0, 1.0, 5.0, 0.01, 1e-6).unwrap();
        let pts = OdeParams::HazardResponse(p)
            .curve(&[0.0, 0.5, 1.0], &SolverOptions::default())
            .unwrap();
        assert_eq!(pts[0].hazard, 0.01);
        assert_eq!(pts[0].response, Some(1e-6));
        assert_eq!(pts[0].cumhaz, 0.0);
        assert!(pts[2].cumhaz > pts[1].cumhaz);
    }
}
