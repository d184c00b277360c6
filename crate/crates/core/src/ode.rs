//! Adaptive Dormand–Prince 5(4) integration of small autonomous ODE systems.
//!
//! States are fixed-size arrays so that a single solve never allocates; this
//! matters because the likelihood solves one system per individual on every
//! evaluation. Three entry points share one stepping core:
//!
//! * [`integrate`] keeps every accepted step together with the 4th-order
//!   continuous extension, giving a [`Trajectory`] that can be queried anywhere
//!   on `[0, t_end]`.
//! * [`solve_final`] returns only the end state and can record the accepted
//!   step sizes.
//! * [`replay`] re-runs the scheme on recorded step sizes without error control.
//!   The result is a smooth function of the system parameters, which is what
//!   finite-difference derivatives need.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Right-hand side of an autonomous system `y' = f(y)`.
pub trait OdeSystem<const N: usize> {
    fn rhs(&self, y: &[f64; N]) -> [f64; N];
}

impl<const N: usize, F> OdeSystem<N> for F
where
    F: Fn(&[f64; N]) -> [f64; N],
{
    fn rhs(&self, y: &[f64; N]) -> [f64; N] {
        self(y)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("non-finite derivative at t = {t}")]
    NonFinite { t: f64 },
    #[error("exceeded {max_steps} accepted steps at t = {t}")]
    MaxSteps { t: f64, max_steps: usize },
    #[error("step size {h:e} fell below the floor at t = {t}")]
    StepTooSmall { t: f64, h: f64 },
    #[error("time {t} outside the integrated range [0, {t_end}]")]
    OutOfRange { t: f64, t_end: f64 },
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
}

/// Mixed relative/absolute error tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
        }
    }
}

impl Tolerance {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol }
    }

    pub fn halved(self) -> Self {
        Self {
            rtol: self.rtol * 0.5,
            atol: self.atol * 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: Tolerance,
    /// Maximum number of accepted steps per solve.
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: Tolerance::default(),
            max_steps: 100_000,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: Tolerance) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

// Dormand–Prince 5(4) tableau. The nodes c_i are not needed for autonomous systems.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension (Hairer, Nørsett & Wanner, DOPRI5 dense output).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// Step-size controller (PI, Hairer's defaults).
const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const FAC_MIN_INV: f64 = 5.0; // shrink by at most 1/0.2
const FAC_MAX_INV: f64 = 0.1; // grow by at most 10
const MIN_STEP_FRACTION: f64 = 1e-14;

/// Stage derivatives of one step; `k[6]` is the derivative at the new state.
struct Stages<const N: usize> {
    k: [[f64; N]; 7],
    y_new: [f64; N],
}

fn all_finite<const N: usize>(v: &[f64; N]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[inline(always)]
fn axpy<const N: usize, F: Fn(usize) -> f64>(y: &[f64; N], h: f64, slope: F) -> [f64; N] {
    std::array::from_fn(|i| y[i] + h * slope(i))
}

/// One Dormand–Prince step from `y` with derivative `k1`. Returns `None` if a
/// stage derivative is not finite.
#[inline]
fn dp_step<const N: usize, S: OdeSystem<N> + ?Sized>(
    sys: &S,
    y: &[f64; N],
    k1: &[f64; N],
    h: f64,
) -> Option<Stages<N>> {
    let k2 = sys.rhs(&axpy(y, h, |i| A21 * k1[i]));
    let k3 = sys.rhs(&axpy(y, h, |i| A31 * k1[i] + A32 * k2[i]));
    let k4 = sys.rhs(&axpy(y, h, |i| A41 * k1[i] + A42 * k2[i] + A43 * k3[i]));
    let k5 = sys.rhs(&axpy(y, h, |i| {
        A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]
    }));
    let k6 = sys.rhs(&axpy(y, h, |i| {
        A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]
    }));
    let y_new = axpy(y, h, |i| {
        A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]
    });
    let k7 = sys.rhs(&y_new);
    // Non-finite values propagate through later stages, so one check suffices.
    if !(all_finite(&k6) && all_finite(&k7) && all_finite(&y_new)) {
        return None;
    }
    Some(Stages {
        k: [*k1, k2, k3, k4, k5, k6, k7],
        y_new,
    })
}

fn error_norm<const N: usize>(st: &Stages<N>, y: &[f64; N], h: f64, tol: Tolerance) -> f64 {
    let k = &st.k;
    let mut sum = 0.0;
    for i in 0..N {
        let err = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i]
            + E6 * k[5][i]
            + E7 * k[6][i]);
        let sk = tol.atol + tol.rtol * y[i].abs().max(st.y_new[i].abs());
        let r = err / sk;
        sum += r * r;
    }
    (sum / N as f64).sqrt()
}

fn rms_scaled<const N: usize>(v: &[f64; N], y: &[f64; N], tol: Tolerance) -> f64 {
    let mut sum = 0.0;
    for i in 0..N {
        let r = v[i] / (tol.atol + tol.rtol * y[i].abs());
        sum += r * r;
    }
    (sum / N as f64).sqrt()
}

/// Starting step heuristic for a 5th-order method.
fn initial_step<const N: usize, S: OdeSystem<N> + ?Sized>(
    sys: &S,
    y0: &[f64; N],
    f0: &[f64; N],
    t_end: f64,
    tol: Tolerance,
) -> f64 {
    let d0 = rms_scaled(y0, y0, tol);
    let d1 = rms_scaled(f0, y0, tol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(t_end);
    let y1 = axpy(y0, h0, |i| f0[i]);
    let f1 = sys.rhs(&y1);
    let mut diff = [0.0; N];
    for i in 0..N {
        diff[i] = f1[i] - f0[i];
    }
    let d2 = if all_finite(&f1) {
        rms_scaled(&diff, y0, tol) / h0
    } else {
        f64::INFINITY
    };
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    (100.0 * h0).min(h1).min(t_end)
}

/// Runs the adaptive scheme on `[0, t_end]`, calling `on_accept(t, h, y_old, stages)`
/// after every accepted step. Returns the final state.
fn drive<const N: usize, S, F>(
    sys: &S,
    y0: &[f64; N],
    t_end: f64,
    opts: &SolverOptions,
    mut on_accept: F,
) -> Result<[f64; N], OdeError>
where
    S: OdeSystem<N> + ?Sized,
    F: FnMut(f64, f64, &[f64; N], &Stages<N>),
{
    validate(y0, t_end, opts)?;
    if t_end == 0.0 {
        return Ok(*y0);
    }
    let tol = opts.tol;
    let h_floor = MIN_STEP_FRACTION * t_end;
    let expo = 0.2 - BETA * 0.75;

    let mut t = 0.0;
    let mut y = *y0;
    let mut k1 = sys.rhs(&y);
    if !all_finite(&k1) {
        return Err(OdeError::NonFinite { t });
    }
    let mut h = initial_step(sys, &y, &k1, t_end, tol);
    let mut fac_old: f64 = 1e-4;
    let mut rejected = false;
    let mut accepted = 0usize;

    loop {
        if accepted >= opts.max_steps {
            return Err(OdeError::MaxSteps {
                t,
                max_steps: opts.max_steps,
            });
        }
        let last = t + 1.01 * h >= t_end;
        if last {
            h = t_end - t;
        }
        if h < h_floor {
            return Err(OdeError::StepTooSmall { t, h });
        }
        let Some(stages) = dp_step(sys, &y, &k1, h) else {
            // Overflow inside a trial step: shrink and retry.
            h *= 0.1;
            rejected = true;
            continue;
        };
        let err = error_norm(&stages, &y, h, tol);
        let fac11 = err.powf(expo);
        if err <= 1.0 {
            let mut fac = fac11 / fac_old.powf(BETA);
            fac = (fac / SAFETY).clamp(FAC_MAX_INV, FAC_MIN_INV);
            let mut h_new = h / fac;
            fac_old = err.max(1e-4);
            on_accept(t, h, &y, &stages);
            accepted += 1;
            y = stages.y_new;
            k1 = stages.k[6];
            if last {
                return Ok(y);
            }
            t += h;
            if rejected {
                h_new = h_new.min(h);
            }
            rejected = false;
            h = h_new;
        } else {
            h /= (fac11 / SAFETY).min(FAC_MIN_INV);
            rejected = true;
        }
    }
}

fn validate<const N: usize>(y0: &[f64; N], t_end: f64, opts: &SolverOptions) -> Result<(), OdeError> {
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(OdeError::InvalidInput(format!(
            "t_end must be finite and non-negative, got {t_end}"
        )));
    }
    if !(opts.tol.rtol > 0.0 && opts.tol.atol > 0.0) {
        return Err(OdeError::InvalidInput("tolerances must be positive".into()));
    }
    if N == 0 {
        return Err(OdeError::InvalidInput("empty state".into()));
    }
    if !all_finite(y0) {
        return Err(OdeError::InvalidInput("non-finite initial state".into()));
    }
    Ok(())
}

/// Dense solution of an autonomous system on `[0, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const N: usize> {
    knots: Vec<f64>,
    states: Vec<[f64; N]>,
    // Per interval: the five coefficient vectors of the continuous extension.
    dense: Vec<[[f64; N]; 5]>,
}

impl<const N: usize> Trajectory<N> {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn states(&self) -> &[[f64; N]] {
        &self.states
    }

    pub fn t_end(&self) -> f64 {
        *self.knots.last().expect("trajectory has at least one knot")
    }

    pub fn final_state(&self) -> [f64; N] {
        *self.states.last().expect("trajectory has at least one knot")
    }

    /// Number of accepted steps.
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    /// State at `t`, exact at knots and interpolated in between.
    pub fn evaluate_at(&self, t: f64) -> Result<[f64; N], OdeError> {
        let t_end = self.t_end();
        if !(t >= 0.0 && t <= t_end) {
            return Err(OdeError::OutOfRange { t, t_end });
        }
        let idx = match self.knots.binary_search_by(|k| k.total_cmp(&t)) {
            Ok(i) => return Ok(self.states[i]),
            Err(i) => i - 1,
        };
        let t0 = self.knots[idx];
        let h = self.knots[idx + 1] - t0;
        let theta = (t - t0) / h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.dense[idx];
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
        Ok(out)
    }

    /// Evaluates the state on a sorted grid.
    pub fn sample(&self, grid: &[f64]) -> Result<Vec<[f64; N]>, OdeError> {
        grid.iter().map(|&t| self.evaluate_at(t)).collect()
    }
}

/// Integrates `sys` from `y0` on `[0, t_end]` keeping the dense output.
pub fn integrate<const N: usize, S: OdeSystem<N> + ?Sized>(
    sys: &S,
    y0: &[f64; N],
    t_end: f64,
    opts: &SolverOptions,
) -> Result<Trajectory<N>, OdeError> {
    let mut knots = vec![0.0];
    let mut states = vec![*y0];
    let mut dense = Vec::new();
    drive(sys, y0, t_end, opts, |t, h, y, st| {
        let k = &st.k;
        let mut coeffs = [[0.0; N]; 5];
        for i in 0..N {
            let ydiff = st.y_new[i] - y[i];
            let bspl = h * k[0][i] - ydiff;
            coeffs[0][i] = y[i];
            coeffs[1][i] = ydiff;
            coeffs[2][i] = bspl;
            coeffs[3][i] = ydiff - h * k[6][i] - bspl;
            coeffs[4][i] = h
                * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i]
                    + D7 * k[6][i]);
        }
        dense.push(coeffs);
        let t_next = t + h;
        knots.push(if t_next > t_end { t_end } else { t_next });
        states.push(st.y_new);
    })?;
    // The last step is clamped to land on t_end exactly.
    if let Some(last) = knots.last_mut() {
        *last = t_end;
    }
    Ok(Trajectory {
        knots,
        states,
        dense,
    })
}

/// Integrates to `t_end` and returns only the final state. When `steps` is
/// given it receives the accepted step sizes in order.
pub fn solve_final<const N: usize, S: OdeSystem<N> + ?Sized>(
    sys: &S,
    y0: &[f64; N],
    t_end: f64,
    opts: &SolverOptions,
    steps: Option<&mut Vec<f64>>,
) -> Result<[f64; N], OdeError> {
    match steps {
        None => drive(sys, y0, t_end, opts, |_, _, _, _| {}),
        Some(m) => {
            m.clear();
            drive(sys, y0, t_end, opts, |_, h, _, _| m.push(h))
        }
    }
}

/// Re-runs the Dormand–Prince scheme over fixed step sizes without error control.
pub fn replay<const N: usize, S: OdeSystem<N> + ?Sized>(
    sys: &S,
    y0: &[f64; N],
    steps: &[f64],
) -> Result<[f64; N], OdeError> {
    let mut y = *y0;
    if steps.is_empty() {
        return Ok(y);
    }
    let mut t = 0.0;
    let mut k1 = sys.rhs(&y);
    for &h in steps {
        if !all_finite(&k1) {
            return Err(OdeError::NonFinite { t });
        }
        let st = dp_step(sys, &y, &k1, h).ok_or(OdeError::NonFinite { t })?;
        y = st.y_new;
        k1 = st.k[6];
        t += h;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn exp_growth(y: &[f64; 1]) -> [f64; 1] {
        [y[0]]
    }

    fn logistic(y: &[f64; 2]) -> [f64; 2] {
        // lambda = 1, kappa = 2
        [y[0] * (1.0 - y[0] / 2.0), y[0]]
    }

    // Closed-form logistic values for lambda=1, kappa=2, h0=0.5.
    const LOGISTIC_H1: f64 = 0.950_733_772_837_343_4;
    const LOGISTIC_CUMH1: f64 = 0.714_748_039_017_576_9;
    const LOGISTIC_H_HALF: f64 = 0.709_322_488_784_886_8;
    const LOGISTIC_CUMH_HALF: f64 = 0.300_595_650_225_611_2;

    #[test]
    fn exponential_growth_reaches_e() {
        let y = solve_final(&exp_growth, &[1.0], 1.0, &SolverOptions::default(), None).unwrap();
        assert_abs_diff_eq!(y[0], std::f64::consts::E, epsilon = 1e-8);
    }

    #[test]
    fn logistic_matches_closed_form() {
        let traj = integrate(&logistic, &[0.5, 0.0], 1.0, &SolverOptions::default()).unwrap();
        let end = traj.final_state();
        assert_abs_diff_eq!(end[0], LOGISTIC_H1, epsilon = 1e-8);
        assert_abs_diff_eq!(end[1], LOGISTIC_CUMH1, epsilon = 1e-8);
        let mid = traj.evaluate_at(0.5).unwrap();
        assert_abs_diff_eq!(mid[0], LOGISTIC_H_HALF, epsilon = 1e-6);
        assert_abs_diff_eq!(mid[1], LOGISTIC_CUMH_HALF, epsilon = 1e-6);
    }

    #[test]
    fn zero_horizon_gives_single_knot() {
        let traj = integrate(&logistic, &[0.5, 0.0], 0.0, &SolverOptions::default()).unwrap();
        assert_eq!(traj.knots(), &[0.0]);
        assert_eq!(traj.final_state(), [0.5, 0.0]);
        assert_eq!(traj.evaluate_at(0.0).unwrap(), [0.5, 0.0]);
    }

    #[test]
    fn knots_are_reproduced_exactly() {
        let traj = integrate(&logistic, &[0.5, 0.0], 3.0, &SolverOptions::default()).unwrap();
        assert!(traj.steps() > 1);
        for (t, s) in traj.knots().iter().zip(traj.states()) {
            assert_eq!(traj.evaluate_at(*t).unwrap(), *s);
        }
    }

    #[test]
    fn constant_derivative_is_interpolated_exactly() {
        let sys = |_: &[f64; 1]| [1.0];
        let traj = integrate(&sys, &[0.0], 7.5, &SolverOptions::default()).unwrap();
        for i in 0..=150 {
            let t = 0.05 * i as f64;
            assert_abs_diff_eq!(traj.evaluate_at(t).unwrap()[0], t, epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_range_is_rejected() {
        let traj = integrate(&logistic, &[0.5, 0.0], 1.0, &SolverOptions::default()).unwrap();
        assert!(matches!(traj.evaluate_at(1.5), Err(OdeError::OutOfRange { .. })));
        assert!(matches!(traj.evaluate_at(-0.1), Err(OdeError::OutOfRange { .. })));
    }

    #[test]
    fn blow_up_is_reported() {
        // y' = y^2 from 1 explodes at t = 1.
        let sys = |y: &[f64; 1]| [y[0] * y[0]];
        let err = solve_final(&sys, &[1.0], 2.0, &SolverOptions::default(), None).unwrap_err();
        assert!(matches!(
            err,
            OdeError::StepTooSmall { .. } | OdeError::NonFinite { .. } | OdeError::MaxSteps { .. }
        ));
    }

    #[test]
    fn step_budget_is_enforced() {
        let opts = SolverOptions {
            max_steps: 3,
            ..SolverOptions::default()
        };
        let err = solve_final(&logistic, &[0.5, 0.0], 50.0, &opts, None).unwrap_err();
        assert!(matches!(err, OdeError::MaxSteps { max_steps: 3, .. }));
    }

    #[test]
    fn invalid_inputs() {
        let opts = SolverOptions::default();
        assert!(solve_final(&logistic, &[0.5, 0.0], f64::NAN, &opts, None).is_err());
        assert!(solve_final(&logistic, &[0.5, 0.0], -1.0, &opts, None).is_err());
        let bad = SolverOptions::with_tol(Tolerance::new(0.0, 1e-10));
        assert!(solve_final(&logistic, &[0.5, 0.0], 1.0, &bad, None).is_err());
    }

    #[test]
    fn replay_on_recorded_mesh_is_identical() {
        let opts = SolverOptions::default();
        let mut steps = Vec::new();
        let adaptive = solve_final(&logistic, &[0.5, 0.0], 4.0, &opts, Some(&mut steps)).unwrap();
        assert_abs_diff_eq!(steps.iter().sum::<f64>(), 4.0, epsilon = 1e-12);
        let replayed = replay(&logistic, &[0.5, 0.0], &steps).unwrap();
        assert_eq!(adaptive, replayed);
        let traj = integrate(&logistic, &[0.5, 0.0], 4.0, &opts).unwrap();
        assert_eq!(traj.steps(), steps.len());
        assert_eq!(traj.final_state(), adaptive);
    }

    #[test]
    fn integration_is_deterministic() {
        let opts = SolverOptions::default();
        let a = integrate(&logistic, &[0.3, 0.0], 5.0, &opts).unwrap();
        let b = integrate(&logistic, &[0.3, 0.0], 5.0, &opts).unwrap();
        assert_eq!(a, b);
    }
}
