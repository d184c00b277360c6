//! Event-time simulation by numerical inversion of the cumulative hazard.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::quantile;
use crate::likelihood::{LikelihoodError, SurvivalDataset};
use crate::model::{eval_predictors, ModelError, ModelSpec, OdeParams};
use crate::ode::{OdeError, SolverOptions};

/// Monotonicity slack when checking a tabulated cumulative hazard.
pub const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulateError {
    #[error("cumulative hazard decreases at grid index {index} ({prev} -> {next})")]
    NonMonotone { index: usize, prev: f64, next: f64 },
    #[error("invalid simulation input: {0}")]
    Input(String),
    #[error("row {row}: {source}")]
    Row { row: usize, source: RowFailure },
    #[error(transparent)]
    Data(#[from] LikelihoodError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RowFailure {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("cumulative hazard decreases at grid index {0}")]
    NonMonotone(usize),
}

/// A latent event time; `beyond_horizon` marks draws past the tabulated range,
/// which are reported at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTime {
    pub time: f64,
    pub beyond_horizon: bool,
}

/// Cumulative hazard tabulated on `0, Δ, 2Δ, …, t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumhazGrid {
    times: Vec<f64>,
    cumhaz: Vec<f64>,
}

/// Grid `0, Δ, …` with the last knot at `t_max`.
pub fn time_grid(t_max: f64, step: f64) -> Vec<f64> {
    let n = (t_max / step - 1e-9).ceil().max(1.0) as usize;
    let mut g: Vec<f64> = (0..n).map(|i| i as f64 * step).collect();
    g.push(t_max);
    g
}

impl CumhazGrid {
    pub fn new(times: Vec<f64>, cumhaz: Vec<f64>) -> Result<Self, SimulateError> {
        Self::with_slack(times, cumhaz, MONOTONE_SLACK)
    }

    /// Accepts decreases up to `slack` per cell and flattens them.
    pub fn with_slack(times: Vec<f64>, mut cumhaz: Vec<f64>, slack: f64) -> Result<Self, SimulateError> {
        if times.len() != cumhaz.len() || times.len() < 2 {
            return Err(SimulateError::Input("grid needs at least two matching knots".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SimulateError::Input("grid times must increase".into()));
        }
        for (i, w) in cumhaz.windows(2).enumerate() {
            if !(w[1] >= w[0] - slack) {
                return Err(SimulateError::NonMonotone {
                    index: i + 1,
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        for i in 1..cumhaz.len() {
            cumhaz[i] = cumhaz[i].max(cumhaz[i - 1]);
        }
        Ok(Self { times, cumhaz })
    }

    /// Tabulates a model's cumulative hazard.
    pub fn from_params(
        params: &OdeParams,
        t_max: f64,
        step: f64,
        solver: &SolverOptions,
    ) -> Result<Self, RowFailure> {
        let times = time_grid(t_max, step);
        let cumhaz = params.curve(&times, solver)?.into_iter().map(|p| p.cumhaz).collect();
        // The solver may undershoot a vanishing hazard by up to its absolute tolerance.
        let slack = MONOTONE_SLACK.max(10.0 * solver.tol.atol);
        Self::with_slack(times, cumhaz, slack).map_err(|e| match e {
            SimulateError::NonMonotone { index, .. } => RowFailure::NonMonotone(index),
            other => unreachable!("grid is well formed: {other}"),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn cumhaz(&self) -> &[f64] {
        &self.cumhaz
    }

    /// Linear-interpolation inverse of the tabulated cumulative hazard.
    pub fn invert(&self, target: f64) -> SimulatedTime {
        let last = self.times.len() - 1;
        if target > self.cumhaz[last] {
            return SimulatedTime {
                time: self.times[last],
                beyond_horizon: true,
            };
        }
        if target <= self.cumhaz[0] {
            return SimulatedTime {
                time: self.times[0],
                beyond_horizon: false,
            };
        }
        // First knot with H ≥ target.
        let j = self.cumhaz.partition_point(|&h| h < target);
        let (h0, h1) = (self.cumhaz[j - 1], self.cumhaz[j]);
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let frac = if h1 > h0 { (target - h0) / (h1 - h0) } else { 1.0 };
        SimulatedTime {
            time: t0 + frac * (t1 - t0),
            beyond_horizon: false,
        }
    }
}

/// Inverts a cumulative hazard given on a grid.
pub fn invert_cumhaz(times: &[f64], cumhaz: &[f64], target: f64) -> Result<SimulatedTime, SimulateError> {
    if !(target >= 0.0) {
        return Err(SimulateError::Input(format!("target must be non-negative, got {target}")));
    }
    Ok(CumhazGrid::new(times.to_vec(), cumhaz.to_vec())?.invert(target))
}

/// Draws one time given a uniform variate `u ∈ (0, 1]`.
pub fn simulate_row(
    params: &OdeParams,
    t_max: f64,
    grid_step: f64,
    u: f64,
    solver: &SolverOptions,
) -> Result<SimulatedTime, RowFailure> {
    let grid = CumhazGrid::from_params(params, t_max, grid_step, solver)?;
    Ok(grid.invert(-u.ln()))
}

fn row_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One latent time per covariate row (row-major, `p` columns). Each row draws
/// from its own random stream, so results do not depend on the thread count.
pub fn simulate_times(
    spec: &ModelSpec,
    eta: &[f64],
    covariates: &[f64],
    p: usize,
    t_max: f64,
    grid_step: f64,
    seed: u64,
) -> Result<Vec<SimulatedTime>, SimulateError> {
    if !(grid_step > 0.0 && t_max > 0.0) {
        return Err(SimulateError::Input("grid_step and t_max must be positive".into()));
    }
    if p == 0 && !covariates.is_empty() || p > 0 && !covariates.len().is_multiple_of(p) {
        return Err(SimulateError::Input("covariate matrix shape".into()));
    }
    let n = covariates.len().checked_div(p).unwrap_or(0);
    simulate_n(spec, eta, n, |i| &covariates[i * p..(i + 1) * p], t_max, grid_step, seed)
}

fn simulate_n<'c, F>(
    spec: &ModelSpec,
    eta: &[f64],
    n: usize,
    row: F,
    t_max: f64,
    grid_step: f64,
    seed: u64,
) -> Result<Vec<SimulatedTime>, SimulateError>
where
    F: Fn(usize) -> &'c [f64] + Sync,
{
    let solver = SolverOptions::default();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let fail = |source: RowFailure| SimulateError::Row { row: i, source };
            let pred = eval_predictors(spec, eta, row(i)).map_err(|e| fail(e.into()))?;
            let u: f64 = row_rng(seed, i as u64).sample(Open01);
            simulate_row(&pred.params, t_max, grid_step, u, &solver).map_err(fail)
        })
        .collect()
}

/// Latent times for a model without covariates.
pub fn simulate_iid(
    spec: &ModelSpec,
    eta: &[f64],
    n: usize,
    t_max: f64,
    grid_step: f64,
    seed: u64,
) -> Result<Vec<SimulatedTime>, SimulateError> {
    simulate_n(spec, eta, n, |_| &[], t_max, grid_step, seed)
}

/// Administrative censoring `t = min(o, C)`, `δ = 1{o ≤ C}`.
pub fn apply_censoring(times: &[f64], horizon: f64) -> (Vec<f64>, Vec<bool>) {
    times.iter().map(|&o| (o.min(horizon), o <= horizon)).unzip()
}

/// Censoring for simulated times; draws past the tabulated range are censored.
pub fn censor_simulated(times: &[SimulatedTime], horizon: f64) -> (Vec<f64>, Vec<bool>) {
    times
        .iter()
        .map(|s| {
            let event = !s.beyond_horizon && s.time <= horizon;
            (s.time.min(horizon), event)
        })
        .unzip()
}

/// Coefficients of the reference hazard-response scenario, in predictor order
/// (λ: x1, κ: x2, α: x3, μ: x4).
pub const SCENARIO_TRUTH: [f64; 8] = [1.5, 0.5, 0.5, -0.5, 1.0, 0.5, 3.0, -0.5];
pub const SCENARIO_H0: f64 = 0.01;
pub const SCENARIO_Q0: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Censoring {
    /// Fixed administrative horizon C.
    Horizon(f64),
    /// Target censoring proportion; C is calibrated from a pilot sample.
    Rate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub censoring: Censoring,
    pub seed: u64,
    pub grid_step: f64,
    pub truth: Vec<f64>,
    pub h0: f64,
    pub q0: f64,
    pub pilot_size: usize,
    pub pilot_seed: u64,
    /// Horizon of the pilot used for calibration.
    pub pilot_horizon: f64,
}

impl ScenarioConfig {
    pub fn new(n: usize, censoring: Censoring, seed: u64) -> Self {
        Self {
            n,
            censoring,
            seed,
            grid_step: 0.01,
            truth: SCENARIO_TRUTH.to_vec(),
            h0: SCENARIO_H0,
            q0: SCENARIO_Q0,
            pilot_size: 20_000,
            pilot_seed: 0x5eed,
            pilot_horizon: 20.0,
        }
    }

    pub fn spec(&self, max_time: f64) -> ModelSpec {
        ModelSpec::hazard_response(vec![vec![0], vec![1], vec![2], vec![3]], self.h0, self.q0, max_time)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub data: SurvivalDataset,
    /// Administrative horizon used.
    pub horizon: f64,
    pub censoring_rate: f64,
}

/// Covariates `x1, x2 ~ Bernoulli(0.5)`, `x3, x4 ~ N(0, 1)`, row-major.
pub fn scenario_covariates(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = row_rng(seed, u64::MAX);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut out = Vec::with_capacity(4 * n);
    for _ in 0..n {
        out.push(f64::from(u8::from(coin.sample(&mut rng))));
        out.push(f64::from(u8::from(coin.sample(&mut rng))));
        out.push(rng.sample(StandardNormal));
        out.push(rng.sample(StandardNormal));
    }
    out
}

/// Horizon giving the requested censoring proportion under the scenario truth.
pub fn calibrate_horizon(cfg: &ScenarioConfig, rate: f64) -> Result<f64, SimulateError> {
    if !(0.0 < rate && rate < 1.0) {
        return Err(SimulateError::Input(format!("censoring rate must be in (0, 1), got {rate}")));
    }
    let spec = cfg.spec(cfg.pilot_horizon);
    let x = scenario_covariates(cfg.pilot_size, cfg.pilot_seed);
    let sims = simulate_times(&spec, &cfg.truth, &x, 4, cfg.pilot_horizon, cfg.grid_step, cfg.pilot_seed)?;
    let latent: Vec<f64> = sims
        .iter()
        .map(|s| if s.beyond_horizon { f64::INFINITY } else { s.time })
        .collect();
    let c = quantile(&latent, 1.0 - rate);
    if !c.is_finite() {
        return Err(SimulateError::Input(format!(
            "censoring rate {rate} is below the proportion of draws beyond the pilot horizon"
        )));
    }
    Ok(c)
}

/// Simulates one dataset from the reference hazard-response scenario.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario, SimulateError> {
    if cfg.n == 0 {
        return Err(SimulateError::Input("n must be at least 1".into()));
    }
    let horizon = match cfg.censoring {
        Censoring::Horizon(c) if c > 0.0 => c,
        Censoring::Horizon(c) => {
            return Err(SimulateError::Input(format!("horizon must be positive, got {c}")))
        }
        Censoring::Rate(r) => calibrate_horizon(cfg, r)?,
    };
    let spec = cfg.spec(horizon);
    let x = scenario_covariates(cfg.n, cfg.seed);
    let sims = simulate_times(&spec, &cfg.truth, &x, 4, horizon, cfg.grid_step, cfg.seed)?;
    let (mut times, status) = censor_simulated(&sims, horizon);
    // A draw of exactly zero is possible only for u = 1; keep times positive.
    for t in &mut times {
        if *t <= 0.0 {
            *t = f64::MIN_POSITIVE;
        }
    }
    let names = (1..=4).map(|j| format!("x{j}")).collect();
    let data = SurvivalDataset::new(times, status, x, names, Some(horizon))?;
    let censoring_rate = data.n_censored() as f64 / data.n() as f64;
    Ok(Scenario {
        data,
        horizon,
        censoring_rate,
    })
}
