//! Posterior and fit diagnostics: KDE total variation, hazard L1 distance,
//! Kaplan–Meier curves, predictive bands and Kolmogorov–Smirnov statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{quantile_sorted, PosteriorSample};
use crate::likelihood::SurvivalDataset;
use crate::model::{classify_attractor, eval_predictors, Attractor, ModelSpec, OdeParams};
use crate::ode::SolverOptions;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("sample needs at least {min} draws, got {got}")]
    TooSmall { min: usize, got: usize },
    #[error("sample has zero variance")]
    ZeroVariance,
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{failed} of {total} posterior draws failed to evaluate")]
    TooManyFailures { failed: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Bandwidth {
    /// `0.9 · min(sd, IQR/1.34) · n^(-1/5)`.
    Silverman,
    Fixed(f64),
}

pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64, DiagnosticsError> {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(DiagnosticsError::ZeroVariance);
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * n.powf(-0.2))
}

// Kernel contributions beyond this many bandwidths are dropped (< 1e-21 relative).
const KERNEL_REACH: f64 = 10.0;

/// Gaussian kernel density estimate over sorted data.
struct Kde {
    sorted: Vec<f64>,
    h: f64,
    norm: f64,
}

impl Kde {
    fn new(sample: &[f64], bw: Bandwidth) -> Result<Self, DiagnosticsError> {
        let h = match bw {
            Bandwidth::Silverman => silverman_bandwidth(sample)?,
            Bandwidth::Fixed(h) if h > 0.0 => h,
            Bandwidth::Fixed(h) => return Err(DiagnosticsError::Input(format!("bandwidth {h}"))),
        };
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        let norm = 1.0 / (sample.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        Ok(Self { sorted, h, norm })
    }

    fn density(&self, x: f64) -> f64 {
        let lo = self.sorted.partition_point(|&v| v < x - KERNEL_REACH * self.h);
        let hi = self.sorted.partition_point(|&v| v <= x + KERNEL_REACH * self.h);
        let s: f64 = self.sorted[lo..hi]
            .iter()
            .map(|&v| {
                let z = (x - v) / self.h;
                (-0.5 * z * z).exp()
            })
            .sum();
        s * self.norm
    }
}

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1] (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One G7K15 panel: (Kronrod estimate, |Kronrod − Gauss|).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let pair = f(c - r * XGK[j]) + f(c + r * XGK[j]);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * r, (kronrod - gauss).abs() * r)
}

fn adaptive_gk<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (est, err) = gk15(f, a, b);
    if err <= tol || depth == 0 {
        return est;
    }
    let m = 0.5 * (a + b);
    adaptive_gk(f, a, m, 0.5 * tol, depth - 1) + adaptive_gk(f, m, b, 0.5 * tol, depth - 1)
}

/// Adaptive Gauss–Kronrod over `panels` equal initial panels.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, tol: f64) -> f64 {
    let panels = panels.max(1);
    let w = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + i as f64 * w;
            let hi = if i + 1 == panels { b } else { lo + w };
            adaptive_gk(&f, lo, hi, tol / panels as f64, 12)
        })
        .sum()
}

/// Total variation distance `½ ∫ |f̂_a − f̂_b|` between Gaussian KDEs.
pub fn tv_distance(a: &[f64], b: &[f64], bw: Bandwidth) -> Result<f64, DiagnosticsError> {
    for s in [a, b] {
        if s.len() < 30 {
            return Err(DiagnosticsError::TooSmall { min: 30, got: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(DiagnosticsError::Input("non-finite draw".into()));
        }
    }
    let ka = Kde::new(a, bw)?;
    let kb = Kde::new(b, bw)?;
    let reach = 5.0 * ka.h.max(kb.h);
    let lo = ka.sorted[0].min(kb.sorted[0]) - reach;
    let hi = ka.sorted[ka.sorted.len() - 1].max(kb.sorted[kb.sorted.len() - 1]) + reach;
    let panels = ((hi - lo) / ka.h.min(kb.h)).ceil().clamp(16.0, 4096.0) as usize;
    let l1 = integrate(|x| (ka.density(x) - kb.density(x)).abs(), lo, hi, panels, 1e-9);
    Ok((0.5 * l1).clamp(0.0, 1.0))
}

/// `∫₀^{t*} |h_a − h_b| dt` by the composite trapezoid rule; `step` defaults to `10⁻³ t*`.
pub fn l1_hazard_distance<E, A, B>(
    h_a: A,
    h_b: B,
    t_star: f64,
    step: Option<f64>,
) -> Result<f64, E>
where
    A: Fn(f64) -> Result<f64, E>,
    B: Fn(f64) -> Result<f64, E>,
{
    let grid = trapezoid_grid(t_star, step);
    let diffs = grid
        .iter()
        .map(|&t| Ok((h_a(t)? - h_b(t)?).abs()))
        .collect::<Result<Vec<f64>, E>>()?;
    Ok(trapezoid(&grid, &diffs))
}

fn trapezoid_grid(t_star: f64, step: Option<f64>) -> Vec<f64> {
    let step = step.unwrap_or(1e-3 * t_star);
    let n = (t_star / step).round().max(1.0) as usize;
    (0..=n).map(|i| t_star * i as f64 / n as f64).collect()
}

fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// L1 hazard distance between two parameterized models.
pub fn model_l1_distance(
    a: &OdeParams,
    b: &OdeParams,
    t_star: f64,
    step: Option<f64>,
    solver: &SolverOptions,
) -> Result<f64, crate::ode::OdeError> {
    let grid = trapezoid_grid(t_star, step);
    let ha = a.curve(&grid, solver)?;
    let hb = b.curve(&grid, solver)?;
    let diffs: Vec<f64> = ha.iter().zip(&hb).map(|(x, y)| (x.hazard - y.hazard).abs()).collect();
    Ok(trapezoid(&grid, &diffs))
}

/// Product-limit survival estimate, a right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaplanMeier {
    /// Distinct event times.
    pub times: Vec<f64>,
    /// `S(t)` just after each event time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KaplanMeier {
    pub fn evaluate(&self, t: f64) -> f64 {
        let j = self.times.partition_point(|&s| s <= t);
        if j == 0 {
            1.0
        } else {
            self.survival[j - 1]
        }
    }
}

pub fn kaplan_meier(times: &[f64], status: &[bool]) -> KaplanMeier {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut km = KaplanMeier {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut n_risk = times.len();
    let mut s = 1.0;
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut d = 0;
        let mut c = 0;
        while i < order.len() && times[order[i]] == t {
            if status[order[i]] {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        // Events at t are removed before censorings at t.
        if d > 0 {
            s *= 1.0 - d as f64 / n_risk as f64;
            km.times.push(t);
            km.survival.push(s);
            km.at_risk.push(n_risk);
            km.events.push(d);
        }
        n_risk -= d + c;
    }
    km
}

/// Kaplan–Meier curves per distinct value of a covariate column.
pub fn kaplan_meier_by(data: &SurvivalDataset, column: usize) -> Vec<(f64, KaplanMeier)> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for i in 0..data.n() {
        let v = data.row(i)[column];
        // Order-preserving key for finite floats.
        let bits = v.to_bits();
        let key = if v.is_sign_negative() { !bits } else { bits | (1 << 63) };
        groups.entry(key).or_default().push(i);
    }
    groups
        .into_values()
        .map(|rows| {
            let t: Vec<f64> = rows.iter().map(|&i| data.times()[i]).collect();
            let d: Vec<bool> = rows.iter().map(|&i| data.status()[i]).collect();
            (data.row(rows[0])[column], kaplan_meier(&t, &d))
        })
        .collect()
}

/// Pointwise posterior mean and central 95% band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

fn band(per_draw: &[Vec<f64>], len: usize) -> Band {
    let mut out = Band {
        mean: Vec::with_capacity(len),
        lo95: Vec::with_capacity(len),
        hi95: Vec::with_capacity(len),
    };
    let mut col = Vec::with_capacity(per_draw.len());
    for j in 0..len {
        col.clear();
        col.extend(per_draw.iter().map(|d| d[j]));
        out.mean.push(col.iter().sum::<f64>() / col.len() as f64);
        col.sort_by(f64::total_cmp);
        out.lo95.push(quantile_sorted(&col, 0.025));
        out.hi95.push(quantile_sorted(&col, 0.975));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorSummary {
    pub prob_h_star_negative: f64,
    pub prob_q_star_negative: f64,
    pub prob_both_positive: f64,
    /// Share of draws per long-time regime.
    pub regimes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveCurves {
    pub time: Vec<f64>,
    pub hazard: Band,
    pub response: Option<Band>,
    pub survival: Band,
    pub attractors: Option<AttractorSummary>,
    pub n_draws: usize,
    pub failed_draws: usize,
}

/// Largest share of draws allowed to fail before the summary is rejected.
pub const MAX_FAILED_FRACTION: f64 = 0.01;

struct DrawCurves {
    hazard: Vec<f64>,
    response: Option<Vec<f64>>,
    survival: Vec<f64>,
    attractor: Option<crate::model::AttractorSummary>,
}

/// Posterior predictive hazard, response and survival at one covariate profile.
pub fn predictive_curves(
    spec: &ModelSpec,
    sample: &PosteriorSample,
    x_profile: &[f64],
    grid: &[f64],
    solver: &SolverOptions,
) -> Result<PredictiveCurves, DiagnosticsError> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DiagnosticsError::Input("time grid must be non-empty and increasing".into()));
    }
    if grid[0] < 0.0 || grid[grid.len() - 1] > spec.max_time {
        return Err(DiagnosticsError::Input(format!(
            "time grid must lie within [0, {}]",
            spec.max_time
        )));
    }
    if sample.is_empty() {
        return Err(DiagnosticsError::TooSmall { min: 1, got: 0 });
    }
    let per_draw: Vec<Option<DrawCurves>> = sample
        .draws
        .par_iter()
        .map(|eta| {
            let params = eval_predictors(spec, eta, x_profile).ok()?.params;
            let pts = params.curve(grid, solver).ok()?;
            let mut running = 0.0f64;
            let survival = pts
                .iter()
                .map(|p| {
                    running = running.max(p.cumhaz);
                    (-running).exp()
                })
                .collect();
            let response = pts.iter().map(|p| p.response).collect::<Option<Vec<f64>>>();
            let attractor = match params {
                OdeParams::HazardResponse(hp) => Some(classify_attractor(&hp)),
                OdeParams::Logistic(_) => None,
            };
            let hazard: Vec<f64> = pts.iter().map(|p| p.hazard).collect();
            hazard.iter().all(|v| v.is_finite()).then_some(DrawCurves {
                hazard,
                response,
                survival,
                attractor,
            })
        })
        .collect();
    let total = per_draw.len();
    let ok: Vec<DrawCurves> = per_draw.into_iter().flatten().collect();
    let failed = total - ok.len();
    if ok.is_empty() || failed as f64 > MAX_FAILED_FRACTION * total as f64 {
        return Err(DiagnosticsError::TooManyFailures { failed, total });
    }
    let m = grid.len();
    let hazards: Vec<Vec<f64>> = ok.iter().map(|d| d.hazard.clone()).collect();
    let survivals: Vec<Vec<f64>> = ok.iter().map(|d| d.survival.clone()).collect();
    let responses: Option<Vec<Vec<f64>>> = ok.iter().map(|d| d.response.clone()).collect();
    let attractors = ok
        .iter()
        .map(|d| d.attractor)
        .collect::<Option<Vec<_>>>()
        .map(|a| summarize_attractors(&a));
    Ok(PredictiveCurves {
        time: grid.to_vec(),
        hazard: band(&hazards, m),
        response: responses.map(|r| band(&r, m)),
        survival: band(&survivals, m),
        attractors,
        n_draws: ok.len(),
        failed_draws: failed,
    })
}

fn summarize_attractors(a: &[crate::model::AttractorSummary]) -> AttractorSummary {
    let n = a.len() as f64;
    let share = |pred: &dyn Fn(&crate::model::AttractorSummary) -> bool| {
        a.iter().filter(|s| pred(s)).count() as f64 / n
    };
    let mut regimes = BTreeMap::new();
    for kind in [
        Attractor::HazardWins,
        Attractor::ResponseWins,
        Attractor::Coexistence,
        Attractor::Bistable,
        Attractor::Degenerate,
    ] {
        let name = serde_json_name(kind);
        regimes.insert(name, share(&|s| s.kind == kind));
    }
    AttractorSummary {
        prob_h_star_negative: share(&|s| s.h_star < 0.0),
        prob_q_star_negative: share(&|s| s.q_star < 0.0),
        prob_both_positive: share(&|s| s.h_star > 0.0 && s.q_star > 0.0),
        regimes,
    }
}

fn serde_json_name(kind: Attractor) -> String {
    match kind {
        Attractor::HazardWins => "hazard_wins",
        Attractor::ResponseWins => "response_wins",
        Attractor::Coexistence => "coexistence",
        Attractor::Bistable => "bistable",
        Attractor::Degenerate => "degenerate",
    }
    .to_string()
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic p-value of a KS statistic with effective sample size `n`.
pub fn kolmogorov_pvalue(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
