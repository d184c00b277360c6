//! Run configuration read from a TOML document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use survode::inference::OptimOptions;
use survode::likelihood::{
    effective_sample_size_g, CoefficientPrior, GammaPrior, LikelihoodOptions, NormalPrior, PriorSpec,
    SurvivalDataset,
};
use survode::model::{Family, InitialHazard, Link, ModelSpec};
use survode::ode::{SolverOptions, Tolerance};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub fit: FitConfig,
    pub mcmc: Option<McmcConfig>,
    pub select: Option<SelectConfig>,
    pub simulate: Option<SimulateConfig>,
    pub predict: Option<PredictConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialHazardConfig {
    Value(f64),
    /// `"free"` or `"kappa"`.
    Mode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub h0: InitialHazardConfig,
    pub q0: Option<f64>,
    /// Defaults to the largest observed time.
    pub max_time: Option<f64>,
    /// Covariate names per ODE parameter; omitted parameters are intercept-only.
    #[serde(default)]
    pub formulas: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub links: BTreeMap<String, Link>,
    /// Columns centred and scaled to unit sd before fitting.
    #[serde(default)]
    pub standardize: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientPriorKind {
    GPrior,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub intercept_sd: f64,
    pub coefficients: CoefficientPriorKind,
    pub coefficient_sd: f64,
    /// Weight of censored rows in the effective sample size `n - w c`.
    pub censor_factor: f64,
    /// Per-parameter divisors of the effective sample size; missing entries are 1.
    pub g_divisors: BTreeMap<String, f64>,
    pub complexity: f64,
    pub h0_gamma: Option<GammaPrior>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            intercept_sd: 10.0,
            coefficients: CoefficientPriorKind::Normal,
            coefficient_sd: 10.0,
            censor_factor: 0.5,
            g_divisors: BTreeMap::new(),
            complexity: 0.0,
            h0_gamma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self { rtol: d.tol.rtol, atol: d.tol.atol, max_steps: d.max_steps }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: Tolerance { rtol: self.rtol, atol: self.atol },
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub simplex_evals: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub restarts: usize,
    pub jitter_sd: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let d = OptimOptions::default();
        Self {
            simplex_evals: d.simplex_evals,
            max_iter: d.max_iter,
            grad_tol: d.grad_tol,
            restarts: d.restarts,
            jitter_sd: d.jitter_sd,
        }
    }
}

impl OptimConfig {
    pub fn options(&self, seed: u64) -> OptimOptions {
        OptimOptions {
            simplex_evals: self.simplex_evals,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            restarts: self.restarts,
            jitter_sd: self.jitter_sd,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Draws from the normal approximation written next to the fit.
    pub normal_samples: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { normal_samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default = "target_acceptance")]
    pub target_acceptance: f64,
}

fn one() -> usize {
    1
}

fn target_acceptance() -> f64 {
    0.234
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    /// Candidate covariates; defaults to every covariate in the data.
    pub covariates: Option<Vec<String>>,
    /// Starting mask over the candidates; defaults to intercept-only.
    pub init_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    /// Target censoring proportion, calibrated from a pilot sample.
    pub censoring_rate: Option<f64>,
    /// Fixed administrative horizon.
    pub horizon: Option<f64>,
    pub grid_step: Option<f64>,
    pub truth: Option<Vec<f64>>,
    pub h0: Option<f64>,
    pub q0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Defaults to the model's follow-up horizon.
    pub t_max: Option<f64>,
    #[serde(default = "grid_points")]
    pub n_points: usize,
    /// Column used to split Kaplan–Meier curves when data is supplied.
    pub km_group: Option<String>,
    pub profiles: Vec<Profile>,
}

fn grid_points() -> usize {
    201
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    #[serde(default)]
    pub values: BTreeMap<String, f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Hex SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Validation("a seed must be given explicitly (config `seed` or --seed)".into()))
    }

    pub fn model(&self) -> Result<&ModelConfig, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::Validation("config has no [model] section".into()))
    }

    pub fn likelihood_options(&self) -> LikelihoodOptions {
        LikelihoodOptions { solver: self.solver.options(), force_numeric: false }
    }
}

impl ModelConfig {
    /// Covariate names referenced by the formulas, in first-use order.
    pub fn referenced_covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.family.parameter_names() {
            for c in self.formulas.get(*name).into_iter().flatten() {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
        }
        out
    }

    /// Model specification over the given covariate columns.
    pub fn spec(&self, columns: &[String], fallback_max_time: Option<f64>) -> Result<ModelSpec, CliError> {
        let names = self.family.parameter_names();
        for key in self.formulas.keys().chain(self.links.keys()) {
            if !names.contains(&key.as_str()) {
                return Err(CliError::Validation(format!(
                    "unknown parameter {key:?}; expected one of {names:?}"
                )));
            }
        }
        let formulas = names
            .iter()
            .map(|p| {
                self.formulas
                    .get(*p)
                    .into_iter()
                    .flatten()
                    .map(|c| {
                        columns.iter().position(|x| x == c).ok_or_else(|| {
                            CliError::Validation(format!("covariate {c:?} for {p} is not a data column"))
                        })
                    })
                    .collect::<Result<Vec<usize>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let h0 = match &self.h0 {
            InitialHazardConfig::Value(v) => InitialHazard::Fixed(*v),
            InitialHazardConfig::Mode(m) if m == "free" => InitialHazard::Free,
            InitialHazardConfig::Mode(m) if m == "kappa" => InitialHazard::Kappa,
            InitialHazardConfig::Mode(m) => {
                return Err(CliError::Validation(format!(
                    "h0 must be a number, \"free\" or \"kappa\", got {m:?}"
                )))
            }
        };
        let max_time = self
            .max_time
            .or(fallback_max_time)
            .ok_or_else(|| CliError::Validation("model.max_time is required without data".into()))?;
        let mut spec = match self.family {
            Family::Logistic => ModelSpec::logistic(formulas, h0, max_time),
            Family::HazardResponse => {
                let InitialHazard::Fixed(h0) = h0 else {
                    return Err(CliError::Validation("hazard-response models need a numeric h0".into()));
                };
                let q0 = self
                    .q0
                    .ok_or_else(|| CliError::Validation("hazard-response models need q0".into()))?;
                ModelSpec::hazard_response(formulas, h0, q0, max_time)
            }
        };
        for (k, p) in names.iter().enumerate() {
            if let Some(link) = self.links.get(*p) {
                spec.links[k] = *link;
            }
        }
        spec.validate(columns.len())?;
        Ok(spec)
    }
}

impl PriorConfig {
    pub fn spec(&self, model: &ModelSpec, data: Option<&SurvivalDataset>) -> Result<PriorSpec, CliError> {
        let names = model.family.parameter_names();
        for key in self.g_divisors.keys() {
            if !names.contains(&key.as_str()) {
                return Err(CliError::Validation(format!("unknown parameter {key:?} in g_divisors")));
            }
        }
        let coefficients = match self.coefficients {
            CoefficientPriorKind::Normal => CoefficientPrior::Normal { sd: self.coefficient_sd },
            CoefficientPriorKind::GPrior => {
                let data = data.ok_or_else(|| CliError::Validation("the g-prior needs data".into()))?;
                let divisors: Vec<f64> =
                    names.iter().map(|p| self.g_divisors.get(*p).copied().unwrap_or(1.0)).collect();
                CoefficientPrior::GPrior { g: effective_sample_size_g(data, self.censor_factor, &divisors) }
            }
        };
        let priors = PriorSpec {
            intercepts: vec![NormalPrior { mean: 0.0, sd: self.intercept_sd }; names.len()],
            coefficients,
            h0: self.h0_gamma,
            complexity: self.complexity,
        };
        priors.validate(model)?;
        Ok(priors)
    }
}
