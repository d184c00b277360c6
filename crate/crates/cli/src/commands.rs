use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use survode::diagnostics::{kaplan_meier, kaplan_meier_by, predictive_curves, AttractorSummary};
use survode::inference::{
    adaptive_metropolis, credible_intervals, find_map, laplace_log_evidence, sample_normal_approx,
    FitResult, McmcOptions, PosteriorSample, SampleSource,
};
use survode::likelihood::{GramCache, Posterior, SurvivalDataset};
use survode::model::ModelSpec;
use survode::simulate::{generate_scenario, Censoring, ScenarioConfig};
use survode::varselect::{
    gibbs_select, median_model, model_posterior_probs, total_terms, GibbsOptions, InclusionMask,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{ingest_csv, num, read_matrix, select_columns, write_csv, write_dataset, write_toml, Meta};

fn out_file(out: &Path, name: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    Ok(out.join(name))
}

fn largest_time(data: &SurvivalDataset) -> f64 {
    data.times().iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Serialize, Deserialize)]
struct SimulateDoc {
    meta: Meta,
    n: usize,
    n_events: usize,
    horizon: f64,
    censoring_rate: f64,
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Validation("config has no [simulate] section".into()))?;
    let censoring = match (sim.censoring_rate, sim.horizon) {
        (Some(r), None) => Censoring::Rate(r),
        (None, Some(h)) => Censoring::Horizon(h),
        _ => {
            return Err(CliError::Validation(
                "give exactly one of simulate.censoring_rate and simulate.horizon".into(),
            ))
        }
    };
    let mut sc = ScenarioConfig::new(sim.n, censoring, seed);
    if let Some(t) = &sim.truth {
        if t.len() != sc.truth.len() {
            return Err(CliError::Validation(format!(
                "simulate.truth needs {} values, got {}",
                sc.truth.len(),
                t.len()
            )));
        }
        sc.truth = t.clone();
    }
    sc.grid_step = sim.grid_step.unwrap_or(sc.grid_step);
    sc.h0 = sim.h0.unwrap_or(sc.h0);
    sc.q0 = sim.q0.unwrap_or(sc.q0);
    let scenario = generate_scenario(&sc)?;
    let meta = Meta::new("simulate", cfg.hash(), Some(seed));
    write_dataset(&out_file(out, "data.csv")?, &meta, &scenario.data)?;
    write_toml(
        &out_file(out, "simulate.toml")?,
        &SimulateDoc {
            meta,
            n: scenario.data.n(),
            n_events: scenario.data.n_events(),
            horizon: scenario.horizon,
            censoring_rate: scenario.censoring_rate,
        },
    )
}

/// Intercepts at zero except κ (and a free h0) at the crude event rate.
fn initial_point(spec: &ModelSpec, data: &SurvivalDataset) -> Vec<f64> {
    let mut init = vec![0.0; spec.dim()];
    let total: f64 = data.times().iter().sum();
    let rate = (data.n_events().max(1) as f64 / total).ln();
    init[spec.block_offsets()[1]] = rate;
    if spec.has_free_h0() {
        init[spec.dim() - 1] = rate;
    }
    init
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

/// Ingests data and standardizes the configured columns.
fn load_data(cfg: &RunConfig, data_path: &Path) -> Result<(SurvivalDataset, Vec<ColumnScale>), CliError> {
    let mut data = ingest_csv(data_path)?;
    let names = cfg.model.as_ref().map(|m| m.standardize.clone()).unwrap_or_default();
    let cols = names
        .iter()
        .map(|n| {
            data.column_index(n)
                .ok_or_else(|| CliError::Validation(format!("standardize: {n:?} is not a data column")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let stats = data.standardize(&cols)?;
    let scales = names
        .into_iter()
        .zip(stats)
        .map(|(column, (mean, sd))| ColumnScale { column, mean, sd })
        .collect();
    Ok((data, scales))
}

struct Prepared {
    data: SurvivalDataset,
    spec: ModelSpec,
    labels: Vec<String>,
    scales: Vec<ColumnScale>,
}

fn prepare(cfg: &RunConfig, data_path: &Path) -> Result<Prepared, CliError> {
    let (data, scales) = load_data(cfg, data_path)?;
    let spec = cfg.model()?.spec(data.column_names(), Some(largest_time(&data)))?;
    let labels = spec.labels(data.column_names());
    Ok(Prepared { data, spec, labels, scales })
}

fn fit_model(cfg: &RunConfig, p: &Prepared, seed: u64) -> Result<FitResult, CliError> {
    let priors = cfg.priors.spec(&p.spec, Some(&p.data))?;
    let cache = GramCache::new();
    let post = Posterior::new(&p.data, p.spec.clone(), priors, cfg.likelihood_options(), &cache)?;
    let mut fit = find_map(&post, &initial_point(&p.spec, &p.data), &cfg.optim.options(seed))?;
    fit.log_evidence = laplace_log_evidence(&fit).ok();
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub labels: Vec<String>,
    pub map: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub log_posterior: f64,
    pub log_likelihood: f64,
    pub log_evidence: Option<f64>,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub n: usize,
    pub n_events: usize,
    pub n_parameters: usize,
    pub hessian: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDoc {
    pub meta: Meta,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub standardized: Vec<ColumnScale>,
    pub fit: FitSummary,
}

fn draws_rows(sample: &PosteriorSample) -> Vec<Vec<String>> {
    sample.draws.iter().map(|d| d.iter().map(|&v| num(v)).collect()).collect()
}

pub fn fit(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let p = prepare(cfg, data_path)?;
    let fit = fit_model(cfg, &p, seed)?;
    let meta = Meta::new("fit", cfg.hash(), Some(seed));
    let doc = FitDoc {
        meta: meta.clone(),
        standardized: p.scales.clone(),
        fit: FitSummary {
            labels: p.labels.clone(),
            map: fit.map.clone(),
            std_errors: fit.standard_errors(),
            log_posterior: fit.log_post_at_map,
            log_likelihood: fit.log_lik_at_map,
            log_evidence: fit.log_evidence,
            aic: fit.aic,
            bic: fit.bic,
            converged: fit.converged,
            iterations: fit.iterations,
            grad_norm: fit.grad_norm,
            n: p.data.n(),
            n_events: p.data.n_events(),
            n_parameters: fit.dim(),
            hessian: fit.hessian.clone(),
        },
    };
    write_toml(&out_file(out, "fit.toml")?, &doc)?;
    if cfg.fit.normal_samples > 0 {
        let sample = sample_normal_approx(&fit, cfg.fit.normal_samples, seed)?;
        write_csv(&out_file(out, "samples.csv")?, &meta, &p.labels, &draws_rows(&sample))?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct McmcDoc {
    meta: Meta,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    standardized: Vec<ColumnScale>,
    labels: Vec<String>,
    acceptance_rate: f64,
    n_iter: usize,
    burn_in: usize,
    thin: usize,
    n_draws: usize,
    mean: Vec<f64>,
    lo95: Vec<f64>,
    hi95: Vec<f64>,
}

pub fn mcmc(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let mc = cfg
        .mcmc
        .as_ref()
        .ok_or_else(|| CliError::Validation("config has no [mcmc] section".into()))?;
    let p = prepare(cfg, data_path)?;
    let fit = fit_model(cfg, &p, seed)?;
    let priors = cfg.priors.spec(&p.spec, Some(&p.data))?;
    let cache = GramCache::new();
    let post = Posterior::new(&p.data, p.spec.clone(), priors, cfg.likelihood_options(), &cache)?;
    let mut opts = McmcOptions::new(mc.n_iter, mc.burn_in, mc.thin, seed);
    opts.target_acceptance = mc.target_acceptance;
    if let Some(chol) = fit.hessian_matrix().cholesky() {
        let inv = chol.inverse();
        opts = opts.with_init_cov((0..inv.nrows()).map(|i| inv.row(i).iter().copied().collect()).collect());
    }
    let sample = adaptive_metropolis(&post, &fit.map, &opts)?;
    let meta = Meta::new("mcmc", cfg.hash(), Some(seed));
    write_csv(&out_file(out, "draws.csv")?, &meta, &p.labels, &draws_rows(&sample))?;
    let ci = credible_intervals(&sample, 0.95);
    let d = p.labels.len();
    let n = sample.len() as f64;
    write_toml(
        &out_file(out, "mcmc.toml")?,
        &McmcDoc {
            meta,
            standardized: p.scales.clone(),
            labels: p.labels,
            acceptance_rate: sample.acceptance_rate.unwrap_or(f64::NAN),
            n_iter: mc.n_iter,
            burn_in: mc.burn_in,
            thin: mc.thin,
            n_draws: sample.len(),
            mean: (0..d).map(|j| sample.column(j).iter().sum::<f64>() / n).collect(),
            lo95: ci.iter().map(|c| c.0).collect(),
            hi95: ci.iter().map(|c| c.1).collect(),
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct SelectDoc {
    meta: Meta,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    standardized: Vec<ColumnScale>,
    candidates: Vec<String>,
    median_model: String,
    median_formulas: BTreeMap<String, Vec<String>>,
    n_models: usize,
    failed_evaluations: usize,
}

pub fn select(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let sel = cfg
        .select
        .as_ref()
        .ok_or_else(|| CliError::Validation("config has no [select] section".into()))?;
    let (full, scales) = load_data(cfg, data_path)?;
    let candidates = sel.covariates.clone().unwrap_or_else(|| full.column_names().to_vec());
    let data = select_columns(&full, &candidates)?;
    let model = cfg.model()?;
    let mut spec = model.spec(data.column_names(), Some(largest_time(&data)))?;
    let names = spec.family.parameter_names();
    let init = match &sel.init_mask {
        Some(s) => s.parse::<InclusionMask>()?,
        None => InclusionMask::empty(names.len(), candidates.len()),
    };
    if init.n_params() != names.len() || init.n_covariates() != candidates.len() {
        return Err(CliError::Validation(format!(
            "init_mask must have {} blocks of {} bits",
            names.len(),
            candidates.len()
        )));
    }
    spec.formulas = init.formulas();
    let priors = cfg.priors.spec(&spec, Some(&data))?;
    let mut opts = GibbsOptions::new(sel.n_iter, sel.burn_in, seed);
    opts.optim = survode::inference::OptimOptions { restarts: 0, ..cfg.optim.options(seed) };
    opts.likelihood = cfg.likelihood_options();
    let result = gibbs_select(&data, &spec, &priors, &init, &opts)?;

    let meta = Meta::new("select", cfg.hash(), Some(seed));
    let d_tilde = total_terms(&spec, candidates.len());
    let mut probs = model_posterior_probs(&result.cache, priors.complexity, d_tilde);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let rows: Vec<Vec<String>> = probs
        .iter()
        .map(|(m, pr)| {
            let entry = result.cache.get(m).expect("cached model");
            vec![
                m.key(),
                m.size().to_string(),
                entry.log_evidence.map_or_else(|| "-inf".into(), num),
                num(*pr),
                result.frequencies.get(&m.key()).copied().unwrap_or(0).to_string(),
            ]
        })
        .collect();
    let header = ["mask", "size", "log_evidence", "posterior_prob", "visits"].map(String::from);
    write_csv(&out_file(out, "models.csv")?, &meta, &header, &rows)?;

    let mut incl_rows = Vec::new();
    for (k, p) in names.iter().enumerate() {
        for (j, c) in candidates.iter().enumerate() {
            incl_rows.push(vec![p.to_string(), c.clone(), num(result.inclusion[k][j])]);
        }
    }
    let header = ["parameter", "covariate", "probability"].map(String::from);
    write_csv(&out_file(out, "inclusion.csv")?, &meta, &header, &incl_rows)?;

    let median = median_model(&result.inclusion);
    let median_formulas = names
        .iter()
        .zip(median.formulas())
        .map(|(p, cols)| (p.to_string(), cols.iter().map(|&j| candidates[j].clone()).collect()))
        .collect();
    write_toml(
        &out_file(out, "select.toml")?,
        &SelectDoc {
            meta,
            standardized: scales,
            candidates,
            median_model: median.key(),
            median_formulas,
            n_models: result.cache.len(),
            failed_evaluations: result.failed_evaluations,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileSummary {
    name: String,
    n_draws: usize,
    failed_draws: usize,
    attractors: Option<AttractorSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictDoc {
    meta: Meta,
    profiles: Vec<ProfileSummary>,
}

pub fn predict(
    cfg: &RunConfig,
    draws_path: &Path,
    data_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let pc = cfg
        .predict
        .as_ref()
        .ok_or_else(|| CliError::Validation("config has no [predict] section".into()))?;
    let model = cfg.model()?;
    let loaded = data_path.map(|p| load_data(cfg, p)).transpose()?;
    if !model.standardize.is_empty() && loaded.is_none() {
        return Err(CliError::Validation("standardized covariates need --data to rescale profiles".into()));
    }
    let (data, scales) = match loaded {
        Some((d, s)) => (Some(d), s),
        None => (None, Vec::new()),
    };
    let columns = match &data {
        Some(d) => d.column_names().to_vec(),
        None => model.referenced_covariates(),
    };
    let spec = model.spec(&columns, data.as_ref().map(largest_time))?;
    let (header, draws) = read_matrix(draws_path)?;
    let labels = spec.labels(&columns);
    if header != labels {
        return Err(CliError::Validation(format!(
            "draw columns {header:?} do not match the model parameters {labels:?}"
        )));
    }
    let sample = PosteriorSample {
        draws,
        source: SampleSource::NormalApprox,
        seed: cfg.seed.unwrap_or(0),
        acceptance_rate: None,
        thinning: None,
        burn_in: None,
    };
    let t_max = pc.t_max.unwrap_or(spec.max_time);
    if pc.n_points < 2 {
        return Err(CliError::Validation("predict.n_points must be at least 2".into()));
    }
    let grid: Vec<f64> = (0..pc.n_points)
        .map(|i| t_max * i as f64 / (pc.n_points - 1) as f64)
        .collect();
    let referenced = model.referenced_covariates();
    let meta = Meta::new("predict", cfg.hash(), cfg.seed);
    let mut summaries = Vec::new();
    for profile in &pc.profiles {
        if profile.name.is_empty()
            || !profile.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(CliError::Validation(format!(
                "profile name {:?} must be non-empty and use only letters, digits, '_' or '-'",
                profile.name
            )));
        }
        for key in profile.values.keys() {
            if !columns.contains(key) {
                return Err(CliError::Validation(format!("profile {}: unknown covariate {key:?}", profile.name)));
            }
        }
        let x = columns
            .iter()
            .map(|c| match profile.values.get(c) {
                Some(v) => Ok(match scales.iter().find(|s| &s.column == c) {
                    Some(s) => (v - s.mean) / s.sd,
                    None => *v,
                }),
                None if referenced.contains(c) => Err(CliError::Validation(format!(
                    "profile {} has no value for {c:?}",
                    profile.name
                ))),
                None => Ok(0.0),
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let curves = predictive_curves(&spec, &sample, &x, &grid, &cfg.solver.options())?;
        let header = ["time", "quantity", "mean", "lo95", "hi95"].map(String::from);
        let mut bands = vec![("hazard", &curves.hazard)];
        if let Some(resp) = &curves.response {
            bands.push(("response", resp));
        }
        bands.push(("survival", &curves.survival));
        let rows: Vec<Vec<String>> = bands
            .iter()
            .flat_map(|(name, b)| {
                let grid = &grid;
                (0..grid.len()).map(move |i| {
                    vec![num(grid[i]), name.to_string(), num(b.mean[i]), num(b.lo95[i]), num(b.hi95[i])]
                })
            })
            .collect();
        write_csv(&out_file(out, &format!("curves_{}.csv", profile.name))?, &meta, &header, &rows)?;
        summaries.push(ProfileSummary {
            name: profile.name.clone(),
            n_draws: curves.n_draws,
            failed_draws: curves.failed_draws,
            attractors: curves.attractors,
        });
    }
    if let Some(d) = &data {
        let groups = match &pc.km_group {
            Some(g) => {
                let j = d
                    .column_index(g)
                    .ok_or_else(|| CliError::Validation(format!("km_group {g:?} is not a data column")))?;
                kaplan_meier_by(d, j)
                    .into_iter()
                    .map(|(v, km)| (format!("{g}={}", num(v)), km))
                    .collect()
            }
            None => vec![("all".to_string(), kaplan_meier(d.times(), d.status()))],
        };
        let mut rows = Vec::new();
        for (name, km) in &groups {
            for i in 0..km.times.len() {
                rows.push(vec![
                    name.clone(),
                    num(km.times[i]),
                    num(km.survival[i]),
                    km.at_risk[i].to_string(),
                    km.events[i].to_string(),
                ]);
            }
        }
        let header = ["group", "time", "survival", "at_risk", "events"].map(String::from);
        write_csv(&out_file(out, "km.csv")?, &meta, &header, &rows)?;
    }
    write_toml(&out_file(out, "attractors.toml")?, &PredictDoc { meta, profiles: summaries })
}

pub fn compare(fits: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if fits.is_empty() {
        return Err(CliError::Validation("compare needs at least one fit.toml".into()));
    }
    let mut hasher = Sha256::new();
    let mut docs = Vec::new();
    for path in fits {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        hasher.update(text.as_bytes());
        let doc: FitDoc = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .or_else(|| path.file_stem())
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        docs.push((name, doc.fit));
    }
    let best_aic = docs.iter().map(|d| d.1.aic).fold(f64::INFINITY, f64::min);
    let best_bic = docs.iter().map(|d| d.1.bic).fold(f64::INFINITY, f64::min);
    let rows: Vec<Vec<String>> = docs
        .iter()
        .map(|(name, f)| {
            vec![
                name.clone(),
                f.n_parameters.to_string(),
                f.n.to_string(),
                num(f.log_likelihood),
                num(f.aic),
                num(f.bic),
                num(f.aic - best_aic),
                num(f.bic - best_bic),
                f.log_evidence.map_or_else(|| "nan".into(), num),
            ]
        })
        .collect();
    let hash: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let meta = Meta::new("compare", hash, None);
    let header = [
        "model", "n_parameters", "n", "log_likelihood", "aic", "bic", "delta_aic", "delta_bic", "log_evidence",
    ]
    .map(String::from);
    write_csv(&out_file(out, "compare.csv")?, &meta, &header, &rows)
}
