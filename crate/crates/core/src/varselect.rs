//! Gibbs sampling over covariate inclusion with Laplace-approximated evidences.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{find_map, laplace_log_evidence, OptimOptions};
use crate::likelihood::{
    log_complexity_prior, GramCache, LikelihoodOptions, Posterior, PriorSpec, SurvivalDataset,
};
use crate::model::ModelSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VarSelectError {
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("both models have zero posterior mass")]
    BothImpossible,
    #[error("invalid settings: {0}")]
    Settings(String),
    #[error("starting model {mask} could not be evaluated: {reason}")]
    InitialModel { mask: String, reason: String },
}

/// Which covariates enter which ODE parameter; intercepts are always included.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InclusionMask {
    rows: Vec<Vec<bool>>,
}

impl InclusionMask {
    pub fn empty(n_params: usize, n_covariates: usize) -> Self {
        Self { rows: vec![vec![false; n_covariates]; n_params] }
    }

    pub fn from_formulas(formulas: &[Vec<usize>], n_covariates: usize) -> Result<Self, VarSelectError> {
        let mut m = Self::empty(formulas.len(), n_covariates);
        for (k, cols) in formulas.iter().enumerate() {
            for &j in cols {
                if j >= n_covariates {
                    return Err(VarSelectError::Mask(format!("column {j} out of range")));
                }
                m.rows[k][j] = true;
            }
        }
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.rows.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn get(&self, k: usize, j: usize) -> bool {
        self.rows[k][j]
    }

    pub fn set(&mut self, k: usize, j: usize, value: bool) {
        self.rows[k][j] = value;
    }

    pub fn flipped(&self, k: usize, j: usize) -> Self {
        let mut m = self.clone();
        m.rows[k][j] = !m.rows[k][j];
        m
    }

    /// Number of included covariate terms.
    pub fn size(&self) -> usize {
        self.rows.iter().flatten().filter(|&&b| b).count()
    }

    /// Included column indices per parameter, ascending.
    pub fn formulas(&self) -> Vec<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect())
            .collect()
    }

    /// Canonical key, e.g. `0110|1000`.
    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for InclusionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, row) in self.rows.iter().enumerate() {
            if k > 0 {
                f.write_str("|")?;
            }
            for &b in row {
                f.write_str(if b { "1" } else { "0" })?;
            }
        }
        Ok(())
    }
}

impl FromStr for InclusionMask {
    type Err = VarSelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rows = s
            .split('|')
            .map(|block| {
                block
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(VarSelectError::Mask(format!("unexpected character {other:?}"))),
                    })
                    .collect::<Result<Vec<bool>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        if rows.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(VarSelectError::Mask(format!("blocks of unequal length in {s:?}")));
        }
        Ok(Self { rows })
    }
}

impl TryFrom<String> for InclusionMask {
    type Error = VarSelectError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<InclusionMask> for String {
    fn from(m: InclusionMask) -> Self {
        m.key()
    }
}

/// Full-conditional probability of moving to the proposed model.
pub fn flip_probability(
    log_ev_new: f64,
    log_prior_new: f64,
    log_ev_old: f64,
    log_prior_old: f64,
) -> Result<f64, VarSelectError> {
    let new = log_ev_new + log_prior_new;
    let old = log_ev_old + log_prior_old;
    if new == f64::NEG_INFINITY && old == f64::NEG_INFINITY {
        return Err(VarSelectError::BothImpossible);
    }
    if new.is_nan() || old.is_nan() {
        return Err(VarSelectError::Settings("NaN log score".into()));
    }
    let diff = new - old;
    Ok(if diff >= 0.0 {
        1.0 / (1.0 + (-diff).exp())
    } else {
        let e = diff.exp();
        e / (1.0 + e)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub mask: InclusionMask,
    /// `None` when the fit or the Laplace approximation failed.
    pub log_evidence: Option<f64>,
    pub map: Vec<f64>,
    pub log_post_at_map: Option<f64>,
    pub converged: bool,
}

/// Memoized evidences keyed by canonical mask.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelCache {
    entries: BTreeMap<String, ModelEntry>,
}

impl ModelCache {
    pub fn get(&self, mask: &InclusionMask) -> Option<&ModelEntry> {
        self.entries.get(&mask.key())
    }

    pub fn insert(&mut self, entry: ModelEntry) {
        self.entries.insert(entry.mask.key(), entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ModelEntry> {
        self.entries.values()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsOptions {
    /// Full sweeps over all (parameter, covariate) pairs.
    pub n_iter: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub optim: OptimOptions,
    pub likelihood: LikelihoodOptions,
}

impl GibbsOptions {
    pub fn new(n_iter: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            n_iter,
            burn_in,
            seed,
            optim: OptimOptions { restarts: 0, ..OptimOptions::default() },
            likelihood: LikelihoodOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsResult {
    /// Mask after each post-burn-in sweep.
    pub trace: Vec<InclusionMask>,
    /// Post-burn-in visit counts per mask.
    pub frequencies: BTreeMap<String, usize>,
    /// Marginal inclusion probability per (parameter, covariate).
    pub inclusion: Vec<Vec<f64>>,
    pub cache: ModelCache,
    /// Evaluations that failed and were given zero mass.
    pub failed_evaluations: usize,
}

/// Overall coefficient count used by the complexity prior.
pub fn total_terms(spec: &ModelSpec, n_covariates: usize) -> usize {
    spec.formulas.len() * n_covariates
}

fn warm_start(spec_from: &ModelSpec, from_map: &[f64], spec_to: &ModelSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec_to.dim());
    let from_offsets = spec_from.block_offsets();
    for (k, cols) in spec_to.formulas.iter().enumerate() {
        let off = from_offsets[k];
        out.push(from_map[off]);
        for c in cols {
            let v = spec_from.formulas[k]
                .iter()
                .position(|x| x == c)
                .map_or(0.0, |pos| from_map[off + 1 + pos]);
            out.push(v);
        }
    }
    if spec_to.has_free_h0() {
        out.push(from_map[from_map.len() - 1]);
    }
    out
}

struct Evaluator<'a> {
    data: &'a SurvivalDataset,
    spec: &'a ModelSpec,
    priors: &'a PriorSpec,
    opts: &'a GibbsOptions,
    gram: GramCache,
    failed: usize,
}

impl Evaluator<'_> {
    fn evaluate(&mut self, mask: &InclusionMask, init: Vec<f64>) -> ModelEntry {
        let spec = self.spec.with_formulas(mask.formulas());
        let attempt = || -> Result<ModelEntry, String> {
            let post = Posterior::new(self.data, spec.clone(), self.priors.clone(), self.opts.likelihood, &self.gram)
                .map_err(|e| e.to_string())?;
            let fit = find_map(&post, &init, &self.opts.optim).map_err(|e| e.to_string())?;
            let ev = laplace_log_evidence(&fit).map_err(|e| e.to_string())?;
            Ok(ModelEntry {
                mask: mask.clone(),
                log_evidence: ev.is_finite().then_some(ev),
                log_post_at_map: Some(fit.log_post_at_map),
                map: fit.map,
                converged: fit.converged,
            })
        };
        match attempt() {
            Ok(entry) if entry.log_evidence.is_some() => entry,
            outcome => {
                let reason = outcome.err().unwrap_or_else(|| "non-finite evidence".into());
                log::warn!("model {mask} given zero mass: {reason}");
                self.failed += 1;
                ModelEntry {
                    mask: mask.clone(),
                    log_evidence: None,
                    map: Vec::new(),
                    log_post_at_map: None,
                    converged: false,
                }
            }
        }
    }
}

/// Systematic-scan Gibbs sampler over inclusion masks.
pub fn gibbs_select(
    data: &SurvivalDataset,
    spec: &ModelSpec,
    priors: &PriorSpec,
    init_mask: &InclusionMask,
    opts: &GibbsOptions,
) -> Result<GibbsResult, VarSelectError> {
    if opts.n_iter <= opts.burn_in {
        return Err(VarSelectError::Settings(format!(
            "n_iter ({}) must exceed burn_in ({})",
            opts.n_iter, opts.burn_in
        )));
    }
    let p = data.n_covariates();
    if init_mask.n_params() != spec.formulas.len() || init_mask.n_covariates() != p {
        return Err(VarSelectError::Mask(format!(
            "expected {} blocks of {p} bits, got {init_mask}",
            spec.formulas.len()
        )));
    }
    let d_tilde = total_terms(spec, p);
    let log_prior = |m: &InclusionMask| log_complexity_prior(m.size(), priors.complexity, d_tilde);
    let mut eval = Evaluator { data, spec, priors, opts, gram: GramCache::new(), failed: 0 };
    let mut cache = ModelCache::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let init_spec = spec.with_formulas(init_mask.formulas());
    let mut current = init_mask.clone();
    let first = eval.evaluate(&current, vec![0.0; init_spec.dim()]);
    let mut current_ev = first.log_evidence.ok_or_else(|| VarSelectError::InitialModel {
        mask: current.key(),
        reason: "fit or Laplace approximation failed".into(),
    })?;
    let mut current_map = first.map.clone();
    cache.insert(first);

    let mut counts = vec![vec![0usize; p]; spec.formulas.len()];
    let mut trace = Vec::with_capacity(opts.n_iter - opts.burn_in);
    let mut frequencies = BTreeMap::new();
    for sweep in 0..opts.n_iter {
        for k in 0..spec.formulas.len() {
            for j in 0..p {
                let proposal = current.flipped(k, j);
                let entry = match cache.get(&proposal) {
                    Some(e) => e.clone(),
                    None => {
                        let from = spec.with_formulas(current.formulas());
                        let to = spec.with_formulas(proposal.formulas());
                        let e = eval.evaluate(&proposal, warm_start(&from, &current_map, &to));
                        cache.insert(e.clone());
                        e
                    }
                };
                let new_ev = entry.log_evidence.unwrap_or(f64::NEG_INFINITY);
                let prob = flip_probability(new_ev, log_prior(&proposal), current_ev, log_prior(&current))?;
                let u: f64 = rng.random();
                if u < prob {
                    current = proposal;
                    current_ev = new_ev;
                    current_map = entry.map;
                }
            }
        }
        if sweep >= opts.burn_in {
            for (k, row) in counts.iter_mut().enumerate() {
                for (j, c) in row.iter_mut().enumerate() {
                    *c += usize::from(current.get(k, j));
                }
            }
            *frequencies.entry(current.key()).or_insert(0) += 1;
            trace.push(current.clone());
        }
    }
    let kept = (opts.n_iter - opts.burn_in) as f64;
    Ok(GibbsResult {
        trace,
        frequencies,
        inclusion: counts
            .into_iter()
            .map(|r| r.into_iter().map(|c| c as f64 / kept).collect())
            .collect(),
        cache,
        failed_evaluations: eval.failed,
    })
}

/// Mask of terms whose inclusion probability is strictly above one half.
pub fn median_model(inclusion: &[Vec<f64>]) -> InclusionMask {
    InclusionMask {
        rows: inclusion.iter().map(|r| r.iter().map(|&v| v > 0.5).collect()).collect(),
    }
}

/// Posterior model probabilities, normalized over the models in the cache.
pub fn model_posterior_probs(
    cache: &ModelCache,
    complexity: f64,
    d_tilde: usize,
) -> Vec<(InclusionMask, f64)> {
    let scored: Vec<(InclusionMask, f64)> = cache
        .entries()
        .filter_map(|e| {
            e.log_evidence
                .map(|ev| (e.mask.clone(), ev + log_complexity_prior(e.mask.size(), complexity, d_tilde)))
        })
        .collect();
    let top = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scored.iter().map(|s| (s.1 - top).exp()).sum();
    scored
        .into_iter()
        .map(|(m, s)| (m, (s - top).exp() / total))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn entry(key: &str, ev: Option<f64>) -> ModelEntry {
        ModelEntry {
            mask: key.parse().unwrap(),
            log_evidence: ev,
            map: vec![],
            log_post_at_map: None,
            converged: true,
        }
    }

    #[test]
    fn mask_key_round_trip() {
        let m: InclusionMask = "0110|1000".parse().unwrap();
        assert_eq!(m.key(), "0110|1000");
        assert_eq!(m.formulas(), vec![vec![1, 2], vec![0]]);
        assert_eq!(m.size(), 3);
        assert_eq!(InclusionMask::from_formulas(&m.formulas(), 4).unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), "\"0110|1000\"");
        assert!("01|1".parse::<InclusionMask>().is_err());
        assert!("0x".parse::<InclusionMask>().is_err());
        assert_eq!(m.flipped(1, 3).key(), "0110|1001");
    }

    #[test]
    fn flip_probability_examples() {
        assert_eq!(flip_probability(-3.0, -1.0, -3.0, -1.0).unwrap(), 0.5);
        assert_eq!(flip_probability(f64::NEG_INFINITY, 0.0, -10.0, 0.0).unwrap(), 0.0);
        assert_eq!(flip_probability(-10.0, 0.0, f64::NEG_INFINITY, 0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(
            flip_probability(1.0, 1.0, 0.0, 0.0).unwrap(),
            0.880_797_077_977_882_3,
            epsilon = 1e-15
        );
        assert_eq!(
            flip_probability(f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0),
            Err(VarSelectError::BothImpossible)
        );
        let tiny = flip_probability(-700.0, 0.0, 0.0, 0.0).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-300);
    }

    #[test]
    fn median_model_thresholds_strictly() {
        assert_eq!(median_model(&[vec![0.0, 0.0]]).size(), 0);
        assert_eq!(median_model(&[vec![0.5]]).size(), 0);
        assert_eq!(median_model(&[vec![0.9, 0.3, 0.7]]).key(), "101");
    }

    #[test]
    fn posterior_probs_softmax() {
        let mut cache = ModelCache::default();
        cache.insert(entry("00", Some(0.0)));
        let single = model_posterior_probs(&cache, 0.0, 2);
        assert_eq!(single[0].1, 1.0);
        cache.insert(entry("01", Some(-1.0)));
        cache.insert(entry("10", Some(-2.0)));
        cache.insert(entry("11", None));
        let probs: BTreeMap<String, f64> = model_posterior_probs(&cache, 0.0, 2)
            .into_iter()
            .map(|(m, p)| (m.key(), p))
            .collect();
        assert_eq!(probs.len(), 3);
        // scipy.special.softmax([0, -1, -2])
        assert_abs_diff_eq!(probs["00"], 0.665_240_955_774_821_4, epsilon = 1e-12);
        assert_abs_diff_eq!(probs["01"], 0.244_728_471_054_797_6, epsilon = 1e-12);
        assert_abs_diff_eq!(probs["10"], 0.090_030_573_170_380_46, epsilon = 1e-12);
        assert_abs_diff_eq!(probs.values().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_scores_split_evenly() {
        let mut cache = ModelCache::default();
        cache.insert(entry("0", Some(-5.0)));
        cache.insert(entry("1", Some(-5.0)));
        for (_, p) in model_posterior_probs(&cache, 0.0, 1) {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn warm_start_copies_shared_terms() {
        let base = ModelSpec::logistic(vec![vec![0, 2], vec![1]], crate::model::InitialHazard::Free, 5.0);
        let to = base.with_formulas(vec![vec![2, 3], vec![]]);
        let map = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(warm_start(&base, &map, &to), vec![1.0, 3.0, 0.0, 4.0, 6.0]);
    }
}
