use proptest::prelude::*;

use survode::inference::{find_map, OptimOptions};
use survode::likelihood::{
    log_likelihood, GramCache, LikelihoodOptions, Posterior, PriorSpec, SurvivalDataset,
};
use survode::ode::Tolerance;
use survode::model::{eval_predictors, Family, InitialHazard, ModelSpec};
use survode::simulate::{generate_scenario, Censoring, ScenarioConfig};

fn scenario(n: usize, seed: u64) -> (SurvivalDataset, ModelSpec, Vec<f64>) {
    let cfg = ScenarioConfig::new(n, Censoring::Horizon(6.0), seed);
    let sc = generate_scenario(&cfg).unwrap();
    (sc.data, cfg.spec(6.0), cfg.truth)
}

#[test]
fn thread_count_does_not_change_bits() {
    let (data, spec, truth) = scenario(500, 3);
    let bits: Vec<u64> = [1, 2, 8]
        .iter()
        .map(|&n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            pool.install(|| log_likelihood(&data, &spec, &truth, &LikelihoodOptions::default()).unwrap())
                .to_bits()
        })
        .collect();
    assert!(bits.iter().all(|&b| b == bits[0]), "{bits:x?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn censoring_a_row_removes_its_log_hazard(row in 0usize..200, seed in 0u64..1000) {
        let (data, spec, truth) = scenario(200, seed);
        prop_assume!(data.status()[row]);
        let mut status = data.status().to_vec();
        status[row] = false;
        let flipped = SurvivalDataset::new(
            data.times().to_vec(),
            status,
            (0..data.n()).flat_map(|i| data.row(i).to_vec()).collect(),
            data.column_names().to_vec(),
            data.max_time(),
        )
        .unwrap();
        let opts = LikelihoodOptions::default();
        let before = log_likelihood(&data, &spec, &truth, &opts).unwrap();
        let after = log_likelihood(&flipped, &spec, &truth, &opts).unwrap();
        let params = eval_predictors(&spec, &truth, data.row(row)).unwrap().params;
        let (h, _) = params.hazard_cumhaz(data.times()[row], &opts.solver).unwrap();
        prop_assert!((after - before + h.ln()).abs() < 1e-9 * before.abs().max(1.0));
    }

    #[test]
    fn logistic_closed_form_equals_solver_path(
        eta in prop::collection::vec(-1.5f64..1.5, 5),
        seed in 0u64..1000,
    ) {
        let (data, _, _) = scenario(150, seed);
        let spec = ModelSpec::logistic(vec![vec![0], vec![2]], InitialHazard::Free, 6.0);
        let closed = log_likelihood(&data, &spec, &eta, &LikelihoodOptions::default()).unwrap();
        let mut numeric = LikelihoodOptions { force_numeric: true, ..LikelihoodOptions::default() };
        numeric.solver.tol = Tolerance::new(1e-11, 1e-13);
        let solved = log_likelihood(&data, &spec, &eta, &numeric).unwrap();
        prop_assert!((closed - solved).abs() < 1e-6, "{closed} vs {solved}");
    }
}

#[test]
fn exponential_map_matches_events_over_exposure() {
    let (data, _, _) = scenario(2000, 17);
    let spec = ModelSpec::logistic(vec![vec![], vec![]], InitialHazard::Kappa, 6.0);
    let priors = PriorSpec::normal(Family::Logistic, 1e4);
    let cache = GramCache::new();
    let post = Posterior::new(&data, spec, priors, LikelihoodOptions::default(), &cache).unwrap();
    let fit = find_map(&post, &[0.0, 0.0], &OptimOptions::default()).unwrap();
    let mle = data.n_events() as f64 / data.times().iter().sum::<f64>();
    assert!((fit.map[1].exp() - mle).abs() < 1e-4, "{} vs {mle}", fit.map[1].exp());
}
