use proptest::prelude::*;

use survode::diagnostics::ks_two_sample;
use survode::model::{eval_predictors, InitialHazard, ModelSpec};
use survode::ode::SolverOptions;
use survode::simulate::{apply_censoring, simulate_iid, CumhazGrid, SCENARIO_H0, SCENARIO_Q0};

fn hazard_response() -> ModelSpec {
    ModelSpec::hazard_response(vec![vec![], vec![], vec![], vec![]], SCENARIO_H0, SCENARIO_Q0, 10.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inverse_lands_in_the_right_cell(
        lambda in 0.2f64..3.0, kappa in 0.1f64..2.0, h0 in 0.01f64..0.5, u in 1e-6f64..1.0,
    ) {
        let spec = ModelSpec::logistic(vec![vec![], vec![]], InitialHazard::Fixed(h0), 10.0);
        let eta = [lambda.ln(), kappa.ln()];
        let params = eval_predictors(&spec, &eta, &[]).unwrap().params;
        let grid = CumhazGrid::from_params(&params, 10.0, 0.01, &SolverOptions::default()).unwrap();
        let target = -u.ln();
        let s = grid.invert(target);
        let (t, h) = (grid.times(), grid.cumhaz());
        if s.beyond_horizon {
            prop_assert!(target > h[h.len() - 1]);
        } else {
            let j = t.partition_point(|&x| x < s.time).clamp(1, t.len() - 1);
            let variation = h[j] - h[j - 1];
            let (_, at) = params.hazard_cumhaz(s.time, &SolverOptions::default()).unwrap();
            prop_assert!((at - target).abs() <= variation + 1e-9, "{at} vs {target}, cell {variation}");
        }
    }

    #[test]
    fn censoring_never_lengthens_and_keeps_order(
        times in prop::collection::vec(1e-3f64..20.0, 1..200), horizon in 0.1f64..15.0,
    ) {
        let (cens, status) = apply_censoring(&times, horizon);
        for i in 0..times.len() {
            prop_assert!(cens[i] <= times[i]);
            prop_assert_eq!(status[i], times[i] <= horizon);
            for j in 0..times.len() {
                if times[i] <= times[j] {
                    prop_assert!(cens[i] <= cens[j]);
                }
            }
        }
    }
}

#[test]
fn finer_grid_barely_moves_the_distribution() {
    let spec = hazard_response();
    let eta = [1.5f64, 0.0, -0.5, 0.5];
    let coarse: Vec<f64> = simulate_iid(&spec, &eta, 10_000, 10.0, 0.01, 42).unwrap().iter().map(|s| s.time).collect();
    let fine: Vec<f64> = simulate_iid(&spec, &eta, 10_000, 10.0, 0.001, 42).unwrap().iter().map(|s| s.time).collect();
    let d = ks_two_sample(&coarse, &fine);
    assert!(d < 0.01, "KS = {d}");
}

#[test]
fn same_seed_same_times() {
    let spec = hazard_response();
    let eta = [1.5f64, 0.0, -0.5, 0.5];
    let a = simulate_iid(&spec, &eta, 500, 10.0, 0.01, 7).unwrap();
    let b = simulate_iid(&spec, &eta, 500, 10.0, 0.01, 7).unwrap();
    assert_eq!(a, b);
}
