use percolate_core::best_response::{n_bar, solve_value};
use percolate_core::equilibrium::{correspondence_monotonicity_violation, find_equilibria, pareto_rank, search_margin};
use percolate_core::interventions::{block_entry, evaluate_subsidy, find_subsidy_witness, Selection};
use percolate_core::model::{CostSpec, ModelParams, Policy};
use percolate_core::simulator::{estimate_value, SimConfig};
use percolate_core::stationary::solve_stationary;

fn scenario(eta: f64, rho: f64, c_lo: f64) -> ModelParams {
    ModelParams { eta, rho, c_lo, ..ModelParams::default() }.with_n_max(128).with_pi(&[(1, 0.6), (2, 0.3), (3, 0.1)])
}

#[test]
fn equilibria_exist_and_correspondence_is_monotone() {
    for eta in [0.5, 1.0, 2.0] {
        for rho in [0.3, 0.5, 0.8] {
            for c_lo in [0.0, 0.1] {
                let p = scenario(eta, rho, c_lo);
                let rep = find_equilibria(&p).unwrap();
                assert!(!rep.equilibria.is_empty());
                assert!(rep.n_bar <= n_bar(&p));
                assert_eq!(correspondence_monotonicity_violation(&rep.correspondence), None);
                assert!(rep.correspondence.iter().all(|e| e.hi <= rep.n_bar));
                if c_lo == 0.0 {
                    assert!(rep.triggers().contains(&0));
                }
                let order = pareto_rank(&rep).unwrap();
                assert_eq!(order, rep.pareto_order);
            }
        }
    }
}

#[test]
fn strict_search_margin_gives_dominant_search_equilibrium() {
    let p = ModelParams { cost: CostSpec::Linear { kappa: 0.02 }, ..scenario(1.0, 0.5, 0.0) };
    assert!(search_margin(&p).unwrap() > 0.0);
    let rep = find_equilibria(&p).unwrap();
    let best = rep.best();
    assert!(best.n >= 1);
    let none = rep.get(0).unwrap();
    for (a, b) in best.value.values.iter().zip(&none.value.values) {
        assert!(*a >= b - 1e-10);
    }
}

#[test]
fn equilibrium_value_matches_lifetime_sampling() {
    let p = ModelParams { c_lo: 0.1, cost: CostSpec::Linear { kappa: 0.05 }, ..scenario(1.0, 0.5, 0.1) };
    let rep = find_equilibria(&p).unwrap();
    let policy = Policy::trigger(rep.best().n, &p);
    let state = solve_stationary(&policy, &p).unwrap();
    let v = solve_value(&state, &p).unwrap().value.get(1);
    let cfg =
        SimConfig { population: 200_000, horizon: 1.0, seed: 4, record_grid: 1.0, y_realization: None, burn_in: 0.0 };
    let (mean, hw) = estimate_value(&policy, &p, &cfg, 1).unwrap();
    assert!((mean - v).abs() < 1.5 * hw, "{mean} ± {hw} vs {v}");
}

#[test]
fn subsidy_witness_selected_trigger_moves_up_with_delta() {
    let base = block_entry(&ModelParams { c_lo: 0.0, ..ModelParams::default().with_n_max(64) }, 2);
    let w = find_subsidy_witness(&base, 40).unwrap();
    let kappa = w.bisection.value;
    let mut last = 0;
    for frac in [0.0, 0.25, 0.5, 0.75] {
        let out = evaluate_subsidy(&w.params, frac * kappa, Selection::ParetoBest).unwrap();
        assert!(out.treated_trigger >= last);
        last = out.treated_trigger;
    }
}
