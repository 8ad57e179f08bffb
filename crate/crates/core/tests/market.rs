use percolate_core::dynamics::{integrate, mass_loss_check};
use percolate_core::model::{CostSpec, ModelParams, Policy, PrecisionMeasure};
use percolate_core::stationary::{fosd_compare, mgf_oracle, solve_stationary};
use proptest::prelude::*;

fn scenario(eta: f64, rho: f64, c_lo: f64, n_max: usize) -> ModelParams {
    ModelParams { eta, rho, c_lo, ..ModelParams::default() }.with_n_max(n_max).with_pi(&[(1, 0.6), (2, 0.3), (3, 0.1)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stationary_balance_holds(
        eta in 0.3f64..3.0,
        rho in 0.1f64..0.9,
        c_lo in 0.0f64..0.3,
        trigger in 0usize..8,
        w in proptest::collection::vec(0.05f64..1.0, 3),
    ) {
        let total: f64 = w.iter().sum();
        let p = ModelParams { eta, rho, c_lo, ..ModelParams::default() }
            .with_n_max(128)
            .with_pi(&[(1, w[0] / total), (2, w[1] / total), (4, w[2] / total)]);
        let st = solve_stationary(&Policy::trigger(trigger, &p), &p).unwrap();
        prop_assert!(st.residual(&p) < 1e-10);
        prop_assert!((st.mu.total_mass() - 1.0).abs() < 1e-8);
        prop_assert!(st.mu.weights.iter().all(|&x| x >= 0.0));
        let weighted_sum: f64 = st.weighted().weights.iter().sum();
        prop_assert!((weighted_sum - st.c_bar).abs() < 1e-10);
    }

    #[test]
    fn higher_trigger_dominates(eta in 0.5f64..2.0, rho in 0.2f64..0.8, m in 0usize..6, gap in 1usize..4) {
        let p = scenario(eta, rho, 0.1, 128);
        let lo = solve_stationary(&Policy::trigger(m, &p), &p).unwrap().weighted();
        let hi = solve_stationary(&Policy::trigger(m + gap, &p), &p).unwrap().weighted();
        prop_assert!(fosd_compare(&hi, &lo).unwrap().first_dominates());
    }
}

#[test]
fn ode_converges_to_stationary_measure() {
    let p = scenario(2.0, 0.5, 0.1, 128);
    for n in [1, 3, 6] {
        let policy = Policy::trigger(n, &p);
        assert!(mass_loss_check(&policy, &p, 10.0).unwrap().condition_holds);
        let target = solve_stationary(&policy, &p).unwrap().mu;
        for start in [p.pi.clone(), PrecisionMeasure::point_mass(5, p.n_max)] {
            let traj = integrate(&start, &policy, &p, 50.0 / p.eta, 5.0).unwrap();
            assert!(traj.last().l1_distance(&target) < 1e-6, "trigger {n}");
            assert!(traj.mass_series.iter().all(|m| (m - 1.0).abs() < 1e-6));
        }
    }
}

#[test]
fn mass_escapes_only_when_condition_fails() {
    let p = ModelParams { eta: 0.2, c_lo: 0.5, ..scenario(0.2, 0.5, 0.5, 256) };
    let report = mass_loss_check(&Policy::constant(1.0, &p).unwrap(), &p, 40.0).unwrap();
    assert!(!report.condition_holds);
    let (found, predicted) = (report.final_mass.unwrap(), report.predicted_mass.unwrap());
    assert!(found < 0.999);
    assert!((found - predicted).abs() < 1e-6, "{found} vs {predicted}");
}

#[test]
fn generating_function_matches_series() {
    for eta in [0.5, 1.0, 2.0] {
        let p = scenario(eta, 0.5, 0.1, 256);
        for n in 1..=6 {
            let st = solve_stationary(&Policy::trigger(n, &p), &p).unwrap();
            for point in mgf_oracle(&st, &p, &[0.1, 0.3, 0.5, 0.7]).unwrap() {
                let closed = point.closed_form.expect("flat tail with positive effort");
                assert!((closed - point.series).abs() < 1e-9, "eta {eta}, trigger {n}, x {}", point.x);
            }
        }
    }
}

#[test]
fn convex_cost_scenario_solves() {
    let p = ModelParams {
        cost: CostSpec::TabulatedConvex { points: vec![(0.0, 0.0), (0.5, 0.02), (1.0, 0.08)] },
        ..scenario(1.0, 0.5, 0.0, 96)
    };
    let st = solve_stationary(&Policy::trigger(3, &p), &p).unwrap();
    assert!(st.residual(&p) < 1e-10);
}
