use super::*;
use crate::model::config::tests::pop;
use crate::model::{Baseline, InitialLaw, SubPopulationParams};

pub(crate) fn reference_pops() -> Vec<SubPopulationParams> {
    let mut a = pop(1.0, 1.0, 0.5, 1.0);
    let mut b = pop(2.0, 2.0, 0.5, 0.5);
    for p in [&mut a, &mut b] {
        p.sigma = 0.2;
        p.baseline = Baseline::Constant(0.5);
        p.initial_inventory = InitialLaw::Normal { mean: 0.0, sd: 0.1 };
    }
    vec![a, b]
}

pub(crate) fn reference_config() -> MarketConfig {
    MarketConfig {
        horizon: 1.0,
        time_steps: 50,
        x_min: -1.0,
        x_max: 3.5,
        nx: 451,
        a_min: 0.0,
        a_max: 0.75,
        na: 16,
        subpopulations: reference_pops(),
        reservation_cost: 0.0,
        mc_paths: 2000,
        rng_seed: 11,
    }
}

pub(crate) fn linear_penalties(config: &MarketConfig) -> Vec<PenaltySpec> {
    config
        .subpopulations
        .iter()
        .map(|p| PenaltySpec::Linear {
            slope: p.lambda_weight,
            intercept: 0.0,
        })
        .collect()
}

pub(crate) fn softplus_penalties() -> Vec<PenaltySpec> {
    vec![
        PenaltySpec::SoftplusHockey {
            rate: 1.0,
            requirement: 1.0,
            epsilon: 0.2,
            intercept: 0.0,
        };
        2
    ]
}

fn flows_with(mean_yx: &[f64]) -> MeanFieldFlows {
    MeanFieldFlows {
        times: vec![0.0],
        per_k: mean_yx
            .iter()
            .map(|&y| FlowSeries {
                mean_yx: vec![y],
                ..FlowSeries::with_len(1)
            })
            .collect(),
    }
}

#[test]
fn update_price_examples() {
    let w = EtaWeights {
        eta_k: vec![0.5, 0.25],
        eta: 0.75,
        upsilon_k: vec![2.0, 1.0],
    };
    let s = update_price(&flows_with(&[-1.0, -0.5]), &w);
    assert!((s.0[0] - 0.625 / 0.75).abs() < 1e-15);
    assert_eq!(update_price(&flows_with(&[0.0, 0.0]), &w).0[0], 0.0);
    let one = EtaWeights {
        eta_k: vec![1.0],
        eta: 1.0,
        upsilon_k: vec![2.0],
    };
    assert_eq!(update_price(&flows_with(&[-0.7]), &one).0[0], 0.7);
}

#[test]
fn linear_contracts_converge_immediately() {
    let c = reference_config();
    let eq = solve_equilibrium(&c, &linear_penalties(&c), &EquilibriumOptions::default()).unwrap();
    assert!(eq.iterations <= 2);
    for s in &eq.price.0 {
        assert!((s - 5.0 / 6.0).abs() < 1e-6);
    }
    for n in 0..=c.time_steps {
        assert!((eq.flows.per_k[0].mean_gamma[n] - 1.0 / 6.0).abs() < 1e-6);
        assert!((eq.flows.per_k[1].mean_gamma[n] + 1.0 / 6.0).abs() < 1e-6);
        assert!(eq.clearing[n].abs() < 1e-9);
        assert!(eq.flows.per_k[0].se_yx[n] == 0.0);
    }
}

#[test]
fn initial_moments_match_the_law() {
    let c = reference_config();
    let eq = solve_equilibrium(&c, &linear_penalties(&c), &EquilibriumOptions::default()).unwrap();
    for f in &eq.flows.per_k {
        assert_eq!(f.mean_a[0], 0.0);
        assert_eq!(f.var_a[0], 0.0);
        assert!(f.mean_x[0].abs() < 1e-12);
        assert!((f.var_x[0] - 0.01).abs() < 1e-6);
    }
}

#[test]
fn price_perturbation_moves_clearing_by_eta() {
    let c = reference_config();
    let opts = EquilibriumOptions::default();
    let price = PricePath::constant(5.0 / 6.0 + 0.1, &c.grid());
    let fb = solve_feedbacks(&c, &linear_penalties(&c), &price, &opts).unwrap();
    let flows = forward_mean_field(&fb, &c, ForwardMethod::FokkerPlanck, opts.exec).unwrap();
    for r in clearing_profile(&flows, &c) {
        assert!((r + 0.075).abs() < 1e-9, "{r}");
    }
}

#[test]
fn deterministic_paths_have_no_spread() {
    let mut c = reference_config();
    for p in &mut c.subpopulations {
        p.sigma = 0.0;
        p.initial_inventory = InitialLaw::PointMass(0.2);
    }
    let opts = EquilibriumOptions::default();
    let price = PricePath::constant(5.0 / 6.0, &c.grid());
    let fb = solve_feedbacks(&c, &linear_penalties(&c), &price, &opts).unwrap();
    let flows = forward_monte_carlo(&fb, &c, 50, 3, opts.exec);
    for f in &flows.per_k {
        assert!(f.var_x.iter().all(|v| *v < 1e-12));
        assert!(f.var_a.iter().all(|v| *v < 1e-12));
    }
}

#[test]
fn softplus_equilibrium_has_constant_price_and_clears() {
    let c = reference_config();
    let eq = solve_equilibrium(&c, &softplus_penalties(), &EquilibriumOptions::default()).unwrap();
    let dev = eq.price.max_deviation_from_start();
    assert!(dev < 1e-5, "price deviation {dev}");
    assert!(eq.max_clearing_residual() < 1e-5);
    for w in eq.history[1..].windows(2) {
        assert!(w[1] < w[0], "history {:?}", eq.history);
    }
    assert!(eq.flows.escaped().is_empty());
}

#[test]
fn monte_carlo_agrees_with_grid_pass() {
    let c = reference_config();
    let opts = EquilibriumOptions::default();
    let price = PricePath::constant(0.6, &c.grid());
    let fb = solve_feedbacks(&c, &softplus_penalties(), &price, &opts).unwrap();
    let grid_flows = forward_fokker_planck(&fb, &c, opts.exec).unwrap();
    let mc = forward_monte_carlo(&fb, &c, 4000, 5, opts.exec);
    // Euler paths drift away from the grid martingale at O(Δt).
    for k in 0..2 {
        for n in 0..=c.time_steps {
            let d = (mc.per_k[k].mean_yx[n] - grid_flows.per_k[k].mean_yx[n]).abs();
            let allowed = 4.0 * mc.per_k[k].se_yx[n] + 0.5 * c.grid().t(n) * c.grid().dt();
            assert!(d < allowed, "k {k} n {n}: {d}");
        }
        let dx =
            (mc.per_k[k].mean_x[c.time_steps] - grid_flows.per_k[k].mean_x[c.time_steps]).abs();
        assert!(dx < 0.05);
    }
}

#[test]
fn monte_carlo_is_independent_of_execution_policy() {
    let c = reference_config();
    let opts = EquilibriumOptions::default();
    let price = PricePath::constant(0.6, &c.grid());
    let fb = solve_feedbacks(&c, &softplus_penalties(), &price, &opts).unwrap();
    let a = forward_monte_carlo(&fb, &c, 700, 9, Exec::Parallel);
    let b = forward_monte_carlo(&fb, &c, 700, 9, Exec::Sequential);
    assert_eq!(a, b);
}

#[test]
fn adjoints_have_the_expected_drift() {
    let c = reference_config();
    let eq = solve_equilibrium(&c, &softplus_penalties(), &EquilibriumOptions::default()).unwrap();
    for k in 0..2 {
        let r = adjoint_drift_check(
            &eq.feedbacks[k],
            &c.subpopulations[k].initial_inventory,
            20000,
            3,
            Exec::Parallel,
        );
        assert!(
            r.fraction_within(3.0) >= 0.95,
            "{:?}",
            r.fraction_within(3.0)
        );
    }
}
