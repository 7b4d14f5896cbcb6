use super::*;
use crate::model::config::tests::pop;
use crate::model::{Baseline, InitialLaw};
use proptest::prelude::*;

fn grid(nt: usize, nx: usize, na: usize) -> StateGrid {
    StateGrid {
        horizon: 1.0,
        nt,
        x_min: -1.0,
        x_max: 3.0,
        nx,
        a_min: 0.0,
        a_max: 1.5,
        na,
    }
}

fn unit_params(sigma: f64) -> SubPopulationParams {
    SubPopulationParams {
        zeta: 1.0,
        gamma: 1.0,
        beta: 1.0,
        sigma,
        baseline: Baseline::Constant(0.5),
        pi: 1.0,
        lambda_weight: 1.0,
        initial_inventory: InitialLaw::PointMass(0.0),
    }
}

#[test]
fn linear_contract_has_constant_adjoints() {
    let g = grid(40, 41, 16);
    let p = pop(1.0, 2.0, 1.0, 0.7);
    let pen = PenaltySpec::Linear {
        slope: 0.7,
        intercept: 0.0,
    };
    let price = PricePath::constant(0.7, &g);
    let sol = solve_backward(0, &p, &pen, &price, &g, &SolverOptions::default()).unwrap();
    for n in 0..=g.nt {
        let tau = g.horizon - g.t(n);
        for l in 0..g.na {
            for j in 0..g.nx {
                let (_, yx, ya) = sol.at(n, j, l);
                assert!((yx + 0.7).abs() < 1e-8, "yx {yx} at {n},{j},{l}");
                assert!((ya + 0.7 * tau).abs() < 1e-6, "ya {ya} at {n},{j},{l}");
            }
        }
    }
    assert_eq!(sol.diagnostics.negative_control_nodes, 0);
}

#[test]
fn deterministic_value_matches_hand_computation() {
    // λ = 1, h = 0.5, σ = 0, unit costs, S = 1: running cost 2/3, X_T = 11/6.
    let g = grid(400, 81, 31);
    let p = unit_params(0.0);
    let pen = PenaltySpec::Linear {
        slope: 1.0,
        intercept: 0.0,
    };
    let price = PricePath::constant(1.0, &g);
    let sol = solve_backward(0, &p, &pen, &price, &g, &SolverOptions::default()).unwrap();
    let v = sol.interpolate(0.0, 0.0, 0.0).v;
    assert!((v + 7.0 / 6.0).abs() < 1e-2, "V0 = {v}");
}

#[test]
fn feedback_controls_examples() {
    let p = unit_params(0.1);
    let c = feedback_controls(-1.0, -0.5, 0.4, &p);
    assert_eq!(c.g, 1.0);
    assert!((c.gamma - 0.6).abs() < 1e-15);
    assert_eq!(c.alpha, 0.5);
    assert!(!c.is_negative());
    assert!(feedback_controls(0.2, 0.0, 0.0, &p).is_negative());
}

#[test]
fn interpolation_is_exact_at_nodes_and_linear_between() {
    let g = grid(8, 9, 4);
    let p = pop(1.0, 1.0, 1.0, 1.0);
    let pen = PenaltySpec::SoftplusHockey {
        rate: 1.0,
        requirement: 1.0,
        epsilon: 0.2,
        intercept: 0.0,
    };
    let price = PricePath::constant(0.5, &g);
    let sol = solve_backward(0, &p, &pen, &price, &g, &SolverOptions::default()).unwrap();
    for &(n, j, l) in &[(0, 0, 0), (3, 4, 2), (8, 8, 3), (5, 1, 1)] {
        let it = sol.interpolate(g.t(n), g.x(j), g.a(l));
        let (v, yx, ya) = sol.at(n, j, l);
        assert_eq!(it.v, v);
        assert_eq!(it.yx, yx);
        assert_eq!(it.ya, ya);
        assert!(!it.clamped);
    }
    let mid = sol.interpolate(g.t(2), 0.5 * (g.x(3) + g.x(4)), g.a(1));
    let expect = 0.5 * (sol.at(2, 3, 1).1 + sol.at(2, 4, 1).1);
    assert!((mid.yx - expect).abs() < 1e-14);
    assert!(sol.interpolate(0.0, 10.0, 0.0).clamped);
}

#[test]
fn coarse_capacity_grid_is_rejected() {
    let g = StateGrid {
        a_max: 0.05,
        na: 11,
        ..grid(4, 9, 11)
    };
    let p = unit_params(0.1);
    let pen = PenaltySpec::Linear {
        slope: 1.0,
        intercept: 0.0,
    };
    let price = PricePath::constant(1.0, &g);
    let err = solve_backward(0, &p, &pen, &price, &g, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, crate::Error::GridTooCoarse(_)));
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let g = grid(20, 41, 8);
    let p = pop(1.0, 2.0, 1.0, 1.0);
    let pen = PenaltySpec::SoftplusHockey {
        rate: 1.0,
        requirement: 1.0,
        epsilon: 0.2,
        intercept: 0.0,
    };
    let price = PricePath::constant(0.6, &g);
    let par = solve_backward(0, &p, &pen, &price, &g, &SolverOptions::default()).unwrap();
    let seq_opts = SolverOptions {
        exec: Exec::Sequential,
        ..SolverOptions::default()
    };
    let seq = solve_backward(0, &p, &pen, &price, &g, &seq_opts).unwrap();
    assert_eq!(par.v, seq.v);
    assert_eq!(par.yx, seq.yx);
}

fn propagator_check(scheme: TimeScheme, pen: PenaltySpec, price: f64, sigma: f64) -> f64 {
    let g = StateGrid {
        x_max: 4.0,
        nx: 201,
        ..grid(20, 41, 16)
    };
    let mut p = pop(1.0, 1.0, 1.0, 1.0);
    p.sigma = sigma;
    let opts = SolverOptions {
        scheme,
        ..SolverOptions::default()
    };
    let price = PricePath::constant(price, &g);
    let sol = solve_backward(0, &p, &pen, &price, &g, &opts).unwrap();
    let nx = g.nx;
    let mut worst: f64 = 0.0;
    for n in 0..g.nt {
        let y = StepPropagator::new(&sol, n)
            .unwrap()
            .apply(sol.slice_yx(n + 1));
        for l in 0..g.na {
            // the boundary rows are only approximate and their error decays
            // geometrically inward
            for j in nx / 4..3 * nx / 4 {
                let i = l * nx + j;
                worst = worst.max((y[i] - sol.slice_yx(n)[i]).abs());
            }
        }
    }
    worst
}

#[test]
fn propagator_reproduces_the_discrete_gradient() {
    let linear = PenaltySpec::Linear {
        slope: 1.0,
        intercept: 0.0,
    };
    let soft = softplus(1.0, 1.0, 0.2);
    for scheme in [TimeScheme::Implicit, TimeScheme::CrankNicolson] {
        assert!(propagator_check(scheme, linear, 1.0, 0.1) < 1e-10);
        let e = propagator_check(scheme, soft, 0.5, 0.3);
        assert!(e < 1e-9, "{scheme:?}: {e}");
    }
}

#[test]
fn transpose_is_the_adjoint() {
    let g = grid(6, 21, 6);
    let p = pop(1.0, 1.0, 1.0, 1.0);
    let price = PricePath::constant(0.5, &g);
    let sol = solve_backward(
        0,
        &p,
        &softplus(1.0, 1.0, 0.2),
        &price,
        &g,
        &SolverOptions::default(),
    )
    .unwrap();
    let prop = StepPropagator::new(&sol, 1).unwrap();
    let len = g.slice_len();
    let y: Vec<f64> = (0..len).map(|i| ((i * 37 % 11) as f64).sin()).collect();
    let m: Vec<f64> = (0..len).map(|i| ((i * 13 % 7) as f64).cos()).collect();
    let lhs: f64 = m.iter().zip(prop.apply(&y)).map(|(a, b)| a * b).sum();
    let rhs: f64 = prop
        .apply_transpose(&m)
        .iter()
        .zip(&y)
        .map(|(a, b)| a * b)
        .sum();
    assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    let ones = vec![1.0; len];
    let total: f64 = prop.apply_transpose(&m).iter().sum();
    let mass: f64 = m.iter().zip(prop.apply(&ones)).map(|(a, b)| a * b).sum();
    assert!((total - mass).abs() < 1e-12);
}

fn softplus(rate: f64, requirement: f64, epsilon: f64) -> PenaltySpec {
    PenaltySpec::SoftplusHockey {
        rate,
        requirement,
        epsilon,
        intercept: 0.0,
    }
}

fn wide_grid() -> StateGrid {
    StateGrid {
        x_max: 5.0,
        nx: 61,
        ..grid(20, 41, 8)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // Both properties are checked on a domain wide enough that the
    // extrapolated x-boundary rows stay out of reach of the dynamics.
    #[test]
    fn value_stays_convex_in_inventory(rate in 0.3f64..2.0, req in 0.5f64..1.5, eps in 0.1f64..0.5) {
        let g = wide_grid();
        let p = pop(1.0, 1.0, 1.0, 1.0);
        let price = PricePath::constant(0.5 * rate, &g);
        let sol = solve_backward(0, &p, &softplus(rate, req, eps), &price, &g, &SolverOptions::default()).unwrap();
        for n in 0..=g.nt {
            let v = sol.slice_v(n);
            for l in 0..g.na {
                for j in 4..g.nx - 4 {
                    let i = l * g.nx + j;
                    let d2 = v[i + 1] - 2.0 * v[i] + v[i - 1];
                    prop_assert!(d2 > -1e-9, "second difference {} at {},{},{}", d2, n, j, l);
                }
            }
        }
    }

    #[test]
    fn larger_penalty_rate_gives_larger_value(rate in 0.3f64..1.5, bump in 0.05f64..0.5) {
        let g = wide_grid();
        let p = pop(1.0, 1.0, 1.0, 1.0);
        let price = PricePath::constant(0.5, &g);
        let lo = solve_backward(0, &p, &softplus(rate, 1.0, 0.2), &price, &g, &SolverOptions::default()).unwrap();
        let hi = solve_backward(0, &p, &softplus(rate + bump, 1.0, 0.2), &price, &g, &SolverOptions::default()).unwrap();
        for (i, (a, b)) in lo.v.iter().zip(&hi.v).enumerate() {
            let j = i % g.nx;
            if !(4..g.nx - 4).contains(&j) {
                continue;
            }
            prop_assert!(b >= &(a - 1e-8), "node {} ({}, {}): {} < {}", i, i % g.nx, (i / g.nx) % g.na, b, a);
        }
    }
}
