//! Closed-form references: the linear contract for any K and the Riccati
//! system for a single population with a quadratic penalty.

use rand::Rng;
use serde::Serialize;

use crate::hjb::FeedbackSolution;
use crate::model::{Baseline, MarketConfig, SubPopulationParams};
use crate::rng::{self, purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearPopulation {
    pub lambda: f64,
    /// Y^X ≡ −λ.
    pub yx: f64,
    pub g: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl LinearPopulation {
    /// Y^A(t) = −λ(T − t).
    pub fn ya(&self, t: f64, horizon: f64) -> f64 {
        -self.lambda * (horizon - t)
    }

    /// α(t) = λ(T − t)/β.
    pub fn alpha(&self, t: f64, horizon: f64) -> f64 {
        self.lambda * (horizon - t) / self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearContractSolution {
    pub horizon: f64,
    pub price: f64,
    pub populations: Vec<LinearPopulation>,
}

impl LinearContractSolution {
    /// Σ_k π_k Γ^k, zero up to rounding.
    pub fn clearing(&self, config: &MarketConfig) -> f64 {
        config
            .subpopulations
            .iter()
            .zip(&self.populations)
            .map(|(p, s)| p.pi * s.gamma)
            .sum()
    }
}

/// Equilibrium for C^k(x) = −λ^k x: S = Σ η_k λ_k / η, g = λ/ζ, Γ = (λ − S)/γ.
pub fn linear_contract_solution(config: &MarketConfig) -> LinearContractSolution {
    let lambdas: Vec<f64> = config
        .subpopulations
        .iter()
        .map(|p| p.lambda_weight)
        .collect();
    linear_contract_with(config, &lambdas)
}

/// Same as [`linear_contract_solution`] with explicit slopes.
pub fn linear_contract_with(config: &MarketConfig, lambdas: &[f64]) -> LinearContractSolution {
    let price = config.eta_weights().weighted_price(lambdas);
    let populations = config
        .subpopulations
        .iter()
        .zip(lambdas)
        .map(|(p, &lambda)| LinearPopulation {
            lambda,
            yx: -lambda,
            g: lambda / p.zeta,
            gamma: (lambda - price) / p.gamma,
            beta: p.beta,
        })
        .collect();
    LinearContractSolution {
        horizon: config.horizon,
        price,
        populations,
    }
}

/// Coefficients (p, q, r, s, u, w) of V = ½px² + qxa + ½ra² + sx + ua + w.
pub type Coefficients = [f64; 6];

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSolution {
    pub horizon: f64,
    pub curvature: f64,
    pub target: f64,
    pub price: f64,
    pub times: Vec<f64>,
    pub coefficients: Vec<Coefficients>,
    /// Time derivatives from the ODE right-hand side, for Hermite interpolation.
    pub derivatives: Vec<Coefficients>,
    pub mean_x: Vec<f64>,
    pub mean_a: Vec<f64>,
    /// Step-doubling estimate of the RK4 error on the coefficients.
    pub error_estimate: f64,
    #[serde(skip)]
    params: SubPopulationParams,
}

struct OdeParams {
    upsilon: f64,
    beta: f64,
    gamma: f64,
    sigma: f64,
    h: f64,
}

fn rhs(o: &OdeParams, price: f64, y: &Coefficients) -> Coefficients {
    let [p, q, r, s, u, _] = *y;
    let c = o.h - price / o.gamma;
    let (ups, b) = (o.upsilon, o.beta);
    [
        ups * p * p + q * q / b,
        -p + ups * p * q + q * r / b,
        -2.0 * q + ups * q * q + r * r / b,
        -c * p + ups * p * s + q * u / b,
        -c * q - s + ups * q * s + r * u / b,
        -c * s + 0.5 * ups * s * s + 0.5 * u * u / b + 0.5 * price * price / o.gamma
            - 0.5 * o.sigma * o.sigma * p,
    ]
}

fn axpy(y: &Coefficients, a: f64, k: &Coefficients) -> Coefficients {
    let mut out = *y;
    for (o, v) in out.iter_mut().zip(k) {
        *o += a * v;
    }
    out
}

/// Backward RK4 from the terminal expansion of ½P(x − R)²; returns values on
/// `steps + 1` nodes, index 0 at t = 0.
fn integrate_backward(
    o: &OdeParams,
    price: f64,
    terminal: Coefficients,
    horizon: f64,
    steps: usize,
) -> Vec<Coefficients> {
    let h = horizon / steps as f64;
    let mut out = vec![[0.0; 6]; steps + 1];
    out[steps] = terminal;
    let mut y = terminal;
    for i in (0..steps).rev() {
        // dy/dt = f(y); stepping from t to t − h.
        let k1 = rhs(o, price, &y);
        let k2 = rhs(o, price, &axpy(&y, -0.5 * h, &k1));
        let k3 = rhs(o, price, &axpy(&y, -0.5 * h, &k2));
        let k4 = rhs(o, price, &axpy(&y, -h, &k3));
        for j in 0..6 {
            y[j] -= h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        out[i] = y;
    }
    out
}

pub const RK4_TOLERANCE: f64 = 1e-9;

/// Solves the K = 1 quadratic-penalty problem with the self-consistent
/// constant price S = −(p(0)E[ξ] + s(0)).
pub fn riccati_solve(
    params: &SubPopulationParams,
    curvature: f64,
    target: f64,
    horizon: f64,
    steps: usize,
) -> Result<RiccatiSolution> {
    let h = match params.baseline {
        Baseline::Constant(h) => h,
        Baseline::Piecewise(_) => {
            return Err(Error::Unsupported(
                "Riccati oracle needs a constant baseline rate".into(),
            ))
        }
    };
    if steps < 2 || steps % 2 != 0 {
        return Err(Error::Unsupported(
            "Riccati steps must be even and ≥ 2".into(),
        ));
    }
    let o = OdeParams {
        upsilon: params.upsilon(),
        beta: params.beta,
        gamma: params.gamma,
        sigma: params.sigma,
        h,
    };
    let terminal = [
        curvature,
        0.0,
        0.0,
        -curvature * target,
        0.0,
        0.5 * curvature * target * target,
    ];
    let m0 = params.initial_inventory.mean();

    // s(0) is affine in S; two solves pin the fixed point.
    let s_at = |price: f64| integrate_backward(&o, price, terminal, horizon, steps)[0][3];
    let s0 = s_at(0.0);
    let s1 = s_at(1.0) - s0;
    let p0 = integrate_backward(&o, 0.0, terminal, horizon, steps)[0][0];
    let price = -(p0 * m0 + s0) / (1.0 + s1);

    let coefficients = integrate_backward(&o, price, terminal, horizon, steps);
    let coarse = integrate_backward(&o, price, terminal, horizon, steps / 2);
    let error_estimate = coarse
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.iter()
                .zip(&coefficients[2 * i])
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        })
        .fold(0.0, f64::max)
        / 15.0;
    if error_estimate > RK4_TOLERANCE {
        return Err(Error::StepTooLarge {
            estimate: error_estimate,
            tolerance: RK4_TOLERANCE,
        });
    }
    let derivatives: Vec<Coefficients> = coefficients.iter().map(|y| rhs(&o, price, y)).collect();
    let dt = horizon / steps as f64;
    let times = (0..=steps).map(|i| i as f64 * dt).collect();

    let mut sol = RiccatiSolution {
        horizon,
        curvature,
        target,
        price,
        times,
        coefficients,
        derivatives,
        mean_x: vec![0.0; steps + 1],
        mean_a: vec![0.0; steps + 1],
        error_estimate,
        params: params.clone(),
    };

    // Mean state: dm_x = h + m_a + S/ζ, dm_a = −(q m_x + r m_a + u)/β.
    let drift = |t: f64, m: [f64; 2]| -> [f64; 2] {
        let c = sol.coefficients_at(t);
        [
            h + m[1] + price / params.zeta,
            -(c[1] * m[0] + c[2] * m[1] + c[4]) / params.beta,
        ]
    };
    let mut m = [m0, 0.0];
    let mut mx = vec![m0];
    let mut ma = vec![0.0];
    for i in 0..steps {
        let t = i as f64 * dt;
        let k1 = drift(t, m);
        let k2 = drift(
            t + 0.5 * dt,
            [m[0] + 0.5 * dt * k1[0], m[1] + 0.5 * dt * k1[1]],
        );
        let k3 = drift(
            t + 0.5 * dt,
            [m[0] + 0.5 * dt * k2[0], m[1] + 0.5 * dt * k2[1]],
        );
        let k4 = drift(t + dt, [m[0] + dt * k3[0], m[1] + dt * k3[1]]);
        for j in 0..2 {
            m[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        mx.push(m[0]);
        ma.push(m[1]);
    }
    sol.mean_x = mx;
    sol.mean_a = ma;
    Ok(sol)
}

impl RiccatiSolution {
    fn segment(&self, t: f64) -> (usize, f64, f64) {
        let n = self.times.len() - 1;
        let dt = self.horizon / n as f64;
        let pos = (t / dt).clamp(0.0, n as f64);
        let i = (pos.floor() as usize).min(n - 1);
        (i, pos - i as f64, dt)
    }

    /// Cubic Hermite interpolation of the coefficients.
    pub fn coefficients_at(&self, t: f64) -> Coefficients {
        let (i, s, dt) = self.segment(t);
        let (h00, h10, h01, h11) = (
            2.0 * s.powi(3) - 3.0 * s * s + 1.0,
            s.powi(3) - 2.0 * s * s + s,
            -2.0 * s.powi(3) + 3.0 * s * s,
            s.powi(3) - s * s,
        );
        let (a, b) = (&self.coefficients[i], &self.coefficients[i + 1]);
        let (da, db) = (&self.derivatives[i], &self.derivatives[i + 1]);
        std::array::from_fn(|j| h00 * a[j] + h10 * dt * da[j] + h01 * b[j] + h11 * dt * db[j])
    }

    /// Time derivative of the Hermite interpolant.
    pub fn derivatives_at(&self, t: f64) -> Coefficients {
        let (i, s, dt) = self.segment(t);
        let (d00, d10, d01, d11) = (
            (6.0 * s * s - 6.0 * s) / dt,
            3.0 * s * s - 4.0 * s + 1.0,
            (-6.0 * s * s + 6.0 * s) / dt,
            3.0 * s * s - 2.0 * s,
        );
        let (a, b) = (&self.coefficients[i], &self.coefficients[i + 1]);
        let (da, db) = (&self.derivatives[i], &self.derivatives[i + 1]);
        std::array::from_fn(|j| d00 * a[j] + d10 * da[j] + d01 * b[j] + d11 * db[j])
    }

    pub fn value(&self, t: f64, x: f64, a: f64) -> f64 {
        let [p, q, r, s, u, w] = self.coefficients_at(t);
        0.5 * p * x * x + q * x * a + 0.5 * r * a * a + s * x + u * a + w
    }

    /// Y^X = ∂_x V = px + qa + s.
    pub fn yx(&self, t: f64, x: f64, a: f64) -> f64 {
        let c = self.coefficients_at(t);
        c[0] * x + c[1] * a + c[3]
    }

    /// Y^A = ∂_a V = qx + ra + u.
    pub fn ya(&self, t: f64, x: f64, a: f64) -> f64 {
        let c = self.coefficients_at(t);
        c[1] * x + c[2] * a + c[4]
    }

    /// −E[Y^X_t] along the mean trajectory, which equals the price.
    pub fn implied_price(&self, i: usize) -> f64 {
        let c = &self.coefficients[i];
        -(c[0] * self.mean_x[i] + c[1] * self.mean_a[i] + c[3])
    }

    /// Adds `delta` to the stored p(t) values only (a deliberately broken solution).
    pub fn perturb_p(&mut self, delta: f64) {
        for c in &mut self.coefficients {
            c[0] += delta;
        }
    }

    /// HJB residual at (t, x, a) using the interpolated coefficients.
    pub fn hjb_residual(&self, t: f64, x: f64, a: f64) -> f64 {
        let c = self.coefficients_at(t);
        let d = self.derivatives_at(t);
        let pr = &self.params;
        let h = match pr.baseline {
            Baseline::Constant(h) => h,
            Baseline::Piecewise(_) => unreachable!(),
        };
        let s = self.price;
        let vt =
            0.5 * d[0] * x * x + d[1] * x * a + 0.5 * d[2] * a * a + d[3] * x + d[4] * a + d[5];
        let vx = c[0] * x + c[1] * a + c[3];
        let va = c[1] * x + c[2] * a + c[4];
        let vxx = c[0];
        vt + (h + a) * vx
            - vx * vx / (2.0 * pr.zeta)
            - (vx + s).powi(2) / (2.0 * pr.gamma)
            - va * va / (2.0 * pr.beta)
            + 0.5 * pr.sigma * pr.sigma * vxx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub max_residual: f64,
    pub points: usize,
    pub empty: bool,
}

/// Maximum |HJB residual| at `n_points` uniform points of
/// (0, T) × (R − 2, R + 2) × (0, 1).
pub fn hjb_residual_check(sol: &RiccatiSolution, n_points: usize, seed: u64) -> ResidualReport {
    let mut rng = rng::stream(seed, rng::stream_id(purpose::PRINCIPAL, 0xfe, 0));
    let mut max_residual: f64 = 0.0;
    for _ in 0..n_points {
        let t = rng.random::<f64>() * sol.horizon;
        let x = sol.target - 2.0 + 4.0 * rng.random::<f64>();
        let a = rng.random::<f64>();
        max_residual = max_residual.max(sol.hjb_residual(t, x, a).abs());
    }
    ResidualReport {
        max_residual,
        points: n_points,
        empty: n_points == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OraclePoint {
    pub t: f64,
    pub x: f64,
    pub a: f64,
    pub oracle_yx: f64,
    pub solver_yx: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleComparison {
    pub points: Vec<OraclePoint>,
    pub max_relative_gap: f64,
    pub oracle_price: f64,
    pub solver_price: f64,
}

/// (0, E[ξ], 0) followed by the oracle's mean state at T/4, T/2 and 3T/4.
pub fn oracle_points(oracle: &RiccatiSolution) -> Vec<(f64, f64, f64)> {
    let n = oracle.times.len() - 1;
    [0, n / 4, n / 2, 3 * n / 4]
        .iter()
        .map(|&i| (oracle.times[i], oracle.mean_x[i], oracle.mean_a[i]))
        .collect()
}

/// Relative Y^X gap between the grid solution and the oracle at `points`.
pub fn compare_with_solver(
    oracle: &RiccatiSolution,
    sol: &FeedbackSolution,
    points: &[(f64, f64, f64)],
) -> OracleComparison {
    let points: Vec<OraclePoint> = points
        .iter()
        .map(|&(t, x, a)| {
            let oracle_yx = oracle.yx(t, x, a);
            let solver_yx = sol.interpolate(t, x, a).yx;
            OraclePoint {
                t,
                x,
                a,
                oracle_yx,
                solver_yx,
                relative_gap: (solver_yx - oracle_yx).abs() / oracle_yx.abs(),
            }
        })
        .collect();
    OracleComparison {
        max_relative_gap: points.iter().fold(0.0, |m, p| m.max(p.relative_gap)),
        points,
        oracle_price: oracle.price,
        solver_price: sol.price.at(0),
    }
}
