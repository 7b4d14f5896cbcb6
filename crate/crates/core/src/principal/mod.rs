//! The regulator's layer: J^P, closed-form adjoints, first-order conditions,
//! the reservation constraint and the contract search.
//!
//! The principal's adjoints solve in closed form,
//!
//! ```text
//! K^X_k(t) = −π_k M_t λ^k,  K^V_k(t) = −π_k M_t,  K^A_k(t) = −π_k M_t λ^k (T − t),  L ≡ 0,
//! ```
//!
//! with M_t = E_t[U′_P(Σ_k π_k(−C^k(X_T^k) − λ^k X_T^k))].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::exec::{self, Exec};
use crate::mfg::{solve_equilibrium, EquilibriumOptions, MfgEquilibrium};
use crate::model::{admissibility_check, MarketConfig, PenaltySpec, UtilitySpec};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::population::{simulate_agent, Perturbation};
use crate::rng::{self, purpose};
use crate::stats;
use crate::{Error, Result};

/// Adjoint and state values of one representative path on the time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub yx: Vec<f64>,
    pub ya: Vec<f64>,
}

/// Independent representative agents, one per sub-population per sample.
#[derive(Debug, Clone)]
pub struct RepresentativeSample {
    pub paths: usize,
    pub seed: u64,
    /// X_T, indexed `[k][i]`.
    pub terminal: Vec<Vec<f64>>,
    /// Σ_k π_k(−C^k(X_T^k) − λ^k X_T^k) per sample.
    pub argument: Vec<f64>,
    /// Full tracks, indexed `[k][i]`, when requested.
    pub tracks: Option<Vec<Vec<Track>>>,
}

pub fn sample_representatives(
    eq: &MfgEquilibrium,
    contracts: &[PenaltySpec],
    config: &MarketConfig,
    paths: usize,
    seed: u64,
    keep_tracks: bool,
    exec: Exec,
) -> RepresentativeSample {
    let per_k: Vec<Vec<(f64, Option<Track>)>> = (0..config.k())
        .map(|k| {
            let p = &config.subpopulations[k];
            exec::map_range(exec, paths, |i| {
                let mut r = rng::stream(seed, rng::stream_id(purpose::PRINCIPAL, k, i));
                let path = simulate_agent(
                    &eq.feedbacks[k],
                    &p.initial_inventory,
                    &mut r,
                    &Perturbation::default(),
                );
                let xt = *path.x.last().unwrap();
                let track = keep_tracks.then(|| Track {
                    yx: path.g.iter().map(|g| -p.zeta * g).collect(),
                    ya: path.alpha.iter().map(|a| -p.beta * a).collect(),
                    x: path.x,
                    a: path.a,
                });
                (xt, track)
            })
        })
        .collect();
    let terminal: Vec<Vec<f64>> = per_k
        .iter()
        .map(|v| v.iter().map(|(x, _)| *x).collect())
        .collect();
    let argument = (0..paths)
        .map(|i| {
            config
                .subpopulations
                .iter()
                .zip(contracts)
                .zip(&terminal)
                .map(|((p, c), xs)| p.pi * (-c.value(xs[i]) - p.lambda_weight * xs[i]))
                .sum()
        })
        .collect();
    let tracks = keep_tracks.then(|| {
        per_k
            .into_iter()
            .map(|v| v.into_iter().map(|(_, t)| t.unwrap()).collect())
            .collect()
    });
    RepresentativeSample {
        paths,
        seed,
        terminal,
        argument,
        tracks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// J^P = E[U_P(Σ_k π_k(−C^k(X_T^k) − λ^k X_T^k))] by Monte Carlo.
pub fn principal_objective(sample: &RepresentativeSample, utility: &UtilitySpec) -> Estimate {
    let u: Vec<f64> = sample.argument.iter().map(|x| utility.value(*x)).collect();
    let (value, se) = stats::mean_se(&u);
    Estimate { value, se }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointState {
    pub times: Vec<f64>,
    /// E[M_t]; at t = 0 the plain mean of U′.
    pub m: Vec<f64>,
    /// Standard error of `m[0]`.
    pub m_se: f64,
    /// Cross-sectional standard deviation of the regressed M_t (zero when no
    /// tracks are available).
    pub m_spread: Vec<f64>,
    /// `[k][n]`.
    pub kx: Vec<Vec<f64>>,
    pub kv: Vec<Vec<f64>>,
    pub ka: Vec<Vec<f64>>,
    /// The martingale part L of the adjoint BSDE vanishes identically.
    pub l_zero: bool,
}

/// Regression of U′ on (1, X^k, (X^k)², A^k)_k at each time step, returning
/// the mean and standard deviation of the fitted values.
fn regress_m(slopes: &[f64], tracks: &[Vec<Track>], n: usize) -> (f64, f64) {
    let samples = slopes.len();
    let k = tracks.len();
    let cols = 1 + 3 * k;
    let mut a = DMatrix::<f64>::zeros(samples, cols);
    for i in 0..samples {
        a[(i, 0)] = 1.0;
        for (kk, tk) in tracks.iter().enumerate() {
            let x = tk[i].x[n];
            a[(i, 1 + 3 * kk)] = x;
            a[(i, 2 + 3 * kk)] = x * x;
            a[(i, 3 + 3 * kk)] = tk[i].a[n];
        }
    }
    let b = DVector::from_column_slice(slopes);
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .expect("thin SVD computes both factors");
    let fitted: Vec<f64> = (a * coef).iter().copied().collect();
    let (mean, var) = stats::mean_var(&fitted);
    (mean, var.sqrt())
}

/// Closed-form K^X, K^V, K^A with M from the sample.
pub fn adjoint_closed_form(
    sample: &RepresentativeSample,
    utility: &UtilitySpec,
    config: &MarketConfig,
) -> AdjointState {
    let grid = config.grid();
    let times = grid.times();
    let slopes: Vec<f64> = sample.argument.iter().map(|x| utility.slope(*x)).collect();
    let (m0, m_se) = stats::mean_se(&slopes);
    let mut m = vec![m0; times.len()];
    let mut m_spread = vec![0.0; times.len()];
    if let Some(tracks) = &sample.tracks {
        for n in 1..times.len() {
            let (mean, sd) = regress_m(&slopes, tracks, n);
            m[n] = mean;
            m_spread[n] = sd;
        }
    }
    let t_end = config.horizon;
    let table = |f: &dyn Fn(f64, f64, f64, f64) -> f64| -> Vec<Vec<f64>> {
        config
            .subpopulations
            .iter()
            .map(|p| {
                (0..times.len())
                    .map(|n| f(p.pi, m[n], p.lambda_weight, times[n]))
                    .collect()
            })
            .collect()
    };
    AdjointState {
        kx: table(&|pi, m, l, _| -pi * m * l),
        kv: table(&|pi, m, _, _| -pi * m),
        ka: table(&|pi, m, l, t| -pi * m * l * (t_end - t)),
        times: times.clone(),
        m,
        m_se,
        m_spread,
        l_zero: true,
    }
}

/// Where the population means of Y^X, Y^A in the first-order conditions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocSource {
    /// Moments of the grid forward pass; only M is sampled.
    Grid,
    /// Means along the representative sample's tracks.
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FocReport {
    pub source: FocSource,
    pub times: Vec<f64>,
    /// `[k][n]`.
    pub residual_x: Vec<Vec<f64>>,
    pub residual_a: Vec<Vec<f64>>,
    /// Jackknife standard errors.
    pub se_x: Vec<Vec<f64>>,
    pub se_a: Vec<Vec<f64>>,
    pub adjoints: AdjointState,
}

impl FocReport {
    pub fn max_abs(&self) -> f64 {
        self.residual_x
            .iter()
            .chain(&self.residual_a)
            .flatten()
            .fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Largest |residual| − z·SE over all profiles; non-positive when every
    /// residual lies within z standard errors.
    pub fn max_excess(&self, z: f64) -> f64 {
        let pairs = self
            .residual_x
            .iter()
            .flatten()
            .zip(self.se_x.iter().flatten())
            .chain(
                self.residual_a
                    .iter()
                    .flatten()
                    .zip(self.se_a.iter().flatten()),
            );
        pairs.fold(f64::NEG_INFINITY, |m, (r, s)| m.max(r.abs() - z * s))
    }
}

struct FocInputs<'a> {
    config: &'a MarketConfig,
    eta_k: Vec<f64>,
    eta: f64,
}

impl FocInputs<'_> {
    /// Residual profiles at one time for given M and mean adjoints.
    fn eval(&self, m: f64, t_left: f64, yx: &[f64], ya: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pops = &self.config.subpopulations;
        let kx: Vec<f64> = pops.iter().map(|p| -p.pi * m * p.lambda_weight).collect();
        let kv: Vec<f64> = pops.iter().map(|p| -p.pi * m).collect();
        let implied: f64 = self
            .eta_k
            .iter()
            .zip(yx)
            .map(|(e, y)| e / self.eta * y)
            .sum();
        let coupling: f64 = pops
            .iter()
            .enumerate()
            .map(|(j, p)| (kx[j] + kv[j] * implied) / p.gamma)
            .sum();
        let rx = pops
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let u = p.upsilon();
                -u * kx[k] - u * yx[k] * kv[k] + self.eta_k[k] / self.eta * coupling
            })
            .collect();
        let ra = pops
            .iter()
            .enumerate()
            .map(|(k, p)| (-(kx[k] * t_left) - kv[k] * ya[k]) / p.beta)
            .collect();
        (rx, ra)
    }
}

/// First-order condition residuals of the principal's Hamiltonian along the
/// equilibrium, with jackknife standard errors over the sample.
pub fn foc_residual(
    eq: &MfgEquilibrium,
    sample: &RepresentativeSample,
    utility: &UtilitySpec,
    config: &MarketConfig,
    source: FocSource,
    exec: Exec,
) -> Result<FocReport> {
    let tracks = match (source, &sample.tracks) {
        (FocSource::MonteCarlo, None) => {
            return Err(Error::Unsupported(
                "Monte Carlo residuals need sample tracks".into(),
            ))
        }
        (FocSource::MonteCarlo, Some(t)) => Some(t),
        (FocSource::Grid, _) => None,
    };
    let adjoints = adjoint_closed_form(sample, utility, config);
    let w = config.eta_weights();
    let inputs = FocInputs {
        config,
        eta_k: w.eta_k,
        eta: w.eta,
    };
    let kk = config.k();
    let nt1 = adjoints.times.len();
    let n_samples = sample.paths as f64;
    let slopes: Vec<f64> = sample.argument.iter().map(|x| utility.slope(*x)).collect();
    let m_sum: f64 = slopes.iter().sum();

    let per_time: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = exec::map_range(exec, nt1, |n| {
        let t_left = config.horizon - adjoints.times[n];
        let (yx_sum, ya_sum): (Vec<f64>, Vec<f64>) = match tracks {
            Some(tr) => (
                tr.iter().map(|v| v.iter().map(|t| t.yx[n]).sum()).collect(),
                tr.iter().map(|v| v.iter().map(|t| t.ya[n]).sum()).collect(),
            ),
            None => (
                eq.flows
                    .per_k
                    .iter()
                    .map(|f| f.mean_yx[n] * n_samples)
                    .collect(),
                eq.flows
                    .per_k
                    .iter()
                    .map(|f| f.mean_ya[n] * n_samples)
                    .collect(),
            ),
        };
        let mean = |s: &[f64], d: f64| s.iter().map(|v| v / d).collect::<Vec<f64>>();
        let (rx, ra) = inputs.eval(
            adjoints.m[n],
            t_left,
            &mean(&yx_sum, n_samples),
            &mean(&ya_sum, n_samples),
        );
        // Jackknife over samples: drop the i-th tuple from every mean.
        let mut jx_all = vec![Vec::with_capacity(sample.paths); kk];
        let mut ja_all = vec![Vec::with_capacity(sample.paths); kk];
        if sample.paths > 1 {
            let d = n_samples - 1.0;
            let mut yx_i = vec![0.0; kk];
            let mut ya_i = vec![0.0; kk];
            for i in 0..sample.paths {
                for k in 0..kk {
                    let (y1, y2) = match tracks {
                        Some(tr) => (tr[k][i].yx[n], tr[k][i].ya[n]),
                        None => (yx_sum[k] / n_samples, ya_sum[k] / n_samples),
                    };
                    yx_i[k] = (yx_sum[k] - y1) / d;
                    ya_i[k] = (ya_sum[k] - y2) / d;
                }
                let (jx, ja) = inputs.eval((m_sum - slopes[i]) / d, t_left, &yx_i, &ya_i);
                for k in 0..kk {
                    jx_all[k].push(jx[k]);
                    ja_all[k].push(ja[k]);
                }
            }
        }
        let jack = |v: &[f64]| {
            if v.len() < 2 {
                return 0.0;
            }
            let (_, var) = stats::mean_var(v);
            (var * (v.len() - 1) as f64).sqrt()
        };
        let se_x = jx_all.iter().map(|v| jack(v)).collect();
        let se_a = ja_all.iter().map(|v| jack(v)).collect();
        (rx, ra, se_x, se_a)
    });

    let transpose =
        |f: &dyn Fn(&(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<Vec<f64>> {
            (0..kk)
                .map(|k| per_time.iter().map(|row| f(row)[k]).collect())
                .collect()
        };
    Ok(FocReport {
        source,
        times: adjoints.times.clone(),
        residual_x: transpose(&|r| &r.0),
        residual_a: transpose(&|r| &r.1),
        se_x: transpose(&|r| &r.2),
        se_a: transpose(&|r| &r.3),
        adjoints,
    })
}

/// E[V_0^{(k)}]: V(0, ·, 0) integrated against the initial law on the grid.
pub fn agent_value_v0(eq: &MfgEquilibrium, config: &MarketConfig) -> Vec<f64> {
    eq.feedbacks
        .iter()
        .zip(&config.subpopulations)
        .map(|(sol, p)| {
            let w = p.initial_inventory.grid_weights(&sol.grid.xs());
            let v0 = &sol.slice_v(0)[..sol.grid.nx];
            w.iter().zip(v0).map(|(w, v)| w * v).sum()
        })
        .collect()
}

/// Intercepts that make E[V_0^{(k)}] = R_0 bind for every k.
pub fn reservation_shift(
    contracts: &[PenaltySpec],
    eq: &MfgEquilibrium,
    config: &MarketConfig,
    reservation: f64,
) -> Vec<PenaltySpec> {
    contracts
        .iter()
        .zip(agent_value_v0(eq, config))
        .map(|(c, v)| c.with_intercept(c.intercept() + reservation - v))
        .collect()
}

/// Moves the equilibrium to `contracts`, which must differ from its own
/// penalties only in the intercepts. Controls, adjoints and price are unchanged.
pub fn apply_intercepts(eq: &mut MfgEquilibrium, contracts: &[PenaltySpec]) {
    for (sol, c) in eq.feedbacks.iter_mut().zip(contracts) {
        let shift = c.intercept() - sol.penalty.intercept();
        debug_assert_eq!(*c, sol.penalty.with_intercept(c.intercept()));
        sol.v.iter_mut().for_each(|v| *v += shift);
        sol.penalty = *c;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReservationStatus {
    pub k: usize,
    pub value0: f64,
    pub reservation: f64,
    /// E[V_0] − R_0; admissible when ≤ tolerance.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PrincipalOptions {
    pub equilibrium: EquilibriumOptions,
    pub paths: usize,
    pub seed: u64,
    pub bind_reservation: bool,
    pub reservation_tol: f64,
}

impl PrincipalOptions {
    pub fn new(config: &MarketConfig) -> Self {
        PrincipalOptions {
            equilibrium: EquilibriumOptions::default(),
            paths: config.mc_paths,
            seed: config.rng_seed,
            bind_reservation: true,
            reservation_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrincipalReport {
    pub params: Vec<f64>,
    pub contracts: Vec<PenaltySpec>,
    pub objective: Estimate,
    pub price_level: f64,
    pub price_deviation: f64,
    pub iterations: usize,
    pub reservation: Vec<ReservationStatus>,
    pub admissible: bool,
    /// Largest |residual| of the grid-path first-order conditions.
    pub max_foc_residual: f64,
}

impl PrincipalReport {
    pub fn reservation_gap(&self) -> f64 {
        self.reservation
            .iter()
            .fold(f64::NEG_INFINITY, |m, r| m.max(r.gap))
    }
}

/// Solves the equilibrium under `contracts`, optionally binds the reservation
/// constraint, and estimates J^P with common random numbers.
pub fn evaluate_contract(
    config: &MarketConfig,
    contracts: &[PenaltySpec],
    utility: &UtilitySpec,
    opts: &PrincipalOptions,
) -> Result<(PrincipalReport, MfgEquilibrium)> {
    let xs = config.grid().xs();
    for (k, c) in contracts.iter().enumerate() {
        let r = admissibility_check(c, &xs);
        if !r.is_convex() {
            return Err(Error::PenaltyNotConvex {
                k,
                violation: r.convexity_violation,
            });
        }
    }
    let mut eq = solve_equilibrium(config, contracts, &opts.equilibrium)?;
    let contracts = if opts.bind_reservation {
        let shifted = reservation_shift(contracts, &eq, config, config.reservation_cost);
        apply_intercepts(&mut eq, &shifted);
        shifted
    } else {
        contracts.to_vec()
    };
    let sample = sample_representatives(
        &eq,
        &contracts,
        config,
        opts.paths,
        opts.seed,
        false,
        opts.equilibrium.exec,
    );
    let objective = principal_objective(&sample, utility);
    let foc = foc_residual(
        &eq,
        &sample,
        utility,
        config,
        FocSource::Grid,
        opts.equilibrium.exec,
    )?;
    let reservation: Vec<ReservationStatus> = agent_value_v0(&eq, config)
        .into_iter()
        .enumerate()
        .map(|(k, v)| ReservationStatus {
            k,
            value0: v,
            reservation: config.reservation_cost,
            gap: v - config.reservation_cost,
        })
        .collect();
    let admissible = reservation.iter().all(|r| r.gap <= opts.reservation_tol);
    let report = PrincipalReport {
        params: Vec::new(),
        contracts,
        objective,
        price_level: eq.price.at(0),
        price_deviation: eq.price.max_deviation_from_start(),
        iterations: eq.iterations,
        reservation,
        admissible,
        max_foc_residual: foc.max_abs(),
    };
    Ok((report, eq))
}

/// Parametric contract families searched by the principal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContractFamily {
    /// C^k(x) = −θ_k x; one slope per sub-population.
    Linear,
    /// Softplus hockey sticks with one (P, R, ε) shared by all sub-populations.
    SoftplusShared,
    /// Softplus hockey sticks with (P_k, R_k, ε_k) per sub-population.
    SoftplusPerPopulation,
    /// A single fixed member.
    Fixed { contracts: Vec<PenaltySpec> },
}

impl ContractFamily {
    pub fn dim(&self, k: usize) -> usize {
        match self {
            ContractFamily::Linear => k,
            ContractFamily::SoftplusShared => 3,
            ContractFamily::SoftplusPerPopulation => 3 * k,
            ContractFamily::Fixed { .. } => 0,
        }
    }

    /// Column names of the parameters, in order.
    pub fn param_names(&self, k: usize) -> Vec<String> {
        let softplus = |s: &str| ["P", "R", "epsilon"].map(|n| format!("{n}{s}"));
        match self {
            ContractFamily::Linear => (0..k).map(|i| format!("slope_{i}")).collect(),
            ContractFamily::SoftplusShared => softplus("").to_vec(),
            ContractFamily::SoftplusPerPopulation => {
                (0..k).flat_map(|i| softplus(&format!("_{i}"))).collect()
            }
            ContractFamily::Fixed { .. } => Vec::new(),
        }
    }

    /// Lower and upper bound of every parameter.
    pub fn bounds(&self, config: &MarketConfig) -> Vec<(f64, f64)> {
        let softplus = [
            (1e-3, 10.0),
            (config.x_min, config.x_max),
            (config.grid().dx(), 2.0),
        ];
        match self {
            ContractFamily::Linear => vec![(0.0, 10.0); config.k()],
            ContractFamily::SoftplusShared => softplus.to_vec(),
            ContractFamily::SoftplusPerPopulation => softplus.repeat(config.k()),
            ContractFamily::Fixed { .. } => Vec::new(),
        }
    }

    /// Starting point and initial simplex steps.
    pub fn start(&self, config: &MarketConfig) -> (Vec<f64>, Vec<f64>) {
        match self {
            ContractFamily::Linear => {
                let l: Vec<f64> = config
                    .subpopulations
                    .iter()
                    .map(|p| p.lambda_weight)
                    .collect();
                let s = l.iter().map(|v| 0.25 * v.max(0.1)).collect();
                (l, s)
            }
            ContractFamily::SoftplusShared => (vec![1.0, 1.0, 0.2], vec![0.5, 0.5, 0.1]),
            ContractFamily::SoftplusPerPopulation => (
                [1.0, 1.0, 0.2].repeat(config.k()),
                [0.5, 0.5, 0.1].repeat(config.k()),
            ),
            ContractFamily::Fixed { .. } => (Vec::new(), Vec::new()),
        }
    }

    /// Contracts of the member θ (zero intercepts); `None` outside the bounds.
    pub fn member(&self, theta: &[f64], config: &MarketConfig) -> Option<Vec<PenaltySpec>> {
        let inside = theta
            .iter()
            .zip(self.bounds(config))
            .all(|(v, (lo, hi))| *v >= lo && *v <= hi);
        if !inside || theta.len() != self.dim(config.k()) {
            return None;
        }
        let softplus = |t: &[f64]| PenaltySpec::SoftplusHockey {
            rate: t[0],
            requirement: t[1],
            epsilon: t[2],
            intercept: 0.0,
        };
        Some(match self {
            ContractFamily::Linear => theta
                .iter()
                .map(|&slope| PenaltySpec::Linear {
                    slope,
                    intercept: 0.0,
                })
                .collect(),
            ContractFamily::SoftplusShared => vec![softplus(theta); config.k()],
            ContractFamily::SoftplusPerPopulation => theta.chunks(3).map(softplus).collect(),
            ContractFamily::Fixed { contracts } => contracts.clone(),
        })
    }
}

/// One row of the optimisation trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub params: Vec<f64>,
    pub jp: f64,
    pub se: f64,
    pub reservation_gap: f64,
    pub max_foc_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractSearch {
    pub family: ContractFamily,
    pub best: PrincipalReport,
    pub trace: Vec<TraceRow>,
    /// The budget ran out before the simplex converged; `best` is the best so far.
    pub exhausted: bool,
}

fn trace_row(iteration: usize, theta: &[f64], r: Option<&PrincipalReport>) -> TraceRow {
    TraceRow {
        iteration,
        params: theta.to_vec(),
        jp: r.map_or(f64::NAN, |r| r.objective.value),
        se: r.map_or(f64::NAN, |r| r.objective.se),
        reservation_gap: r.map_or(f64::NAN, |r| r.reservation_gap()),
        max_foc_residual: r.map_or(f64::NAN, |r| r.max_foc_residual),
    }
}

/// Evaluates the family members at the given parameter points in order.
pub fn probe_family(
    family: &ContractFamily,
    points: &[Vec<f64>],
    config: &MarketConfig,
    utility: &UtilitySpec,
    opts: &PrincipalOptions,
) -> Vec<Result<PrincipalReport>> {
    points
        .iter()
        .map(|theta| {
            let contracts = family.member(theta, config).ok_or_else(|| {
                Error::Unsupported(format!("parameters {theta:?} outside the family bounds"))
            })?;
            let (mut r, _) = evaluate_contract(config, &contracts, utility, opts)?;
            r.params = theta.clone();
            Ok(r)
        })
        .collect()
}

/// Nelder–Mead over the family's parameters; each evaluation is one
/// equilibrium solve, `budget` caps their number. Members that are outside the
/// bounds or whose equilibrium fails count as +∞.
pub fn optimize_contract(
    family: &ContractFamily,
    config: &MarketConfig,
    utility: &UtilitySpec,
    budget: usize,
    opts: &PrincipalOptions,
) -> Result<ContractSearch> {
    if let ContractFamily::Fixed { contracts } = family {
        let (best, _) = evaluate_contract(config, contracts, utility, opts)?;
        let trace = vec![trace_row(0, &[], Some(&best))];
        return Ok(ContractSearch {
            family: family.clone(),
            best,
            trace,
            exhausted: false,
        });
    }
    let mut trace = Vec::new();
    let mut reports: Vec<Option<PrincipalReport>> = Vec::new();
    let (x0, steps) = family.start(config);
    let objective = |theta: &[f64]| {
        let report = family.member(theta, config).and_then(|c| {
            evaluate_contract(config, &c, utility, opts)
                .ok()
                .map(|(mut r, _)| {
                    r.params = theta.to_vec();
                    r
                })
        });
        trace.push(trace_row(trace.len(), theta, report.as_ref()));
        let v = report.as_ref().map_or(f64::INFINITY, |r| r.objective.value);
        reports.push(report);
        v
    };
    let result = nelder_mead(
        objective,
        &x0,
        &steps,
        &NelderMeadOptions {
            budget,
            sd_tolerance: 1e-9,
        },
    );
    let best_index = result.trace.best().unwrap();
    let best = reports[best_index]
        .clone()
        .ok_or_else(|| Error::Unsupported("no family member could be evaluated".into()))?;
    Ok(ContractSearch {
        family: family.clone(),
        best,
        trace,
        exhausted: result.exhausted,
    })
}
