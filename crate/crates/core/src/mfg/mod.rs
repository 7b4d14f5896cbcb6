//! Forward mean-field pass and the damped price fixed point.

use serde::Serialize;

use crate::exec::{self, Exec};
use crate::hjb::{
    feedback_controls, solve_backward, Controls, FeedbackSolution, PricePath, SolverOptions,
    StepPropagator,
};
use crate::model::{EtaWeights, MarketConfig, PenaltySpec};
use crate::rng::{self, purpose};
use crate::{Error, Result};

/// Moment flows of one sub-population on the time grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FlowSeries {
    pub mean_yx: Vec<f64>,
    /// Standard error of `mean_yx`; zero for the grid forward pass.
    pub se_yx: Vec<f64>,
    pub mean_ya: Vec<f64>,
    pub mean_gamma: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub var_x: Vec<f64>,
    pub mean_a: Vec<f64>,
    pub var_a: Vec<f64>,
    /// Mass on the x-boundary nodes (grid pass) or fraction of clamped paths
    /// (Monte Carlo), maximised over time.
    pub boundary_fraction: f64,
}

impl FlowSeries {
    fn with_len(n: usize) -> Self {
        FlowSeries {
            mean_yx: vec![0.0; n],
            se_yx: vec![0.0; n],
            mean_ya: vec![0.0; n],
            mean_gamma: vec![0.0; n],
            mean_x: vec![0.0; n],
            var_x: vec![0.0; n],
            mean_a: vec![0.0; n],
            var_a: vec![0.0; n],
            boundary_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanFieldFlows {
    pub times: Vec<f64>,
    pub per_k: Vec<FlowSeries>,
}

impl MeanFieldFlows {
    /// Sub-populations whose boundary fraction exceeds 1%.
    pub fn escaped(&self) -> Vec<usize> {
        (0..self.per_k.len())
            .filter(|&k| self.per_k[k].boundary_fraction > 0.01)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMethod {
    /// Discrete Fokker–Planck pass, the exact adjoint of the backward scheme.
    FokkerPlanck,
    /// Euler–Maruyama simulation with per-path counter-based streams.
    MonteCarlo { paths: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct EquilibriumOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_outer: usize,
    pub forward: ForwardMethod,
    pub solver: SolverOptions,
    pub exec: Exec,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            damping: 0.5,
            tol: 1e-6,
            max_outer: 100,
            forward: ForwardMethod::FokkerPlanck,
            solver: SolverOptions::default(),
            exec: Exec::Parallel,
        }
    }
}

impl EquilibriumOptions {
    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self.solver.exec = exec;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MfgEquilibrium {
    pub price: PricePath,
    #[serde(skip)]
    pub feedbacks: Vec<FeedbackSolution>,
    pub flows: MeanFieldFlows,
    pub iterations: usize,
    /// ω·sup|U(S) − S| at the accepted iterate.
    pub final_update: f64,
    /// Same quantity for every outer iterate.
    pub history: Vec<f64>,
    pub clearing: Vec<f64>,
}

impl MfgEquilibrium {
    pub fn max_clearing_residual(&self) -> f64 {
        self.clearing.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// One Euler–Maruyama step of a single agent under the feedback `sol`.
#[derive(Debug, Clone, Copy)]
pub struct EulerStep {
    pub x: f64,
    pub a: f64,
    pub yx: f64,
    pub ya: f64,
    pub controls: Controls,
    pub clamped: bool,
}

/// Advances (x, a) from step `n` with the standard normal draw `z`.
#[inline]
pub fn euler_step(sol: &FeedbackSolution, n: usize, x: f64, a: f64, z: f64) -> EulerStep {
    let g = &sol.grid;
    let dt = g.dt();
    let s = sol.price.at(n);
    let (yx, ya, clamped) = sol.sample_node(n, x, a);
    let c = feedback_controls(yx, ya, s, &sol.params);
    let h = sol.params.baseline.at_step(n);
    EulerStep {
        x: x + (h + a + c.g + c.gamma) * dt + sol.params.sigma * dt.sqrt() * z,
        a: a + c.alpha * dt,
        yx,
        ya,
        controls: c,
        clamped,
    }
}

/// Grid forward pass: m^{n+1} = Eᵀ A^{-T} m^n with the backward step's own
/// operators, so Σ m^n Y^n is preserved step to step.
pub fn forward_fokker_planck(
    feedbacks: &[FeedbackSolution],
    config: &MarketConfig,
    exec: Exec,
) -> Result<MeanFieldFlows> {
    let grid = config.grid();
    let times = grid.times();
    let per_k = exec::map_range(exec, feedbacks.len(), |k| {
        fokker_planck_one(&feedbacks[k], &config.subpopulations[k].initial_inventory)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(MeanFieldFlows { times, per_k })
}

fn fokker_planck_one(sol: &FeedbackSolution, law: &crate::InitialLaw) -> Result<FlowSeries> {
    let g = &sol.grid;
    let nx = g.nx;
    let mut out = FlowSeries::with_len(g.nt + 1);
    let mut m = vec![0.0; g.slice_len()];
    m[..nx].copy_from_slice(&law.grid_weights(&g.xs()));
    for n in 0..=g.nt {
        record_moments(sol, n, &m, &mut out);
        if n == g.nt {
            break;
        }
        m = StepPropagator::new(sol, n)?.apply_transpose(&m);
    }
    Ok(out)
}

fn record_moments(sol: &FeedbackSolution, n: usize, m: &[f64], out: &mut FlowSeries) {
    let g = &sol.grid;
    let nx = g.nx;
    let yx = sol.slice_yx(n);
    let ya = sol.slice_ya(n);
    let (mut s_yx, mut s_ya, mut s_x, mut s_xx, mut s_a, mut s_aa, mut edge) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for l in 0..g.na {
        let a = g.a(l);
        for j in 0..nx {
            let i = l * nx + j;
            let w = m[i];
            let x = g.x(j);
            s_yx += w * yx[i];
            s_ya += w * ya[i];
            s_x += w * x;
            s_xx += w * x * x;
            s_a += w * a;
            s_aa += w * a * a;
            if j == 0 || j + 1 == nx {
                edge += w.abs();
            }
        }
    }
    out.mean_yx[n] = s_yx;
    out.mean_ya[n] = s_ya;
    out.mean_gamma[n] = (-s_yx - sol.price.at(n)) / sol.params.gamma;
    out.mean_x[n] = s_x;
    out.var_x[n] = (s_xx - s_x * s_x).max(0.0);
    out.mean_a[n] = s_a;
    out.var_a[n] = (s_aa - s_a * s_a).max(0.0);
    out.boundary_fraction = out.boundary_fraction.max(edge);
}

const BLOCK: usize = 256;

/// Monte Carlo forward pass with `paths` agents per sub-population.
pub fn forward_monte_carlo(
    feedbacks: &[FeedbackSolution],
    config: &MarketConfig,
    paths: usize,
    seed: u64,
    exec: Exec,
) -> MeanFieldFlows {
    let grid = config.grid();
    let times = grid.times();
    let per_k = feedbacks
        .iter()
        .enumerate()
        .map(|(k, sol)| {
            monte_carlo_one(
                k,
                sol,
                &config.subpopulations[k].initial_inventory,
                paths,
                seed,
                exec,
            )
        })
        .collect();
    MeanFieldFlows { times, per_k }
}

// Per-time sums: yx, yx², ya, x, x², a, a², clamped.
type Sums = [f64; 8];

fn monte_carlo_one(
    k: usize,
    sol: &FeedbackSolution,
    law: &crate::InitialLaw,
    paths: usize,
    seed: u64,
    exec: Exec,
) -> FlowSeries {
    let nt = sol.grid.nt;
    let blocks = paths.div_ceil(BLOCK);
    let partial: Vec<Vec<Sums>> = exec::map_range(exec, blocks, |b| {
        let mut sums = vec![[0.0; 8]; nt + 1];
        for p in b * BLOCK..((b + 1) * BLOCK).min(paths) {
            let mut rng = rng::stream(seed, rng::stream_id(purpose::MEAN_FIELD, k, p));
            let mut x = law.sample(&mut rng);
            let mut a = 0.0;
            let mut escaped = false;
            for (n, s) in sums.iter_mut().enumerate() {
                let z = if n < nt { rng::normal(&mut rng) } else { 0.0 };
                let st = euler_step(sol, n.min(nt), x, a, z);
                escaped |= st.clamped;
                s[0] += st.yx;
                s[1] += st.yx * st.yx;
                s[2] += st.ya;
                s[3] += x;
                s[4] += x * x;
                s[5] += a;
                s[6] += a * a;
                s[7] += escaped as u8 as f64;
                x = st.x;
                a = st.a;
            }
        }
        sums
    });
    let m = paths as f64;
    let mut out = FlowSeries::with_len(nt + 1);
    for n in 0..=nt {
        let mut t = [0.0; 8];
        for block in &partial {
            for (acc, v) in t.iter_mut().zip(&block[n]) {
                *acc += v;
            }
        }
        let mean_yx = t[0] / m;
        out.mean_yx[n] = mean_yx;
        out.se_yx[n] = if paths > 1 {
            ((t[1] - m * mean_yx * mean_yx).max(0.0) / (m - 1.0) / m).sqrt()
        } else {
            0.0
        };
        out.mean_ya[n] = t[2] / m;
        out.mean_gamma[n] = (-mean_yx - sol.price.at(n)) / sol.params.gamma;
        out.mean_x[n] = t[3] / m;
        out.var_x[n] = (t[4] / m - out.mean_x[n].powi(2)).max(0.0);
        out.mean_a[n] = t[5] / m;
        out.var_a[n] = (t[6] / m - out.mean_a[n].powi(2)).max(0.0);
        out.boundary_fraction = out.boundary_fraction.max(t[7] / m);
    }
    out
}

/// Per-step drift of the adjoints along simulated paths: E[ΔY^X] and
/// E[ΔY^A/Δt + Y^X], each with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub k: usize,
    pub paths: usize,
    pub mean_dyx: Vec<f64>,
    pub se_dyx: Vec<f64>,
    pub mean_dya: Vec<f64>,
    pub se_dya: Vec<f64>,
}

impl DriftReport {
    /// Fraction of steps where both drifts lie within `z` standard errors of zero.
    pub fn fraction_within(&self, z: f64) -> f64 {
        let n = self.mean_dyx.len();
        let ok = (0..n)
            .filter(|&i| {
                self.mean_dyx[i].abs() <= z * self.se_dyx[i]
                    && self.mean_dya[i].abs() <= z * self.se_dya[i]
            })
            .count();
        ok as f64 / n as f64
    }
}

/// Simulates `paths` Euler paths of sub-population `k` and measures the drift
/// of Y^X (zero for a martingale) and of Y^A (−Y^X).
pub fn adjoint_drift_check(
    sol: &FeedbackSolution,
    law: &crate::InitialLaw,
    paths: usize,
    seed: u64,
    exec: Exec,
) -> DriftReport {
    let nt = sol.grid.nt;
    let dt = sol.grid.dt();
    let blocks = paths.div_ceil(BLOCK);
    // Per-step sums: dyx, dyx², dya, dya².
    let partial: Vec<Vec<[f64; 4]>> = exec::map_range(exec, blocks, |b| {
        let mut sums = vec![[0.0; 4]; nt];
        for p in b * BLOCK..((b + 1) * BLOCK).min(paths) {
            let mut rng = rng::stream(seed, rng::stream_id(purpose::MEAN_FIELD, sol.k, p));
            let mut x = law.sample(&mut rng);
            let mut a = 0.0;
            let mut st = euler_step(sol, 0, x, a, rng::normal(&mut rng));
            for (n, s) in sums.iter_mut().enumerate() {
                let (yx, ya) = (st.yx, st.ya);
                x = st.x;
                a = st.a;
                let z = if n + 1 < nt {
                    rng::normal(&mut rng)
                } else {
                    0.0
                };
                st = euler_step(sol, n + 1, x, a, z);
                let d1 = st.yx - yx;
                let d2 = (st.ya - ya) / dt + yx;
                s[0] += d1;
                s[1] += d1 * d1;
                s[2] += d2;
                s[3] += d2 * d2;
            }
        }
        sums
    });
    let m = paths as f64;
    let mut r = DriftReport {
        k: sol.k,
        paths,
        mean_dyx: vec![0.0; nt],
        se_dyx: vec![0.0; nt],
        mean_dya: vec![0.0; nt],
        se_dya: vec![0.0; nt],
    };
    for n in 0..nt {
        let mut t = [0.0; 4];
        for block in &partial {
            for (acc, v) in t.iter_mut().zip(&block[n]) {
                *acc += v;
            }
        }
        let se = |s: f64, s2: f64| ((s2 / m - (s / m).powi(2)).max(0.0) / (m - 1.0)).sqrt();
        r.mean_dyx[n] = t[0] / m;
        r.se_dyx[n] = se(t[0], t[1]);
        r.mean_dya[n] = t[2] / m;
        r.se_dya[n] = se(t[2], t[3]);
    }
    r
}

/// S_t = −Σ_k η_k E[Y^X_k(t)] / η.
pub fn update_price(flows: &MeanFieldFlows, weights: &EtaWeights) -> PricePath {
    let nt = flows.times.len();
    PricePath(
        (0..nt)
            .map(|n| {
                let s: f64 = weights
                    .eta_k
                    .iter()
                    .zip(&flows.per_k)
                    .map(|(e, f)| e * f.mean_yx[n])
                    .sum();
                -s / weights.eta
            })
            .collect(),
    )
}

/// Σ_k π_k E[Γ_k(t)] per time step.
pub fn clearing_profile(flows: &MeanFieldFlows, config: &MarketConfig) -> Vec<f64> {
    (0..flows.times.len())
        .map(|n| {
            config
                .subpopulations
                .iter()
                .zip(&flows.per_k)
                .map(|(p, f)| p.pi * f.mean_gamma[n])
                .sum()
        })
        .collect()
}

pub fn clearing_residual(eq: &MfgEquilibrium) -> (Vec<f64>, f64) {
    (eq.clearing.clone(), eq.max_clearing_residual())
}

/// Backward solves for every sub-population under `price`.
pub fn solve_feedbacks(
    config: &MarketConfig,
    penalties: &[PenaltySpec],
    price: &PricePath,
    opts: &EquilibriumOptions,
) -> Result<Vec<FeedbackSolution>> {
    let grid = config.grid();
    exec::map_range(opts.exec, config.k(), |k| {
        solve_backward(
            k,
            &config.subpopulations[k],
            &penalties[k],
            price,
            &grid,
            &opts.solver,
        )
    })
    .into_iter()
    .collect()
}

pub fn forward_mean_field(
    feedbacks: &[FeedbackSolution],
    config: &MarketConfig,
    method: ForwardMethod,
    exec: Exec,
) -> Result<MeanFieldFlows> {
    match method {
        ForwardMethod::FokkerPlanck => forward_fokker_planck(feedbacks, config, exec),
        ForwardMethod::MonteCarlo { paths, seed } => {
            Ok(forward_monte_carlo(feedbacks, config, paths, seed, exec))
        }
    }
}

/// Initial guess Σ η_k λ_k / η.
pub fn linear_price(config: &MarketConfig) -> f64 {
    let lambdas: Vec<f64> = config
        .subpopulations
        .iter()
        .map(|p| p.lambda_weight)
        .collect();
    config.eta_weights().weighted_price(&lambdas)
}

pub fn solve_equilibrium(
    config: &MarketConfig,
    penalties: &[PenaltySpec],
    opts: &EquilibriumOptions,
) -> Result<MfgEquilibrium> {
    solve_equilibrium_from(
        config,
        penalties,
        PricePath::constant(linear_price(config), &config.grid()),
        opts,
    )
}

/// Damped fixed point S ← (1−ω)S + ω·U(S) from a given starting path.
pub fn solve_equilibrium_from(
    config: &MarketConfig,
    penalties: &[PenaltySpec],
    start: PricePath,
    opts: &EquilibriumOptions,
) -> Result<MfgEquilibrium> {
    let report = config.validate();
    if !report.is_ok() {
        return Err(Error::InvalidConfig(report));
    }
    if penalties.len() != config.k() {
        return Err(Error::Unsupported(format!(
            "{} penalties for {} sub-populations",
            penalties.len(),
            config.k()
        )));
    }
    let weights = config.eta_weights();
    let omega = opts.damping;
    let mut price = start;
    let mut history = Vec::new();
    for iteration in 1..=opts.max_outer {
        let feedbacks = solve_feedbacks(config, penalties, &price, opts)?;
        let flows = forward_mean_field(&feedbacks, config, opts.forward, opts.exec)?;
        let target = update_price(&flows, &weights);
        let change = omega * target.sup_distance(&price);
        history.push(change);
        if change < opts.tol {
            let clearing = clearing_profile(&flows, config);
            return Ok(MfgEquilibrium {
                price,
                feedbacks,
                flows,
                iterations: iteration,
                final_update: change,
                history,
                clearing,
            });
        }
        price = PricePath(
            price
                .0
                .iter()
                .zip(&target.0)
                .map(|(s, u)| (1.0 - omega) * s + omega * u)
                .collect(),
        );
    }
    Err(Error::MaxIterations {
        iterations: opts.max_outer,
        last: *history.last().unwrap_or(&f64::NAN),
        history,
    })
}

#[cfg(test)]
pub(crate) mod tests;
