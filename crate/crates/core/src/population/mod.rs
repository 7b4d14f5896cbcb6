//! Finite-N agent simulation under the mean-field feedback.
//!
//! Every agent follows the decentralised feedback of its sub-population and
//! takes the mean-field equilibrium price as given. The empirical trading
//! imbalance (1/N)Σ Γ^i is the finite-population shadow of market clearing.

use serde::{Deserialize, Serialize};

use crate::exec::{self, Exec};
use crate::hjb::{feedback_controls, Controls, FeedbackSolution};
use crate::mfg::MfgEquilibrium;
use crate::model::MarketConfig;
use crate::rng::{self, purpose};
use crate::stats;

/// How agents are split across sub-populations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Largest-remainder rounding of N·π_k, agents grouped by k.
    #[default]
    Exact,
    /// Independent draws with probabilities π_k.
    Multinomial,
}

/// Constant shift applied on top of the feedback controls.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    pub g: f64,
    pub gamma: f64,
    pub alpha: f64,
    /// Multiply the Γ shift by the sign of the optimal Γ at each step.
    #[serde(default)]
    pub gamma_along_sign: bool,
}

impl Perturbation {
    pub fn is_zero(&self) -> bool {
        self.g == 0.0 && self.gamma == 0.0 && self.alpha == 0.0
    }

    fn apply(&self, c: Controls) -> Controls {
        let sign = if self.gamma_along_sign {
            c.gamma.signum()
        } else {
            1.0
        };
        Controls {
            g: c.g + self.g,
            gamma: c.gamma + self.gamma * sign,
            alpha: c.alpha + self.alpha,
        }
    }
}

/// One agent's trajectory on the time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentPath {
    pub k: usize,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub g: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Realised cost: trapezoidal running cost plus C(X_T).
    pub cost: f64,
    /// V(0, X_0, 0) from the backward solution.
    pub value0: f64,
    pub escaped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PopulationRun {
    pub n_agents: usize,
    pub seed: u64,
    pub assignment: Assignment,
    pub times: Vec<f64>,
    pub agents: Vec<AgentPath>,
    /// (1/N)Σ_i Γ^i_t.
    pub clearing: Vec<f64>,
    /// Fraction of agents of each sub-population that left the grid.
    pub escaped_fraction: Vec<f64>,
}

impl PopulationRun {
    pub fn max_clearing_residual(&self) -> f64 {
        self.clearing.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn counts(&self, k: usize) -> usize {
        self.agents.iter().filter(|p| p.k == k).count()
    }

    fn column(&self, k: usize, f: impl Fn(&AgentPath) -> f64) -> Vec<f64> {
        self.agents.iter().filter(|p| p.k == k).map(f).collect()
    }

    /// Mean realised cost of sub-population `k` with its standard error, and
    /// the mean and standard error of cost − V(0, X_0, 0).
    pub fn cost_summary(&self, k: usize) -> CostSummary {
        let (mean, se) = stats::mean_se(&self.column(k, |p| p.cost));
        let (gap, gap_se) = stats::mean_se(&self.column(k, |p| p.cost - p.value0));
        let (value0, _) = stats::mean_se(&self.column(k, |p| p.value0));
        CostSummary {
            mean,
            se,
            value0,
            gap,
            gap_se,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostSummary {
    pub mean: f64,
    pub se: f64,
    pub value0: f64,
    pub gap: f64,
    pub gap_se: f64,
}

/// Sub-population of each of `n` agents.
pub fn assign(pis: &[f64], n: usize, assignment: Assignment, seed: u64) -> Vec<usize> {
    match assignment {
        Assignment::Exact => {
            let raw: Vec<f64> = pis.iter().map(|p| p * n as f64).collect();
            let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
            let mut order: Vec<usize> = (0..pis.len()).collect();
            order.sort_by(|&i, &j| {
                let (fi, fj) = (raw[i] - raw[i].floor(), raw[j] - raw[j].floor());
                fj.total_cmp(&fi).then(i.cmp(&j))
            });
            let short = n - counts.iter().sum::<usize>();
            for &k in order.iter().take(short) {
                counts[k] += 1;
            }
            counts
                .iter()
                .enumerate()
                .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
                .collect()
        }
        Assignment::Multinomial => (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, rng::stream_id(purpose::POPULATION, 0xff, i));
                let u: f64 = rand::Rng::random(&mut r);
                let mut acc = 0.0;
                for (k, p) in pis.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k;
                    }
                }
                pis.len() - 1
            })
            .collect(),
    }
}

/// Euler–Maruyama path of one agent drawing ξ and the increments from `rng`.
pub fn simulate_agent(
    sol: &FeedbackSolution,
    law: &crate::InitialLaw,
    rng: &mut rand_chacha::ChaCha8Rng,
    shift: &Perturbation,
) -> AgentPath {
    let g = &sol.grid;
    let nt = g.nt;
    let dt = g.dt();
    let p = &sol.params;
    let mut path = AgentPath {
        k: sol.k,
        x: Vec::with_capacity(nt + 1),
        a: Vec::with_capacity(nt + 1),
        g: Vec::with_capacity(nt + 1),
        gamma: Vec::with_capacity(nt + 1),
        alpha: Vec::with_capacity(nt + 1),
        cost: 0.0,
        value0: 0.0,
        escaped: false,
    };
    let mut x = law.sample(rng);
    let mut a = 0.0;
    path.value0 = sol.interpolate(0.0, x, a).v;
    let mut running = 0.0;
    for n in 0..=nt {
        let s = sol.price.at(n);
        let (yx, ya, clamped) = sol.sample_node(n, x, a);
        path.escaped |= clamped;
        let c = shift.apply(feedback_controls(yx, ya, s, p));
        let r = 0.5
            * (p.zeta * c.g * c.g + p.gamma * c.gamma * c.gamma + p.beta * c.alpha * c.alpha)
            + s * c.gamma;
        running += if n == 0 || n == nt { 0.5 * r } else { r };
        path.x.push(x);
        path.a.push(a);
        path.g.push(c.g);
        path.gamma.push(c.gamma);
        path.alpha.push(c.alpha);
        if n < nt {
            let z = rng::normal(rng);
            x += (p.baseline.at_step(n) + a + c.g + c.gamma) * dt + p.sigma * dt.sqrt() * z;
            a += c.alpha * dt;
        }
    }
    path.cost = running * dt + sol.penalty.value(x);
    path
}

const BLOCK: usize = 64;

/// Simulates `n` agents under the equilibrium feedback and price.
pub fn simulate_population(
    eq: &MfgEquilibrium,
    config: &MarketConfig,
    n: usize,
    seed: u64,
    assignment: Assignment,
    exec: Exec,
) -> PopulationRun {
    let pis: Vec<f64> = config.subpopulations.iter().map(|p| p.pi).collect();
    let ks = assign(&pis, n, assignment, seed);
    let blocks = n.div_ceil(BLOCK);
    let agents: Vec<AgentPath> = exec::map_range(exec, blocks, |b| {
        (b * BLOCK..((b + 1) * BLOCK).min(n))
            .map(|i| {
                let k = ks[i];
                let mut r = rng::stream(seed, rng::stream_id(purpose::POPULATION, k, i));
                simulate_agent(
                    &eq.feedbacks[k],
                    &config.subpopulations[k].initial_inventory,
                    &mut r,
                    &Perturbation::default(),
                )
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();

    let grid = config.grid();
    let clearing = (0..=grid.nt)
        .map(|t| agents.iter().map(|p| p.gamma[t]).sum::<f64>() / n.max(1) as f64)
        .collect();
    let escaped_fraction = (0..config.k())
        .map(|k| {
            let total = ks.iter().filter(|&&j| j == k).count();
            let out = agents.iter().filter(|p| p.k == k && p.escaped).count();
            if total == 0 {
                0.0
            } else {
                out as f64 / total as f64
            }
        })
        .collect();
    PopulationRun {
        n_agents: n,
        seed,
        assignment,
        times: grid.times(),
        agents,
        clearing,
        escaped_fraction,
    }
}

/// Cross-sectional summary of one variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Marginal {
    pub mean: f64,
    pub var: f64,
    /// 5%, 25%, 50%, 75% and 95% quantiles.
    pub quantiles: [f64; 5],
}

impl Marginal {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, var) = stats::mean_var(xs);
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let q = [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| stats::quantile_sorted(&s, q));
        Marginal {
            mean,
            var,
            quantiles: q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureSummary {
    pub k: usize,
    pub time: f64,
    pub count: usize,
    pub x: Marginal,
    pub a: Marginal,
    /// W1 between the empirical X sample and the reference sample, if given.
    pub wasserstein_x: Option<f64>,
}

/// Empirical μ^N_t, ν^N_t per sub-population at time step `n`. `reference[k]`
/// is an optional mean-field sample of X at the same step.
pub fn empirical_measures(
    run: &PopulationRun,
    n: usize,
    reference: Option<&[Vec<f64>]>,
) -> Vec<MeasureSummary> {
    let k_max = run.escaped_fraction.len();
    (0..k_max)
        .map(|k| {
            let xs = run.column(k, |p| p.x[n]);
            let as_ = run.column(k, |p| p.a[n]);
            MeasureSummary {
                k,
                time: run.times[n],
                count: xs.len(),
                x: Marginal::of(&xs),
                a: Marginal::of(&as_),
                wasserstein_x: reference.map(|r| stats::wasserstein1(&xs, &r[k])),
            }
        })
        .collect()
}

/// X at step `n` along `paths` independent mean-field paths of sub-population `k`.
pub fn mean_field_sample(
    eq: &MfgEquilibrium,
    config: &MarketConfig,
    k: usize,
    n: usize,
    paths: usize,
    seed: u64,
    exec: Exec,
) -> Vec<f64> {
    let law = &config.subpopulations[k].initial_inventory;
    exec::map_range(exec, paths, |p| {
        let mut r = rng::stream(seed, rng::stream_id(purpose::MEAN_FIELD, k, p));
        simulate_agent(&eq.feedbacks[k], law, &mut r, &Perturbation::default()).x[n]
    })
}

/// Realised cost of agent `i`.
pub fn realized_cost(run: &PopulationRun, i: usize) -> f64 {
    run.agents[i].cost
}

/// Cost of an arbitrary control path: trapezoidal running cost plus C(x_T).
pub fn path_cost(
    params: &crate::SubPopulationParams,
    penalty: &crate::PenaltySpec,
    price: &[f64],
    dt: f64,
    controls: &[Controls],
    x_terminal: f64,
) -> f64 {
    let last = controls.len() - 1;
    let running: f64 = controls
        .iter()
        .zip(price)
        .enumerate()
        .map(|(n, (c, s))| {
            let r = 0.5
                * (params.zeta * c.g * c.g
                    + params.gamma * c.gamma * c.gamma
                    + params.beta * c.alpha * c.alpha)
                + s * c.gamma;
            if n == 0 || n == last {
                0.5 * r
            } else {
                r
            }
        })
        .sum();
    running * dt + penalty.value(x_terminal)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub agent: usize,
    pub k: usize,
    pub perturbation: Perturbation,
    pub replications: usize,
    pub baseline_cost: f64,
    pub deviated_cost: f64,
    /// J − J′: positive means the deviation pays.
    pub gain: f64,
    pub se: f64,
    /// 95% normal confidence interval for the gain.
    pub ci: (f64, f64),
}

impl DeviationReport {
    /// Gain not significantly positive at `z` standard errors.
    pub fn is_unprofitable(&self, z: f64) -> bool {
        self.gain <= z * self.se
    }
}

/// Re-simulates agent `i` with its controls shifted, the price held fixed and
/// common random numbers. Replication 0 replays the agent's own draws; the rest
/// use fresh deviation streams.
pub fn nash_deviation_gain(
    eq: &MfgEquilibrium,
    config: &MarketConfig,
    run: &PopulationRun,
    i: usize,
    shift: &Perturbation,
    replications: usize,
    exec: Exec,
) -> DeviationReport {
    let k = run.agents[i].k;
    let sol = &eq.feedbacks[k];
    let law = &config.subpopulations[k].initial_inventory;
    let reps = replications.max(1);
    let pairs: Vec<(f64, f64)> = exec::map_range(exec, reps, |r| {
        let id = if r == 0 {
            rng::stream_id(purpose::POPULATION, k, i)
        } else {
            rng::stream_id(purpose::DEVIATION, k, (i << 20) | r)
        };
        let base = simulate_agent(
            sol,
            law,
            &mut rng::stream(run.seed, id),
            &Perturbation::default(),
        );
        let dev = simulate_agent(sol, law, &mut rng::stream(run.seed, id), shift);
        (base.cost, dev.cost)
    });
    let gains: Vec<f64> = pairs.iter().map(|(b, d)| b - d).collect();
    let (gain, se) = stats::mean_se(&gains);
    let baseline_cost = pairs.iter().map(|p| p.0).sum::<f64>() / reps as f64;
    let deviated_cost = pairs.iter().map(|p| p.1).sum::<f64>() / reps as f64;
    DeviationReport {
        agent: i,
        k,
        perturbation: *shift,
        replications: reps,
        baseline_cost,
        deviated_cost,
        gain,
        se,
        ci: (gain - 1.96 * se, gain + 1.96 * se),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClearingScaling {
    pub ns: Vec<usize>,
    /// max_t |(1/N)Σ Γ^i_t| averaged over replications.
    pub max_residual: Vec<f64>,
    /// Log-log slope of `max_residual` against N.
    pub slope: f64,
}

/// Finite-N clearing residual for each N in `ns`, averaged over `replications`
/// independent seeds.
pub fn clearing_scaling(
    eq: &MfgEquilibrium,
    config: &MarketConfig,
    ns: &[usize],
    replications: usize,
    seed: u64,
    exec: Exec,
) -> ClearingScaling {
    let max_residual: Vec<f64> = ns
        .iter()
        .map(|&n| {
            (0..replications)
                .map(|r| {
                    simulate_population(
                        eq,
                        config,
                        n,
                        seed.wrapping_add(r as u64),
                        Assignment::Exact,
                        exec,
                    )
                    .max_clearing_residual()
                })
                .sum::<f64>()
                / replications as f64
        })
        .collect();
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = max_residual.iter().map(|r| r.ln()).collect();
    ClearingScaling {
        ns: ns.to_vec(),
        slope: stats::ols_slope(&lx, &ly),
        max_residual,
    }
}
