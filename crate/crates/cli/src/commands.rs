use std::path::{Path, PathBuf};

use rec_mfg_core::exec::Exec;
use rec_mfg_core::io;
use rec_mfg_core::lq::{self, OracleComparison, ResidualReport};
use rec_mfg_core::mfg::{solve_equilibrium, MfgEquilibrium};
use rec_mfg_core::population::{
    empirical_measures, mean_field_sample, simulate_population, Assignment, CostSummary,
    MeasureSummary,
};
use rec_mfg_core::principal::{
    agent_value_v0, evaluate_contract, foc_residual, optimize_contract, sample_representatives,
    ContractFamily, FocReport, FocSource, PrincipalOptions, PrincipalReport,
};
use rec_mfg_core::{PenaltySpec, Result};
use serde::Serialize;

use crate::config::Experiment;

/// How a subcommand ended when no error was raised.
pub enum Status {
    Ok,
    /// A numerical check did not meet its tolerance.
    CheckFailed(String),
    /// The config is valid but unsuitable for the subcommand; `path` names the offender.
    Unsuitable {
        path: String,
        message: String,
    },
}

pub struct Ctx {
    pub exp: Experiment,
    pub out: PathBuf,
    pub written: Vec<String>,
}

impl Ctx {
    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.out.join(name)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        io::write_json(&p, value)
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let p = self.path(name);
        f(&p)
    }

    fn solve(&self) -> Result<MfgEquilibrium> {
        solve_equilibrium(&self.exp.market, &self.exp.penalties, &self.exp.equilibrium)
    }

    fn principal_options(&self) -> PrincipalOptions {
        PrincipalOptions {
            equilibrium: self.exp.equilibrium,
            ..PrincipalOptions::new(&self.exp.market)
        }
    }
}

fn exec() -> Exec {
    Exec::Parallel
}

#[derive(Serialize)]
struct LinearCheck {
    price: f64,
    price_gap: f64,
    max_yx_gap: f64,
    max_ya_gap: f64,
}

/// Sup-norm distance of the grid solution from the linear closed form, when
/// every penalty is linear.
fn linear_check(
    eq: &MfgEquilibrium,
    penalties: &[PenaltySpec],
    exp: &Experiment,
) -> Option<LinearCheck> {
    let slopes: Option<Vec<f64>> = penalties
        .iter()
        .map(|p| match *p {
            PenaltySpec::Linear { slope, .. } => Some(slope),
            _ => None,
        })
        .collect();
    let slopes = slopes?;
    let closed = lq::linear_contract_with(&exp.market, &slopes);
    let (mut yx_gap, mut ya_gap) = (0.0f64, 0.0f64);
    for (sol, pop) in eq.feedbacks.iter().zip(&closed.populations) {
        let g = &sol.grid;
        for n in 0..=g.nt {
            let ya = pop.ya(g.t(n), closed.horizon);
            for l in 0..g.na {
                for j in 0..g.nx {
                    let (_, y, a) = sol.at(n, j, l);
                    yx_gap = yx_gap.max((y - pop.yx).abs());
                    ya_gap = ya_gap.max((a - ya).abs());
                }
            }
        }
    }
    let price_gap = eq
        .price
        .0
        .iter()
        .fold(0.0f64, |m, s| m.max((s - closed.price).abs()));
    Some(LinearCheck {
        price: closed.price,
        price_gap,
        max_yx_gap: yx_gap,
        max_ya_gap: ya_gap,
    })
}

#[derive(Serialize)]
struct EquilibriumSummary<'a> {
    price_level: f64,
    price_deviation: f64,
    iterations: usize,
    final_update: f64,
    history: &'a [f64],
    max_clearing_residual: f64,
    escaped: Vec<usize>,
    boundary_fraction: Vec<f64>,
    value0: Vec<f64>,
    diagnostics: Vec<&'a rec_mfg_core::hjb::SolveDiagnostics>,
    linear_closed_form: Option<LinearCheck>,
}

fn summarize<'a>(eq: &'a MfgEquilibrium, exp: &Experiment) -> EquilibriumSummary<'a> {
    EquilibriumSummary {
        price_level: eq.price.at(0),
        price_deviation: eq.price.max_deviation_from_start(),
        iterations: eq.iterations,
        final_update: eq.final_update,
        history: &eq.history,
        max_clearing_residual: eq.max_clearing_residual(),
        escaped: eq.flows.escaped(),
        boundary_fraction: eq.flows.per_k.iter().map(|f| f.boundary_fraction).collect(),
        value0: agent_value_v0(eq, &exp.market),
        diagnostics: eq.feedbacks.iter().map(|f| &f.diagnostics).collect(),
        linear_closed_form: linear_check(eq, &exp.penalties, exp),
    }
}

pub fn solve_mfg(ctx: &mut Ctx, dump_feedback: bool) -> Result<Status> {
    let eq = ctx.solve()?;
    ctx.csv("price.csv", |p| io::write_price_csv(p, &eq))?;
    ctx.csv("flows.csv", |p| io::write_flows_csv(p, &eq))?;
    let summary = summarize(&eq, &ctx.exp);
    ctx.json("equilibrium.json", &summary)?;
    if dump_feedback {
        for sol in &eq.feedbacks {
            ctx.written.push(format!("feedback_k{}.csv", sol.k));
            ctx.written.push(format!("feedback_k{}.json", sol.k));
            io::write_feedback(&ctx.out, sol)?;
        }
    }
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct SimulationSummary {
    n_agents: usize,
    seed: u64,
    counts: Vec<usize>,
    max_clearing_residual: f64,
    escaped_fraction: Vec<f64>,
    cost: Vec<CostSummary>,
    initial: Vec<MeasureSummary>,
    terminal: Vec<MeasureSummary>,
    reference_paths: usize,
}

pub fn simulate(ctx: &mut Ctx, n: usize, dump_paths: bool) -> Result<Status> {
    let eq = ctx.solve()?;
    let market = &ctx.exp.market;
    let seed = market.rng_seed;
    let run = simulate_population(&eq, market, n, seed, Assignment::Exact, exec());
    let nt = market.time_steps;
    let reference: Vec<Vec<f64>> = (0..market.k())
        .map(|k| mean_field_sample(&eq, market, k, nt, market.mc_paths, seed, exec()))
        .collect();
    let summary = SimulationSummary {
        n_agents: n,
        seed,
        counts: (0..market.k()).map(|k| run.counts(k)).collect(),
        max_clearing_residual: run.max_clearing_residual(),
        escaped_fraction: run.escaped_fraction.clone(),
        cost: (0..market.k()).map(|k| run.cost_summary(k)).collect(),
        initial: empirical_measures(&run, 0, None),
        terminal: empirical_measures(&run, nt, Some(&reference)),
        reference_paths: market.mc_paths,
    };
    if dump_paths {
        ctx.csv("paths.csv", |p| io::write_paths_csv(p, &run))?;
    }
    ctx.json("summary.json", &summary)?;
    ctx.csv("clearing.csv", |p| io::write_clearing_csv(p, &run))?;
    ctx.csv("price.csv", |p| io::write_price_csv(p, &eq))?;
    Ok(Status::Ok)
}

pub const ORACLE_REL_TOL: f64 = 1e-3;
pub const RESIDUAL_TOL: f64 = 1e-8;
pub const LINEAR_YX_TOL: f64 = 1e-6;
pub const LINEAR_YA_TOL: f64 = 1e-5;
pub const LINEAR_PRICE_TOL: f64 = 1e-6;

#[derive(Serialize)]
#[serde(tag = "oracle", rename_all = "snake_case")]
enum OracleReport {
    Riccati {
        steps: usize,
        comparison: OracleComparison,
        hjb_residual: ResidualReport,
        rk4_error_estimate: f64,
        tolerance: f64,
        pass: bool,
    },
    Linear {
        check: LinearCheck,
        max_clearing_residual: f64,
        pass: bool,
    },
}

pub fn oracle_check(ctx: &mut Ctx) -> Result<Status> {
    let market = ctx.exp.market.clone();
    let quadratic = match (market.k(), ctx.exp.penalties[0]) {
        (
            1,
            PenaltySpec::Quadratic {
                curvature, target, ..
            },
        ) => Some((curvature, target)),
        _ => None,
    };
    let linear = ctx
        .exp
        .penalties
        .iter()
        .all(|p| matches!(p, PenaltySpec::Linear { .. }));
    if quadratic.is_none() && !linear {
        return Ok(Status::Unsuitable {
            path: "subpopulations[*].penalty".into(),
            message: "oracle-check needs one sub-population with a quadratic penalty, or linear penalties throughout".into(),
        });
    }
    let eq = ctx.solve()?;
    let report = if let Some((curvature, target)) = quadratic {
        let steps = 10 * market.time_steps;
        let oracle = lq::riccati_solve(
            &market.subpopulations[0],
            curvature,
            target,
            market.horizon,
            steps,
        )?;
        ctx.csv("riccati.csv", |p| io::write_riccati_csv(p, &oracle))?;
        let comparison =
            lq::compare_with_solver(&oracle, &eq.feedbacks[0], &lq::oracle_points(&oracle));
        let hjb_residual = lq::hjb_residual_check(&oracle, 1000, market.rng_seed);
        let pass = comparison.max_relative_gap < ORACLE_REL_TOL
            && hjb_residual.max_residual < RESIDUAL_TOL;
        OracleReport::Riccati {
            steps,
            comparison,
            hjb_residual,
            rk4_error_estimate: oracle.error_estimate,
            tolerance: ORACLE_REL_TOL,
            pass,
        }
    } else {
        let check = linear_check(&eq, &ctx.exp.penalties, &ctx.exp).expect("linear penalties");
        let pass = check.max_yx_gap < LINEAR_YX_TOL
            && check.max_ya_gap < LINEAR_YA_TOL
            && check.price_gap < LINEAR_PRICE_TOL;
        OracleReport::Linear {
            check,
            max_clearing_residual: eq.max_clearing_residual(),
            pass,
        }
    };
    let pass = match &report {
        OracleReport::Riccati { pass, .. } | OracleReport::Linear { pass, .. } => *pass,
    };
    ctx.json("oracle.json", &report)?;
    Ok(if pass {
        Status::Ok
    } else {
        Status::CheckFailed("solver and oracle disagree beyond tolerance; see oracle.json".into())
    })
}

pub fn evaluate(ctx: &mut Ctx) -> Result<Status> {
    let opts = ctx.principal_options();
    let (report, eq) =
        evaluate_contract(&ctx.exp.market, &ctx.exp.penalties, &ctx.exp.utility, &opts)?;
    ctx.json("contract_report.json", &report)?;
    ctx.csv("price.csv", |p| io::write_price_csv(p, &eq))?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct FocSummary {
    max_abs_grid: f64,
    max_abs_monte_carlo: f64,
    /// max(|residual| − 3·SE) over the Monte Carlo profiles.
    max_excess_3se_monte_carlo: f64,
    m0: f64,
    m0_se: f64,
    paths: usize,
    l_zero: bool,
}

fn focs(
    ctx: &Ctx,
    eq: &MfgEquilibrium,
    contracts: &[PenaltySpec],
) -> Result<(FocReport, FocReport)> {
    let market = &ctx.exp.market;
    let sample = sample_representatives(
        eq,
        contracts,
        market,
        market.mc_paths,
        market.rng_seed,
        true,
        exec(),
    );
    let grid = foc_residual(
        eq,
        &sample,
        &ctx.exp.utility,
        market,
        FocSource::Grid,
        exec(),
    )?;
    let mc = foc_residual(
        eq,
        &sample,
        &ctx.exp.utility,
        market,
        FocSource::MonteCarlo,
        exec(),
    )?;
    Ok((grid, mc))
}

fn write_focs(ctx: &mut Ctx, grid: &FocReport, mc: &FocReport) -> Result<()> {
    ctx.csv("foc_residuals.csv", |p| io::write_foc_csv(p, grid))?;
    ctx.csv("foc_residuals_mc.csv", |p| io::write_foc_csv(p, mc))?;
    let summary = FocSummary {
        max_abs_grid: grid.max_abs(),
        max_abs_monte_carlo: mc.max_abs(),
        max_excess_3se_monte_carlo: mc.max_excess(3.0),
        m0: grid.adjoints.m[0],
        m0_se: grid.adjoints.m_se,
        paths: ctx.exp.market.mc_paths,
        l_zero: grid.adjoints.l_zero,
    };
    ctx.json("focs.json", &summary)
}

pub fn verify_focs(ctx: &mut Ctx) -> Result<Status> {
    let eq = ctx.solve()?;
    let penalties = ctx.exp.penalties.clone();
    let (grid, mc) = focs(ctx, &eq, &penalties)?;
    write_focs(ctx, &grid, &mc)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct OptimumReport<'a> {
    family: &'a ContractFamily,
    budget: usize,
    evaluations: usize,
    exhausted: bool,
    best: &'a PrincipalReport,
}

pub fn optimize(ctx: &mut Ctx, family: ContractFamily, budget: usize) -> Result<Status> {
    let opts = ctx.principal_options();
    let market = ctx.exp.market.clone();
    let search = optimize_contract(&family, &market, &ctx.exp.utility, budget, &opts)?;
    let names = family.param_names(market.k());
    ctx.csv("trace.csv", |p| {
        io::write_trace_csv(p, &names, &search.trace)
    })?;
    ctx.json(
        "optimum.json",
        &OptimumReport {
            family: &family,
            budget,
            evaluations: search.trace.len(),
            exhausted: search.exhausted,
            best: &search.best,
        },
    )?;
    let eq = solve_equilibrium(&market, &search.best.contracts, &ctx.exp.equilibrium)?;
    let (grid, mc) = focs(ctx, &eq, &search.best.contracts)?;
    write_focs(ctx, &grid, &mc)?;
    if search.exhausted {
        eprintln!("warning: budget of {budget} equilibrium solves exhausted; reporting the best member so far");
    }
    Ok(Status::Ok)
}
