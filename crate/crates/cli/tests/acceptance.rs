//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p rec-mfg-cli --test acceptance` runs everything; pass
//! criterion ids (`c1 c4 ...`) after `--` to run a subset.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rec_mfg_cli::config::{self, Experiment};
use rec_mfg_core::exec::Exec;
use rec_mfg_core::lq;
use rec_mfg_core::mfg::{adjoint_drift_check, solve_equilibrium, MfgEquilibrium};
use rec_mfg_core::population::{
    clearing_scaling, nash_deviation_gain, simulate_population, Assignment, Perturbation,
};
use rec_mfg_core::principal::{
    apply_intercepts, evaluate_contract, foc_residual, optimize_contract, probe_family,
    reservation_shift, sample_representatives, ContractFamily, FocSource, PrincipalOptions,
};
use rec_mfg_core::{PenaltySpec, UtilitySpec};

// Tolerances.
const C1_YX: f64 = 1e-6;
const C1_YA: f64 = 1e-5;
const C1_PRICE: f64 = 1e-6;
const C1_PRICE_VALUE: f64 = 0.83333;
const C1_PRICE_VALUE_TOL: f64 = 1e-5;
const C1_SECONDS: f64 = 30.0;
const C2_PRICE_DEVIATION: f64 = 1e-5;
const C3_CLEARING: f64 = 1e-5;
const C3_SLOPE: (f64, f64) = (-0.7, -0.3);
const C3_NS: [usize; 3] = [100, 400, 1600];
const C3_REPLICATIONS: usize = 16;
const C3_SECONDS: f64 = 120.0;
const C4_RELATIVE: f64 = 1e-3;
const C4_ORDER: f64 = 0.8;
const C5_PATHS: usize = 20_000;
const C5_Z: f64 = 3.0;
const C5_FRACTION: f64 = 0.95;
const C6_ANALYTIC: f64 = 1e-8;
const C6_Z: f64 = 3.0;
const C6_FLOOR: f64 = 1e-8;
const C6_KAPPA: f64 = 0.5;
const C7_Z: f64 = 2.0;
const C7_BUDGET: usize = 60;
const C7_SECONDS: f64 = 1800.0;
const C8_Z: f64 = 2.0;
const C8_DELTA: f64 = 0.1;
const C8_REPLICATIONS: usize = 400;
const C8_RELATIVE: f64 = 0.2;
const C9_THREADS: [usize; 3] = [1, 2, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Experiment {
    let bytes = std::fs::read(configs_dir().join(name)).unwrap();
    config::parse(&bytes).unwrap()
}

fn solve(exp: &Experiment) -> MfgEquilibrium {
    solve_equilibrium(&exp.market, &exp.penalties, &exp.equilibrium).unwrap()
}

fn c1() -> Outcome {
    let exp = load("reference_k2_linear.json");
    let start = Instant::now();
    let eq = solve(&exp);
    let secs = start.elapsed().as_secs_f64();
    let closed = lq::linear_contract_solution(&exp.market);
    let (mut yx, mut ya) = (0.0f64, 0.0f64);
    for (sol, pop) in eq.feedbacks.iter().zip(&closed.populations) {
        let g = &sol.grid;
        for n in 0..=g.nt {
            let target_ya = pop.ya(g.t(n), closed.horizon);
            for l in 0..g.na {
                for j in 0..g.nx {
                    let (_, y, a) = sol.at(n, j, l);
                    yx = yx.max((y + pop.lambda).abs());
                    ya = ya.max((a - target_ya).abs());
                }
            }
        }
    }
    let price = eq
        .price
        .0
        .iter()
        .fold(0.0f64, |m, s| m.max((s - closed.price).abs()));
    let level = (closed.price - C1_PRICE_VALUE).abs();
    outcome(
        yx < C1_YX && ya < C1_YA && price < C1_PRICE && level < C1_PRICE_VALUE_TOL && secs < C1_SECONDS,
        format!(
            "sup|YX+λ| {yx:.2e} (<{C1_YX:.0e}), sup|YA+λ(T−t)| {ya:.2e} (<{C1_YA:.0e}), \
             sup|S−Σηλ/η| {price:.2e} (<{C1_PRICE:.0e}), S {:.6} vs {C1_PRICE_VALUE}, solve {secs:.1}s (<{C1_SECONDS}s)",
            closed.price
        ),
    )
}

fn c2(eq: &MfgEquilibrium) -> Outcome {
    let dev = eq.price.max_deviation_from_start();
    outcome(
        dev < C2_PRICE_DEVIATION,
        format!(
            "max_t|S_t−S_0| {dev:.2e} (<{C2_PRICE_DEVIATION:.0e}), S_0 {:.6}",
            eq.price.at(0)
        ),
    )
}

fn c3(exp: &Experiment, eq: &MfgEquilibrium, linear: &MfgEquilibrium) -> Outcome {
    let start = Instant::now();
    let r_soft = eq.max_clearing_residual();
    let r_lin = linear.max_clearing_residual();
    let s = clearing_scaling(
        eq,
        &exp.market,
        &C3_NS,
        C3_REPLICATIONS,
        exp.market.rng_seed,
        Exec::Parallel,
    );
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r_soft < C3_CLEARING
            && r_lin < C3_CLEARING
            && s.slope >= C3_SLOPE.0
            && s.slope <= C3_SLOPE.1
            && secs < C3_SECONDS,
        format!(
            "mean-field clearing softplus {r_soft:.2e}, linear {r_lin:.2e} (<{C3_CLEARING:.0e}); \
             finite-N residuals {:?} at N {:?}, log-log slope {:.3} in [{}, {}]; {secs:.1}s (<{C3_SECONDS}s)",
            s.max_residual.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>(),
            s.ns,
            s.slope,
            C3_SLOPE.0,
            C3_SLOPE.1
        ),
    )
}

fn lq_gap(exp: &Experiment) -> f64 {
    let eq = solve(exp);
    let (curvature, target) = match exp.penalties[0] {
        PenaltySpec::Quadratic {
            curvature, target, ..
        } => (curvature, target),
        _ => unreachable!(),
    };
    let m = &exp.market;
    let oracle = lq::riccati_solve(
        &m.subpopulations[0],
        curvature,
        target,
        m.horizon,
        10 * m.time_steps,
    )
    .unwrap();
    lq::compare_with_solver(&oracle, &eq.feedbacks[0], &lq::oracle_points(&oracle)).max_relative_gap
}

fn c4() -> Outcome {
    let fine = load("lq_k1.json");
    let mut coarse = fine.clone();
    coarse.market.time_steps /= 2;
    coarse.market.nx = (fine.market.nx - 1) / 2 + 1;
    coarse.market.na = (fine.market.na - 1) / 2 + 1;
    let g_fine = lq_gap(&fine);
    let g_coarse = lq_gap(&coarse);
    let order = (g_coarse / g_fine).log2();
    outcome(
        g_fine < C4_RELATIVE && order >= C4_ORDER,
        format!(
            "relative YX gap {g_fine:.2e} (<{C4_RELATIVE:.0e}) on nt {} nx {} na {}; half grid {g_coarse:.2e}; order {order:.2} (≥{C4_ORDER})",
            fine.market.time_steps, fine.market.nx, fine.market.na
        ),
    )
}

fn c5(exp: &Experiment, eq: &MfgEquilibrium) -> Outcome {
    let fractions: Vec<f64> = (0..exp.market.k())
        .map(|k| {
            let law = &exp.market.subpopulations[k].initial_inventory;
            adjoint_drift_check(
                &eq.feedbacks[k],
                law,
                C5_PATHS,
                exp.market.rng_seed,
                Exec::Parallel,
            )
            .fraction_within(C5_Z)
        })
        .collect();
    outcome(
        fractions.iter().all(|f| *f >= C5_FRACTION),
        format!(
            "{C5_PATHS} paths, fraction of steps with both drifts within {C5_Z} SE per k: {fractions:?} (≥{C5_FRACTION})"
        ),
    )
}

fn c6(linear_exp: &Experiment, linear: &MfgEquilibrium) -> Outcome {
    let m = &linear_exp.market;
    let contracts = reservation_shift(&linear_exp.penalties, linear, m, m.reservation_cost);
    let mut eq = linear.clone();
    apply_intercepts(&mut eq, &contracts);
    let linear = &eq;
    let sample = sample_representatives(
        linear,
        &contracts,
        m,
        m.mc_paths,
        m.rng_seed,
        true,
        Exec::Parallel,
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, u) in [
        ("identity", UtilitySpec::Identity),
        ("convex_hinge", UtilitySpec::ConvexHinge { kappa: C6_KAPPA }),
    ] {
        let grid = foc_residual(linear, &sample, &u, m, FocSource::Grid, Exec::Parallel).unwrap();
        let mc = foc_residual(
            linear,
            &sample,
            &u,
            m,
            FocSource::MonteCarlo,
            Exec::Parallel,
        )
        .unwrap();
        let (a, e) = (grid.max_abs(), mc.max_excess(C6_Z));
        pass &= a < C6_ANALYTIC && e < C6_FLOOR;
        parts.push(format!("{name} (M(0) {:.4}): analytic {a:.1e} (<{C6_ANALYTIC:.0e}), MC max(|r|−{C6_Z}SE) {e:.1e} (<{C6_FLOOR:.0e})", grid.adjoints.m[0]));
    }
    outcome(pass, parts.join("; "))
}

fn c7(exp: &Experiment) -> Outcome {
    let start = Instant::now();
    let m = &exp.market;
    let opts = PrincipalOptions {
        equilibrium: exp.equilibrium,
        ..PrincipalOptions::new(m)
    };
    let lambdas: Vec<f64> = m.subpopulations.iter().map(|p| p.lambda_weight).collect();
    let linear = ContractFamily::Linear.member(&lambdas, m).unwrap();
    let (lin, _) = evaluate_contract(m, &linear, &exp.utility, &opts).unwrap();
    let j_lin = lin.objective.value;
    let se_lin = lin.objective.se;

    let mut points = Vec::new();
    for p in [0.5, 1.0, 2.0] {
        for r in [0.5, 1.0, 1.5] {
            for e in [0.1, 0.2, 0.4] {
                points.push(vec![p, r, e]);
            }
        }
    }
    let family = ContractFamily::SoftplusShared;
    let mut worst_margin = f64::INFINITY;
    let mut failures = 0;
    let mut evaluated = 0;
    for r in probe_family(&family, &points, m, &exp.utility, &opts) {
        match r {
            Ok(r) => {
                evaluated += 1;
                let se = (r.objective.se.powi(2) + se_lin.powi(2)).sqrt();
                let margin = (r.objective.value + C7_Z * se - j_lin) / se;
                worst_margin = worst_margin.min(margin);
                if !(r.admissible && margin >= 0.0) {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let search = optimize_contract(&family, m, &exp.utility, C7_BUDGET, &opts).unwrap();
    let best = &search.best.objective;
    let se = (best.se.powi(2) + se_lin.powi(2)).sqrt();
    let nm_ok = best.value >= j_lin - C7_Z * se && search.best.admissible;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && evaluated == points.len() && nm_ok && lin.admissible && secs < C7_SECONDS,
        format!(
            "J^P linear {j_lin:.6} ± {se_lin:.1e}; grid {evaluated}/{} members, {failures} violations, \
             smallest (J_member + {C7_Z}SE − J_lin)/SE {worst_margin:.1}; Nelder–Mead best {:.6} ± {:.1e} at {:?} \
             after {} solves (exhausted {}); {secs:.0}s (<{C7_SECONDS}s)",
            points.len(),
            best.value,
            best.se,
            search.best.params,
            search.trace.len(),
            search.exhausted
        ),
    )
}

fn c8(exp: &Experiment, eq: &MfgEquilibrium, linear: &MfgEquilibrium) -> Outcome {
    let m = &exp.market;
    let run = simulate_population(eq, m, 10, m.rng_seed, Assignment::Exact, Exec::Parallel);
    let shifts = [
        Perturbation {
            g: C8_DELTA,
            ..Default::default()
        },
        Perturbation {
            g: -C8_DELTA,
            ..Default::default()
        },
        Perturbation {
            gamma: C8_DELTA,
            ..Default::default()
        },
        Perturbation {
            gamma: -C8_DELTA,
            ..Default::default()
        },
        Perturbation {
            gamma: C8_DELTA,
            gamma_along_sign: true,
            ..Default::default()
        },
        Perturbation {
            alpha: C8_DELTA,
            ..Default::default()
        },
        Perturbation {
            alpha: -C8_DELTA,
            ..Default::default()
        },
    ];
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut pass = true;
    let mut tested = 0;
    for i in [0usize, run.agents.len() - 1] {
        for s in &shifts {
            let r = nash_deviation_gain(eq, m, &run, i, s, C8_REPLICATIONS, Exec::Parallel);
            tested += 1;
            pass &= r.is_unprofitable(C8_Z);
            worst = worst.max(r.gain / r.se.max(f64::MIN_POSITIVE));
        }
    }
    let lin_run = simulate_population(linear, m, 10, m.rng_seed, Assignment::Exact, Exec::Parallel);
    let shift = Perturbation {
        g: C8_DELTA,
        ..Default::default()
    };
    let mut rel = Vec::new();
    for i in [0usize, lin_run.agents.len() - 1] {
        let r = nash_deviation_gain(
            linear,
            m,
            &lin_run,
            i,
            &shift,
            C8_REPLICATIONS,
            Exec::Parallel,
        );
        let zeta = m.subpopulations[r.k].zeta;
        let expected = 0.5 * zeta * C8_DELTA * C8_DELTA * m.horizon;
        let e = (-r.gain - expected).abs() / expected;
        pass &= e < C8_RELATIVE;
        rel.push(e);
    }
    outcome(
        pass,
        format!(
            "{tested} unilateral deviations, largest gain/SE {worst:.2} (≤{C8_Z}); \
             δ_g={C8_DELTA} loss vs (ζ/2)δ²T relative error {rel:.3?} (<{C8_RELATIVE})"
        ),
    )
}

fn hashes(dir: &Path) -> serde_json::Value {
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["outputs"].clone()
}

fn c9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("reference_k2.json");
    let cfg = cfg.to_str().unwrap();
    let runs: [(&str, &[&str]); 3] = [
        ("solve-mfg", &[]),
        ("simulate", &["-N", "400", "--seed", "7", "--dump-paths"]),
        ("verify-focs", &[]),
    ];
    let mut pass = true;
    let mut files = 0;
    for (sub, extra) in runs {
        let mut reference = None;
        for t in C9_THREADS {
            let out = dir.path().join(format!("{sub}-{t}"));
            let threads = t.to_string();
            let mut args = vec![
                "rec-mfg",
                sub,
                "-c",
                cfg,
                "--out",
                out.to_str().unwrap(),
                "--threads",
                &threads,
            ];
            args.extend_from_slice(extra);
            if rec_mfg_cli::run(args) != 0 {
                pass = false;
                continue;
            }
            let h = hashes(&out);
            match &reference {
                None => {
                    files += h.as_array().map_or(0, |a| a.len());
                    reference = Some(h);
                }
                Some(r) => pass &= *r == h,
            }
        }
    }
    outcome(
        pass,
        format!("{files} output files from solve-mfg, simulate and verify-focs hash identically with {C9_THREADS:?} threads"),
    )
}

fn main() {
    let selected: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();
    let wants = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);

    let reference = load("reference_k2.json");
    let linear_exp = load("reference_k2_linear.json");
    let need_eq = ["c2", "c3", "c5", "c8"].iter().any(|c| wants(c));
    let need_linear = ["c3", "c6", "c8"].iter().any(|c| wants(c));
    let softplus = need_eq.then(|| solve(&reference));
    let linear = need_linear.then(|| solve(&linear_exp));

    let criteria: Vec<(&str, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("c1", "linear-contract closed form", Box::new(c1)),
        (
            "c2",
            "price constancy",
            Box::new(|| c2(softplus.as_ref().unwrap())),
        ),
        (
            "c3",
            "market clearing",
            Box::new(|| {
                c3(
                    &reference,
                    softplus.as_ref().unwrap(),
                    linear.as_ref().unwrap(),
                )
            }),
        ),
        ("c4", "LQ oracle equivalence", Box::new(c4)),
        (
            "c5",
            "adjoint drift",
            Box::new(|| c5(&reference, softplus.as_ref().unwrap())),
        ),
        (
            "c6",
            "FOC vanishing at the linear contract",
            Box::new(|| c6(&linear_exp, linear.as_ref().unwrap())),
        ),
        (
            "c7",
            "linear contract beats softplus",
            Box::new(|| c7(&reference)),
        ),
        (
            "c8",
            "epsilon-Nash",
            Box::new(|| {
                c8(
                    &reference,
                    softplus.as_ref().unwrap(),
                    linear.as_ref().unwrap(),
                )
            }),
        ),
        ("c9", "determinism across thread counts", Box::new(c9)),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in &criteria {
        if !wants(id) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} {} {name} [{:.1}s]: {}",
            id.to_uppercase(),
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(*id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
