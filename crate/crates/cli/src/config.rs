//! Experiment configuration files.
//!
//! A config is a JSON object with the market parameters at the top level, a
//! `penalty` per sub-population, an optional `utility` and an optional
//! `solver` block. See `docs/config.md` for the schema.

use std::path::Path;

use rec_mfg_core::hjb::TimeScheme;
use rec_mfg_core::mfg::EquilibriumOptions;
use rec_mfg_core::model::{Baseline, ValidationReport};
use rec_mfg_core::{InitialLaw, MarketConfig, PenaltySpec, SubPopulationParams, UtilitySpec};
use serde::Deserialize;

pub const DEFAULT_MC_PATHS: usize = 20_000;
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSubPopulation {
    zeta: f64,
    gamma: f64,
    beta: f64,
    sigma: f64,
    baseline: Baseline,
    pi: f64,
    lambda_weight: f64,
    initial_inventory: InitialLaw,
    penalty: Option<PenaltySpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    damping: Option<f64>,
    tol: Option<f64>,
    max_outer: Option<usize>,
    time_scheme: Option<TimeScheme>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    horizon: f64,
    time_steps: usize,
    x_min: f64,
    x_max: f64,
    nx: usize,
    a_min: Option<f64>,
    a_max: f64,
    na: usize,
    subpopulations: Vec<RawSubPopulation>,
    reservation_cost: Option<f64>,
    mc_paths: Option<usize>,
    rng_seed: Option<u64>,
    utility: Option<UtilitySpec>,
    solver: Option<RawSolver>,
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub market: MarketConfig,
    pub penalties: Vec<PenaltySpec>,
    pub utility: UtilitySpec,
    pub equilibrium: EquilibriumOptions,
    /// Optional fields that were filled in, as `"field = value"`.
    pub defaults_applied: Vec<String>,
}

#[derive(Debug)]
pub enum ConfigError {
    Read(String),
    Parse(String),
    Invalid(ValidationReport),
}

impl ConfigError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ConfigError::Read(_) | ConfigError::Parse(_) => 2,
            ConfigError::Invalid(_) => 3,
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read(m) => write!(f, "cannot read config: {m}"),
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(r) => write!(f, "{r}"),
        }
    }
}

pub fn load(path: &Path) -> Result<(Experiment, Vec<u8>), ConfigError> {
    let bytes =
        std::fs::read(path).map_err(|e| ConfigError::Read(format!("{}: {e}", path.display())))?;
    let exp = parse(&bytes)?;
    Ok((exp, bytes))
}

pub fn parse(bytes: &[u8]) -> Result<Experiment, ConfigError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            ConfigError::Parse(e.into_inner().to_string())
        } else {
            ConfigError::Parse(format!("{path}: {}", e.into_inner()))
        }
    })?;
    build(raw)
}

fn build(raw: RawConfig) -> Result<Experiment, ConfigError> {
    let mut defaults = Vec::new();
    let mut note = |field: &str, value: String| defaults.push(format!("{field} = {value}"));
    let a_min = raw.a_min.unwrap_or_else(|| {
        note("a_min", "0".into());
        0.0
    });
    let reservation_cost = raw.reservation_cost.unwrap_or_else(|| {
        note("reservation_cost", "0".into());
        0.0
    });
    let mc_paths = raw.mc_paths.unwrap_or_else(|| {
        note("mc_paths", DEFAULT_MC_PATHS.to_string());
        DEFAULT_MC_PATHS
    });
    let rng_seed = raw.rng_seed.unwrap_or_else(|| {
        note("rng_seed", DEFAULT_SEED.to_string());
        DEFAULT_SEED
    });
    let utility = raw.utility.unwrap_or_else(|| {
        note("utility", "identity".into());
        UtilitySpec::Identity
    });

    let mut penalties = Vec::new();
    let mut subpopulations = Vec::new();
    for (k, p) in raw.subpopulations.into_iter().enumerate() {
        let penalty = p.penalty.unwrap_or_else(|| {
            note(
                &format!("subpopulations[{k}].penalty"),
                format!("linear with slope lambda_weight ({})", p.lambda_weight),
            );
            PenaltySpec::Linear {
                slope: p.lambda_weight,
                intercept: 0.0,
            }
        });
        penalties.push(penalty);
        subpopulations.push(SubPopulationParams {
            zeta: p.zeta,
            gamma: p.gamma,
            beta: p.beta,
            sigma: p.sigma,
            baseline: p.baseline,
            pi: p.pi,
            lambda_weight: p.lambda_weight,
            initial_inventory: p.initial_inventory,
        });
    }

    let mut equilibrium = EquilibriumOptions::default();
    let solver = raw.solver.unwrap_or_default();
    if let Some(d) = solver.damping {
        equilibrium.damping = d;
    }
    if let Some(t) = solver.tol {
        equilibrium.tol = t;
    }
    if let Some(m) = solver.max_outer {
        equilibrium.max_outer = m;
    }
    if let Some(s) = solver.time_scheme {
        equilibrium.solver.scheme = s;
    }

    let market = MarketConfig {
        horizon: raw.horizon,
        time_steps: raw.time_steps,
        x_min: raw.x_min,
        x_max: raw.x_max,
        nx: raw.nx,
        a_min,
        a_max: raw.a_max,
        na: raw.na,
        subpopulations,
        reservation_cost,
        mc_paths,
        rng_seed,
    };

    let mut report = market.validate();
    for (k, pen) in penalties.iter().enumerate() {
        report.merge(pen.validate(&format!("subpopulations[{k}].penalty")));
    }
    report.merge(utility.validate());
    if !(equilibrium.damping > 0.0 && equilibrium.damping <= 1.0) {
        report.push("solver.damping", "must lie in (0, 1]");
    }
    if !(equilibrium.tol > 0.0 && equilibrium.tol.is_finite()) {
        report.push("solver.tol", "must be > 0");
    }
    if equilibrium.max_outer == 0 {
        report.push("solver.max_outer", "must be >= 1");
    }
    if !report.is_ok() {
        return Err(ConfigError::Invalid(report));
    }
    Ok(Experiment {
        market,
        penalties,
        utility,
        equilibrium,
        defaults_applied: defaults,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "horizon": 1.0, "time_steps": 10,
        "x_min": -1.0, "x_max": 2.0, "nx": 31, "a_max": 0.5, "na": 6,
        "subpopulations": [{
            "zeta": 1.0, "gamma": 1.0, "beta": 1.0, "sigma": 0.1, "baseline": 0.5,
            "pi": 1.0, "lambda_weight": 1.0,
            "initial_inventory": {"normal": {"mean": 0.0, "sd": 0.1}}
        }]
    }"#;

    #[test]
    fn defaults_are_recorded() {
        let e = parse(MINIMAL.as_bytes()).unwrap();
        assert_eq!(e.market.mc_paths, DEFAULT_MC_PATHS);
        assert!(e.defaults_applied.contains(&"mc_paths = 20000".to_string()));
        assert_eq!(
            e.penalties[0],
            PenaltySpec::Linear {
                slope: 1.0,
                intercept: 0.0
            }
        );
        assert_eq!(e.utility, UtilitySpec::Identity);
    }

    #[test]
    fn tagged_penalties_and_utilities_parse() {
        let text = MINIMAL
            .replace(
                r#""lambda_weight": 1.0,"#,
                r#""lambda_weight": 1.0, "penalty": {"kind": "softplus_hockey", "P": 1, "R": 1.2, "epsilon": 0.2},"#,
            )
            .replace(r#""na": 6,"#, r#""na": 6, "utility": {"kind": "convex_hinge", "kappa": 0.5},"#);
        let e = parse(text.as_bytes()).unwrap();
        assert_eq!(
            e.penalties[0],
            PenaltySpec::SoftplusHockey {
                rate: 1.0,
                requirement: 1.2,
                epsilon: 0.2,
                intercept: 0.0
            }
        );
        assert_eq!(e.utility, UtilitySpec::ConvexHinge { kappa: 0.5 });
    }

    #[test]
    fn every_violation_is_reported() {
        let text = MINIMAL
            .replace(r#""gamma": 1.0"#, r#""gamma": 0"#)
            .replace(r#""beta": 1.0"#, r#""beta": -1"#)
            .replace(r#""horizon": 1.0"#, r#""horizon": 0"#);
        let err = parse(text.as_bytes()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(
            msg.contains("subpopulations[0].gamma: must be > 0"),
            "{msg}"
        );
        assert!(msg.contains("subpopulations[0].beta: must be > 0"), "{msg}");
        assert!(msg.contains("horizon: must be > 0"), "{msg}");
    }

    #[test]
    fn type_errors_name_their_path() {
        let text = MINIMAL.replace(r#""sigma": 0.1"#, r#""sigma": "high""#);
        let err = parse(text.as_bytes()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("subpopulations[0].sigma"), "{err}");
        assert_eq!(parse(b"{ not json").unwrap_err().exit_code(), 2);
        let unknown = MINIMAL.replace(r#""nx": 31"#, r#""nx": 31, "nz": 3"#);
        assert_eq!(parse(unknown.as_bytes()).unwrap_err().exit_code(), 2);
    }
}
