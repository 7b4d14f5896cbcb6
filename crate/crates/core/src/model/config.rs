use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Deterministic baseline generation rate h^k(t), piecewise constant on the
/// time grid (one value per step interval).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Baseline {
    Constant(f64),
    Piecewise(Vec<f64>),
}

impl Baseline {
    /// Rate on the interval `[t_n, t_{n+1})`; the last value is held beyond the end.
    pub fn at_step(&self, n: usize) -> f64 {
        match self {
            Baseline::Constant(h) => *h,
            Baseline::Piecewise(v) => v[n.min(v.len() - 1)],
        }
    }

    /// Rate at continuous time `t` for a grid with step `dt`.
    pub fn at_time(&self, t: f64, dt: f64) -> f64 {
        match self {
            Baseline::Constant(h) => *h,
            Baseline::Piecewise(_) => self.at_step((t / dt).floor().max(0.0) as usize),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Baseline::Constant(h) => std::slice::from_ref(h),
            Baseline::Piecewise(v) => v,
        }
    }
}

/// Law of the initial inventory ξ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLaw {
    Normal { mean: f64, sd: f64 },
    PointMass(f64),
}

impl InitialLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            InitialLaw::Normal { mean, .. } => mean,
            InitialLaw::PointMass(x) => x,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            InitialLaw::Normal { sd, .. } => sd * sd,
            InitialLaw::PointMass(_) => 0.0,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            InitialLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            InitialLaw::PointMass(x) => x,
        }
    }

    /// Probability weights of the law on the nodes `xs`, summing to one.
    /// Normal laws use the density at the nodes; a point mass is split
    /// linearly between its two neighbouring nodes.
    pub fn grid_weights(&self, xs: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; xs.len()];
        match *self {
            InitialLaw::Normal { mean, sd } if sd > 0.0 => {
                for (wj, x) in w.iter_mut().zip(xs) {
                    let z = (x - mean) / sd;
                    *wj = (-0.5 * z * z).exp();
                }
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= total);
            }
            law => {
                let x0 = law.mean();
                let n = xs.len();
                let dx = xs[1] - xs[0];
                let pos = ((x0 - xs[0]) / dx).clamp(0.0, (n - 1) as f64);
                let j = (pos.floor() as usize).min(n - 2);
                let f = pos - j as f64;
                w[j] = 1.0 - f;
                w[j + 1] += f;
            }
        }
        w
    }
}

/// Parameters of one sub-population k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubPopulationParams {
    /// Generation-cost coefficient ζ^k.
    pub zeta: f64,
    /// Trading-friction coefficient γ^k.
    pub gamma: f64,
    /// Capacity-expansion cost coefficient β^k.
    pub beta: f64,
    /// Generation volatility σ^k.
    pub sigma: f64,
    /// Baseline generation rate h^k(t).
    pub baseline: Baseline,
    /// Population weight π_k.
    pub pi: f64,
    /// Principal's valuation λ^k of a terminal certificate.
    pub lambda_weight: f64,
    pub initial_inventory: InitialLaw,
}

impl SubPopulationParams {
    /// υ^k = 1/γ^k + 1/ζ^k.
    pub fn upsilon(&self) -> f64 {
        1.0 / self.gamma + 1.0 / self.zeta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub horizon: f64,
    pub time_steps: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub na: usize,
    pub subpopulations: Vec<SubPopulationParams>,
    pub reservation_cost: f64,
    pub mc_paths: usize,
    pub rng_seed: u64,
}

impl MarketConfig {
    pub fn grid(&self) -> StateGrid {
        StateGrid {
            horizon: self.horizon,
            nt: self.time_steps,
            x_min: self.x_min,
            x_max: self.x_max,
            nx: self.nx,
            a_min: self.a_min,
            a_max: self.a_max,
            na: self.na,
        }
    }

    pub fn k(&self) -> usize {
        self.subpopulations.len()
    }

    pub fn eta_weights(&self) -> EtaWeights {
        EtaWeights::new(&self.subpopulations)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_config(self)
    }
}

/// Uniform (t, x, a) grid. Time has `nt + 1` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub horizon: f64,
    pub nt: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub na: usize,
}

impl StateGrid {
    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }
    pub fn da(&self) -> f64 {
        (self.a_max - self.a_min) / (self.na - 1) as f64
    }
    pub fn t(&self, n: usize) -> f64 {
        if n == self.nt {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }
    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }
    pub fn a(&self, l: usize) -> f64 {
        self.a_min + l as f64 * self.da()
    }
    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|j| self.x(j)).collect()
    }
    pub fn times(&self) -> Vec<f64> {
        (0..=self.nt).map(|n| self.t(n)).collect()
    }
    /// Nodes per time slice.
    pub fn slice_len(&self) -> usize {
        self.nx * self.na
    }
    /// Flat index of node (n, j, l); x varies fastest.
    #[inline]
    pub fn idx(&self, n: usize, j: usize, l: usize) -> usize {
        (n * self.na + l) * self.nx + j
    }
    /// Same grid with every spacing halved.
    pub fn refined(&self) -> StateGrid {
        StateGrid {
            nt: self.nt * 2,
            nx: (self.nx - 1) * 2 + 1,
            na: (self.na - 1) * 2 + 1,
            ..*self
        }
    }
}

/// η_k = π_k/γ^k, η = Σ η_k, υ^k = 1/γ^k + 1/ζ^k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaWeights {
    pub eta_k: Vec<f64>,
    pub eta: f64,
    pub upsilon_k: Vec<f64>,
}

impl EtaWeights {
    pub fn new(pops: &[SubPopulationParams]) -> Self {
        let eta_k: Vec<f64> = pops.iter().map(|p| p.pi / p.gamma).collect();
        let eta = eta_k.iter().sum();
        let upsilon_k = pops.iter().map(SubPopulationParams::upsilon).collect();
        EtaWeights {
            eta_k,
            eta,
            upsilon_k,
        }
    }

    /// Σ_k η_k λ_k / η for per-population slopes λ_k.
    pub fn weighted_price(&self, slopes: &[f64]) -> f64 {
        self.eta_k
            .iter()
            .zip(slopes)
            .map(|(e, l)| e * l)
            .sum::<f64>()
            / self.eta
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// JSON-style path of the offending field, e.g. `subpopulations[0].gamma`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every invariant of [`MarketConfig`] and [`SubPopulationParams`];
/// all violations are collected rather than stopping at the first.
pub fn validate_config(config: &MarketConfig) -> ValidationReport {
    let mut r = ValidationReport::default();
    if !(config.horizon > 0.0 && config.horizon.is_finite()) {
        r.push("horizon", "must be > 0");
    }
    for (name, n) in [
        ("time_steps", config.time_steps),
        ("nx", config.nx),
        ("na", config.na),
    ] {
        if n < 2 {
            r.push(name, "must be >= 2");
        }
    }
    if !(config.x_min < config.x_max) {
        r.push("x_max", "must exceed x_min");
    }
    if config.a_min != 0.0 {
        r.push("a_min", "must be 0 (initial capacity is a point mass at 0)");
    }
    if !(config.a_max > config.a_min) {
        r.push("a_max", "must exceed a_min");
    }
    if config.mc_paths == 0 {
        r.push("mc_paths", "must be >= 1");
    }
    if !config.reservation_cost.is_finite() {
        r.push("reservation_cost", "must be finite");
    }
    if config.subpopulations.is_empty() {
        r.push("subpopulations", "at least one sub-population is required");
    }
    for (k, p) in config.subpopulations.iter().enumerate() {
        let path = |f: &str| format!("subpopulations[{k}].{f}");
        for (name, v) in [("zeta", p.zeta), ("gamma", p.gamma), ("beta", p.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                r.push(path(name), "must be > 0");
            }
        }
        if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
            r.push(path("sigma"), "must be >= 0");
        }
        if !(p.pi > 0.0 && p.pi < 1.0 || (p.pi == 1.0 && config.subpopulations.len() == 1)) {
            r.push(path("pi"), "must lie in (0, 1)");
        }
        if !(p.lambda_weight >= 0.0 && p.lambda_weight.is_finite()) {
            r.push(path("lambda_weight"), "must be >= 0");
        }
        let hv = p.baseline.values();
        if hv.is_empty() || hv.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
            r.push(path("baseline"), "must be finite and >= 0");
        }
        if let Baseline::Piecewise(v) = &p.baseline {
            if v.len() != config.time_steps {
                r.push(
                    path("baseline"),
                    format!(
                        "piecewise baseline needs {} values, got {}",
                        config.time_steps,
                        v.len()
                    ),
                );
            }
        }
        match p.initial_inventory {
            InitialLaw::Normal { mean, sd } => {
                if !mean.is_finite() || !(sd >= 0.0 && sd.is_finite()) {
                    r.push(
                        path("initial_inventory"),
                        "normal law needs finite mean and sd >= 0",
                    );
                }
            }
            InitialLaw::PointMass(x) => {
                if !x.is_finite() {
                    r.push(path("initial_inventory"), "point mass must be finite");
                }
            }
        }
    }
    if !config.subpopulations.is_empty() {
        let total: f64 = config.subpopulations.iter().map(|p| p.pi).sum();
        if (total - 1.0).abs() > 1e-12 {
            r.push(
                "subpopulations[*].pi",
                format!("population weights sum {} ≠ 1", fmt_short(total)),
            );
        }
    }
    r
}

fn fmt_short(x: f64) -> String {
    let s = format!("{x:.10}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn pop(zeta: f64, gamma: f64, pi: f64, lambda: f64) -> SubPopulationParams {
        SubPopulationParams {
            zeta,
            gamma,
            beta: 1.0,
            sigma: 0.1,
            baseline: Baseline::Constant(0.5),
            pi,
            lambda_weight: lambda,
            initial_inventory: InitialLaw::Normal { mean: 0.0, sd: 0.1 },
        }
    }

    pub(crate) fn config(pops: Vec<SubPopulationParams>) -> MarketConfig {
        MarketConfig {
            horizon: 1.0,
            time_steps: 10,
            x_min: -1.0,
            x_max: 3.0,
            nx: 41,
            a_min: 0.0,
            a_max: 1.0,
            na: 11,
            subpopulations: pops,
            reservation_cost: 0.0,
            mc_paths: 100,
            rng_seed: 1,
        }
    }

    #[test]
    fn valid_two_population_config_passes() {
        let c = config(vec![pop(1.0, 1.0, 0.5, 1.0), pop(2.0, 2.0, 0.5, 0.5)]);
        assert!(validate_config(&c).is_ok());
    }

    #[test]
    fn weights_not_summing_to_one_fail() {
        let c = config(vec![pop(1.0, 1.0, 0.6, 1.0), pop(2.0, 2.0, 0.6, 0.5)]);
        let r = validate_config(&c);
        assert!(!r.is_ok());
        assert!(r
            .violations
            .iter()
            .any(|v| v.message == "population weights sum 1.2 ≠ 1"));
    }

    #[test]
    fn zero_zeta_rejected_with_path() {
        let c = config(vec![pop(0.0, 1.0, 0.5, 1.0), pop(1.0, 2.0, 0.5, 0.5)]);
        let r = validate_config(&c);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(
            r.violations[0].to_string(),
            "subpopulations[0].zeta: must be > 0"
        );
    }

    #[test]
    fn all_violations_reported() {
        let mut c = config(vec![pop(0.0, 0.0, 0.5, 1.0), pop(1.0, 2.0, 0.5, 0.5)]);
        c.nx = 1;
        c.a_min = 0.5;
        let r = validate_config(&c);
        assert_eq!(r.violations.len(), 4, "{r}");
    }

    #[test]
    fn eta_weights_reference() {
        let pops = vec![pop(1.0, 1.0, 0.5, 1.0), pop(2.0, 2.0, 0.5, 0.5)];
        let w = EtaWeights::new(&pops);
        assert_eq!(w.eta_k, vec![0.5, 0.25]);
        assert_eq!(w.eta, 0.75);
        assert_eq!(w.upsilon_k, vec![2.0, 1.0]);
        assert!((w.weighted_price(&[1.0, 0.5]) - 0.625 / 0.75).abs() < 1e-15);
    }

    #[test]
    fn eta_weights_single_population() {
        let w = EtaWeights::new(&[pop(1.0, 1.0, 1.0, 1.0)]);
        assert_eq!(w.eta_k, vec![1.0]);
        assert_eq!(w.eta, 1.0);
    }

    #[test]
    fn grid_weights_reproduce_normal_moments() {
        let law = InitialLaw::Normal {
            mean: 0.13,
            sd: 0.1,
        };
        let xs: Vec<f64> = (0..401).map(|j| -1.0 + j as f64 * 0.01).collect();
        let w = law.grid_weights(&xs);
        let m: f64 = w.iter().zip(&xs).map(|(w, x)| w * x).sum();
        let v: f64 = w.iter().zip(&xs).map(|(w, x)| w * (x - m).powi(2)).sum();
        assert!((m - 0.13).abs() < 1e-12);
        assert!((v - 0.01).abs() < 1e-12);
    }

    #[test]
    fn point_mass_weights_preserve_mean() {
        let xs: Vec<f64> = (0..11).map(|j| j as f64 * 0.1).collect();
        let w = InitialLaw::PointMass(0.25).grid_weights(&xs);
        let m: f64 = w.iter().zip(&xs).map(|(w, x)| w * x).sum();
        assert!((m - 0.25).abs() < 1e-14);
        assert_eq!(w.iter().filter(|v| **v > 0.0).count(), 2);
    }
}
