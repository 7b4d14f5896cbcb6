use serde::{Deserialize, Serialize};

/// Terminal non-compliance penalty C^k(x) of one sub-population.
///
/// JSON form: `{"kind": "softplus_hockey", "P": 1.0, "R": 1.0, "epsilon": 0.2, "intercept": 0.0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltySpec {
    /// C(x) = −slope·x + intercept.
    Linear {
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    /// C(x) = ½·P·(x − R)² + intercept.
    Quadratic {
        #[serde(rename = "P")]
        curvature: f64,
        #[serde(rename = "R")]
        target: f64,
        #[serde(default)]
        intercept: f64,
    },
    /// C(x) = P·ε·log(1 + exp((R − x)/ε)) + intercept, a smoothed P·(R − x)₊.
    SoftplusHockey {
        #[serde(rename = "P")]
        rate: f64,
        #[serde(rename = "R")]
        requirement: f64,
        epsilon: f64,
        #[serde(default)]
        intercept: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyValue {
    pub value: f64,
    pub slope: f64,
    pub curvature: f64,
}

/// Anything that can be evaluated as a terminal penalty. [`PenaltySpec`] is
/// the production implementation; tests inject others.
pub trait Penalty {
    fn eval(&self, x: f64) -> PenaltyValue;
}

impl Penalty for PenaltySpec {
    fn eval(&self, x: f64) -> PenaltyValue {
        match *self {
            PenaltySpec::Linear { slope, intercept } => PenaltyValue {
                value: -slope * x + intercept,
                slope: -slope,
                curvature: 0.0,
            },
            PenaltySpec::Quadratic {
                curvature,
                target,
                intercept,
            } => PenaltyValue {
                value: 0.5 * curvature * (x - target).powi(2) + intercept,
                slope: curvature * (x - target),
                curvature,
            },
            PenaltySpec::SoftplusHockey {
                rate,
                requirement,
                epsilon,
                intercept,
            } => {
                let z = (requirement - x) / epsilon;
                let sig = sigmoid(z);
                PenaltyValue {
                    value: rate * epsilon * softplus(z) + intercept,
                    slope: -rate * sig,
                    curvature: rate / epsilon * sig * (1.0 - sig),
                }
            }
        }
    }
}

impl<F: Fn(f64) -> PenaltyValue> Penalty for F {
    fn eval(&self, x: f64) -> PenaltyValue {
        self(x)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl PenaltySpec {
    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).value
    }

    pub fn slope(&self, x: f64) -> f64 {
        self.eval(x).slope
    }

    pub fn intercept(&self) -> f64 {
        match *self {
            PenaltySpec::Linear { intercept, .. }
            | PenaltySpec::Quadratic { intercept, .. }
            | PenaltySpec::SoftplusHockey { intercept, .. } => intercept,
        }
    }

    pub fn with_intercept(mut self, c: f64) -> Self {
        match &mut self {
            PenaltySpec::Linear { intercept, .. }
            | PenaltySpec::Quadratic { intercept, .. }
            | PenaltySpec::SoftplusHockey { intercept, .. } => *intercept = c,
        }
        self
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PenaltySpec::Linear { .. } => "linear",
            PenaltySpec::Quadratic { .. } => "quadratic",
            PenaltySpec::SoftplusHockey { .. } => "softplus_hockey",
        }
    }

    /// Parameter-level checks (sign constraints) with JSON-style paths.
    pub fn validate(&self, path: &str) -> super::ValidationReport {
        let mut r = super::ValidationReport::default();
        match *self {
            PenaltySpec::Linear { slope, intercept } => {
                if !(slope >= 0.0 && slope.is_finite()) {
                    r.push(format!("{path}.slope"), "must be >= 0");
                }
                if !intercept.is_finite() {
                    r.push(format!("{path}.intercept"), "must be finite");
                }
            }
            PenaltySpec::Quadratic {
                curvature,
                target,
                intercept,
            } => {
                if !(curvature > 0.0 && curvature.is_finite()) {
                    r.push(format!("{path}.P"), "must be > 0");
                }
                if !(target.is_finite() && intercept.is_finite()) {
                    r.push(format!("{path}.R"), "must be finite");
                }
            }
            PenaltySpec::SoftplusHockey {
                rate,
                requirement,
                epsilon,
                intercept,
            } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    r.push(format!("{path}.P"), "must be > 0");
                }
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    r.push(format!("{path}.epsilon"), "must be > 0");
                }
                if !(requirement.is_finite() && intercept.is_finite()) {
                    r.push(format!("{path}.R"), "must be finite");
                }
            }
        }
        r
    }
}

/// Numerical admissibility of a penalty on a grid of inventories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    /// Largest decrease of the slope between consecutive nodes (0 when convex).
    pub convexity_violation: f64,
    /// Largest positive slope (0 when C is non-increasing).
    pub monotonicity_violation: f64,
    pub max_abs_slope: f64,
    /// Finite-difference Lipschitz estimate of the slope.
    pub slope_lipschitz: f64,
    pub notes: Vec<String>,
}

impl AdmissibilityReport {
    pub fn is_convex(&self) -> bool {
        self.convexity_violation <= CONVEXITY_TOL
    }

    pub fn is_admissible(&self) -> bool {
        self.is_convex()
            && self.monotonicity_violation <= 0.0
            && self.max_abs_slope.is_finite()
            && self.slope_lipschitz.is_finite()
    }
}

const CONVEXITY_TOL: f64 = 1e-12;

/// Checks convexity, C′ ≤ 0, boundedness of C′ and the Lipschitz constant of
/// C′ on the sorted nodes `xs`. Violations are reported, never raised.
pub fn admissibility_check<P: Penalty + ?Sized>(penalty: &P, xs: &[f64]) -> AdmissibilityReport {
    let slopes: Vec<f64> = xs.iter().map(|&x| penalty.eval(x).slope).collect();
    let mut convexity_violation: f64 = 0.0;
    let mut slope_lipschitz: f64 = 0.0;
    for i in 1..xs.len() {
        let ds = slopes[i] - slopes[i - 1];
        convexity_violation = convexity_violation.max(-ds);
        slope_lipschitz = slope_lipschitz.max(ds.abs() / (xs[i] - xs[i - 1]));
    }
    let monotonicity_violation = slopes.iter().fold(0.0f64, |m, s| m.max(*s));
    let max_abs_slope = slopes.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let mut notes = Vec::new();
    if monotonicity_violation > 0.0 {
        notes.push(format!(
            "slope reaches {monotonicity_violation:.6} > 0 on the grid: C is not non-increasing there"
        ));
    }
    if convexity_violation > CONVEXITY_TOL {
        notes.push(format!(
            "slope decreases by up to {convexity_violation:.6}: C is not convex"
        ));
    }
    AdmissibilityReport {
        convexity_violation,
        monotonicity_violation,
        max_abs_slope,
        slope_lipschitz,
        notes,
    }
}
