use serde::{Deserialize, Serialize};

/// Principal's utility U_P: non-decreasing, convex, with U′ of at most linear growth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilitySpec {
    #[default]
    Identity,
    /// U(x) = x + κ·max(x, 0)².
    ConvexHinge { kappa: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityValue {
    pub value: f64,
    pub slope: f64,
}

impl UtilitySpec {
    pub fn eval(&self, x: f64) -> UtilityValue {
        match *self {
            UtilitySpec::Identity => UtilityValue {
                value: x,
                slope: 1.0,
            },
            UtilitySpec::ConvexHinge { kappa } => {
                let pos = x.max(0.0);
                UtilityValue {
                    value: x + kappa * pos * pos,
                    slope: 1.0 + 2.0 * kappa * pos,
                }
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).value
    }

    pub fn slope(&self, x: f64) -> f64 {
        self.eval(x).slope
    }

    pub fn validate(&self) -> super::ValidationReport {
        let mut r = super::ValidationReport::default();
        if let UtilitySpec::ConvexHinge { kappa } = *self {
            if !(kappa >= 0.0 && kappa.is_finite()) {
                r.push("utility.kappa", "must be >= 0");
            }
        }
        r
    }
}
