//! Domain types, parameter validation, the penalty and utility families, and
//! the η/υ weights every other module consumes.

pub(crate) mod config;
mod penalty;
mod utility;

pub use config::{
    validate_config, Baseline, EtaWeights, InitialLaw, MarketConfig, StateGrid,
    SubPopulationParams, ValidationReport, Violation,
};
pub use penalty::{admissibility_check, AdmissibilityReport, Penalty, PenaltySpec, PenaltyValue};
pub use utility::{UtilitySpec, UtilityValue};
