//! Mean-field equilibrium laboratory for single-period renewable energy
//! certificate (REC) markets.
//!
//! The crate solves the agents' mean-field Nash equilibrium for an arbitrary
//! admissible terminal penalty, checks it against closed-form LQ oracles and
//! finite-population simulation, and implements the regulator's contract
//! design layer on top of it.
//!
//! Module map:
//!
//! * [`model`]: parameters, validation, penalty and utility families, η/υ weights.
//! * [`hjb`]: backward finite-difference solver for one sub-population.
//! * [`mfg`]: forward mean-field pass and the price fixed point.
//! * [`lq`]: linear-contract closed form and the quadratic-penalty Riccati oracle.
//! * [`population`]: finite-N agent simulation and ε-Nash checks.
//! * [`principal`]: J^P, closed-form adjoints, first-order conditions, contract search.
//! * [`io`]: CSV/JSON persistence helpers.

pub mod error;
pub mod exec;
pub mod hjb;
pub mod io;
pub mod lq;
pub mod mfg;
pub mod model;
pub mod optim;
pub mod population;
pub mod principal;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use model::{
    EtaWeights, InitialLaw, MarketConfig, PenaltySpec, StateGrid, SubPopulationParams, UtilitySpec,
};
