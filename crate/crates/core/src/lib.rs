//! Valuation of collateralized, defaultable bilateral contracts under
//! differential funding, repo and collateral rates.

pub mod contracts;
pub mod error;
pub mod funding;
pub mod linear;
pub mod market;
pub mod nonlinear;
pub mod oracles;
pub mod picard;
pub mod problem;
pub mod regression;
pub mod report;
pub mod scenario;
pub mod simulation;
pub mod verify;

pub use error::{Result, XvaError};
