//! Stochastic optimal power flow and adaptive DC-voltage droop for hybrid
//! AC/MTDC grids.
//!
//! The pipeline runs bottom-up: [`wind`] turns point forecasts into Beta
//! laws, [`pce`] propagates them through the power flow of [`powerflow`] by
//! Galerkin projection, [`sopf`] optimizes the dispatch in coefficient space,
//! [`droop`] reads a droop gain off the first-order coefficients and
//! [`harness`] benchmarks it against fixed gains.

pub mod droop;
pub mod grid;
pub mod harness;
pub mod ipm;
pub mod pce;
pub mod powerflow;
pub mod sopf;
pub mod wind;

pub use grid::{builtin_testcase, load_network, NetworkModel};
