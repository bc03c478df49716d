//! Uncertainty quantification for buoyancy-driven flow in a differentially
//! heated cube.

pub mod cli;
pub mod config;
pub mod dnn;
pub mod grid;
pub mod pce;
pub mod sampling;
pub mod solver;
pub mod uq;
