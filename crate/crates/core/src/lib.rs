//! Simulation and verification toolkit for nearest-neighbour branching random
//! walks on `Z^d`: forward simulators, reflection couplings, exact oracles for
//! escape probabilities and mean fields, and the statistics that connect them.

pub mod cli;
pub mod config;
pub mod coupling;
pub mod lattice;
pub mod offspring;
pub mod oracle;
pub mod rng;
pub mod simulator;
pub mod stats;
