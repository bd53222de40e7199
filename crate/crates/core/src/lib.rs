//! Finite-N moments of transition strength densities for embedded Gaussian
//! unitary ensembles, with an exact Wick-contraction oracle and a Monte Carlo
//! cross-check.

pub mod analytic;
pub mod combinat;
pub mod ensembles;
pub mod fock;
pub mod montecarlo;
pub mod oracle;
