//! Solver and verification suite for a degenerate stochastic control
//! problem arising from a contract-design model: controlled path
//! simulation, a regularized grid solver for the dynamic-programming
//! equation, policy extraction, and numerical checks of the structural
//! results (well-posedness bounds, martingale and tail estimates,
//! dynamic-programming and viscosity-solution properties).

pub mod config;
pub mod constants;
pub mod dpp;
pub mod hjb;
pub mod model;
pub mod sde;
pub mod viscosity;
