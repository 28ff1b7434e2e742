//! Perfect Bayesian equilibria of finite-horizon linear-quadratic Gaussian
//! games with private noisy signals of a common Gaussian state.

pub mod cli;
pub mod error;
pub mod filters;
pub mod game;
pub mod instances;
pub mod layout;
pub mod linalg;
pub mod profile;
pub mod simulation;
pub mod solver;
pub mod state_evolution;
pub mod verification;

pub use error::{Error, Result};
pub use game::GameSpec;
pub use profile::{AffineStrategy, StrategyProfile};
