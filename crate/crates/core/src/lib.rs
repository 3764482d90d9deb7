//! Optimal harvesting and delayed renewal of a stochastic logistic
//! resource.
//!
//! The crate computes the value function of the impulse control problem
//! by backward induction over a locally consistent Markov-chain
//! approximation ([`solver`]), extracts the induced strategy and checks it
//! by forward Monte Carlo ([`policy_sim`]).

pub mod chain;
pub mod checks;
pub mod error;
pub mod impulse;
pub mod model;
pub mod oracle;
pub mod policy_sim;
pub mod solver;

pub use chain::{build_grid, GridOverrides, GridSpec, ValueField};
pub use error::{Error, Result};
pub use impulse::{PendingOrders, Schedule, Strategy};
pub use model::{ModelParams, State};

pub use solver::{solve, Region, RegionMap, Solution, SolverOptions};
pub use policy_sim::{simulate, Policy, SimConfig, SimReport};
pub use checks::{run_suite, CheckReport, SuiteConfig};
