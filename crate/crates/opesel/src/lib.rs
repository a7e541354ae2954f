//! Offline-RL model selection via off-policy evaluation on a simulated
//! sepsis-treatment environment: dataset generation, fitted Q iteration
//! candidate training, WIS / AM / FQE / WDR estimators, and ranking-based
//! policy selection with analytic ground truth.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod mdp;
pub mod net;
pub mod ope;
pub mod policy_learning;
pub mod selection;
pub mod sepsis;

pub use error::{OpeselError, Result};
