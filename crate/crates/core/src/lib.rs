//! Learning policies that steer away from undesired demonstrations on finite
//! MDPs.
//!
//! The crate covers the whole tabular pipeline: exact MDP primitives
//! ([`mdp`]), constrained gridworlds and experts ([`gridworld`]), datasets
//! ([`dataset`]), the two-head occupancy-ratio discriminator ([`ratio`]), the
//! ratio-corrected inverse soft-Q trainer with weighted behaviour cloning
//! ([`uniq`]), comparison methods ([`baselines`]), evaluation ([`eval`]),
//! brute-force verification ([`oracles`]) and experiment orchestration
//! ([`experiment`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gridworld;
pub mod json;
pub mod mdp;
pub mod optim;
pub mod oracles;
pub mod psi;
pub mod ratio;
pub mod uniq;

pub use dataset::{DatasetRole, OccupancyWeighting, Trajectory, TrajectoryDataset, Transition};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use gridworld::{ExpertPair, GridworldSpec};
pub use mdp::{FiniteMdp, OccupancyMeasure, QTable, Table, TabularPolicy};
pub use psi::Regularizer;
pub use ratio::{RatioEstimate, RatioTable};
pub use uniq::{TrainedUniq, UniqConfig};
