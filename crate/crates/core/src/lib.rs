//! Federated optimization simulator with per-round distance diagnostics.
//!
//! The crate runs a family of server/client update rules on tractable
//! objectives (quadratics and multinomial logistic regression) and checks
//! the exact single-round distance identities every round.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod local_solvers;
pub mod objectives;
pub mod partition;
pub mod projection;
pub mod seed;
pub mod server;
pub mod sweep;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::ModelVector;
pub use objectives::{
    global_objective, heterogeneity, lower_bound, Averaging, ClientObjective, ClientPopulation,
    LogisticObjective, QuadraticObjective,
};
pub use config::{Algorithm, ExperimentConfig, PopulationSpec};
pub use experiment::{run_experiment, ExperimentOutcome, RoundLog, Summary};
pub use local_solvers::{run_local, LocalMethod, LocalRunResult, LocalSolverConfig};
pub use partition::{split, PartitionResult, PartitionSpec};
pub use server::{ParticipationPolicy, Schedule, ServerState};
pub use theory::{ClientRoundRecord, Region};
