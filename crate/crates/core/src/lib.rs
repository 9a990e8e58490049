//! Optimistic primal-dual policy optimization for episodic constrained MDPs.
//!
//! The crate provides the model and policy primitives ([`cmdp`]), a hindsight
//! occupancy-measure LP solver ([`hindsight`] on top of [`simplex`]), the
//! online primal-dual optimizer ([`opdop`]) with interchangeable optimistic
//! evaluation backends ([`lstd`] for linear function approximation,
//! [`tabular`] for count-based models), instance generators ([`envs`]), and
//! an experiment harness ([`harness`]) that drives seeds, scores regret and
//! constraint violation, and writes reports.

// Negated float comparisons are validation guards that must also reject NaN;
// index loops in the numeric kernels walk several tables in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod cmdp;
pub mod envs;
pub mod error;
pub mod harness;
pub mod hindsight;
pub mod linalg;
pub mod lstd;
#[allow(clippy::module_inception)]
pub mod opdop;
pub mod simplex;
pub mod svg;
pub mod tabular;

pub use cmdp::{CmdpModel, PolicySlate, Trajectory};
pub use error::{Error, Result};
pub use harness::{run_experiment, RegretLedger, RunSpec};
pub use hindsight::{solve_hindsight, HindsightSolution};
pub use opdop::{run_opdop, BackendChoice, BackendKind, OpdopConfig};
