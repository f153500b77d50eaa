//! Hierarchical parametric latency contracts with runtime observers and
//! resilience managers, driven by a deterministic discrete-event model of a
//! color-sorting conveyor line.
//!
//! Layering, bottom up:
//!
//! - [`contract`]: latency contracts, evaluation, refinement, slack and budget
//!   reallocation.
//! - [`observer`]: per-contract monitors that turn job timings into violation
//!   reports.
//! - [`rm`]: resilience managers and their recovery protocol, over the
//!   [`message`] layer.
//! - [`plant`]: the sorting line itself; [`fault`] perturbs it.
//! - [`sim`]: the event loop; [`scenario`], [`trace`] and [`metrics`] are its
//!   inputs and outputs; [`cli`] wraps it all.

pub mod cli;
pub mod contract;
pub mod fault;
pub mod ids;
pub mod message;
pub mod metrics;
pub mod observer;
pub mod plant;
pub mod rm;
pub mod scenario;
pub mod sim;
pub mod time;
pub mod trace;

pub use contract::{check_refinement, evaluate, reallocate, slack, Allocation, ContractNode, ContractTree, Demand, EvalResult, LatencyContract};
pub use ids::{Color, Component, ContractId, RmId};
pub use metrics::Metrics;
pub use scenario::{Scenario, SimConfig};
pub use sim::{RunOutcome, Simulation};
pub use time::{Duration, Timestamp};
