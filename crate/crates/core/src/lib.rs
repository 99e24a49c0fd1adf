//! Autonomous evaluation of remote robot policies against simulated cells.
//!
//! The crate is split along the lines of the running system:
//!
//! * [`model`]: domain types and pure job/cell state machines.
//! * [`gateway`]: HTTP clients for policy and classifier servers.
//! * [`sim`]: seedable simulated cells plus builtin policy/classifier servers.
//! * [`safety`]: workspace limits and the intervention channel.
//! * [`engine`]: the per-cell trial loop.
//! * [`scheduler`]: per-cell FIFO queues, cooldowns and the job store.
//! * [`metrics`]: success rates, rank consistency, throughput and reports.

pub mod clock;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod safety;
pub mod scheduler;
pub mod sim;
pub mod engine;
