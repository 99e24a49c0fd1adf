//! Shared domain types and the pure transition logic for jobs and cells.
//!
//! Nothing in here performs I/O or reads a clock; timestamps are plain
//! seconds supplied by callers.

mod cell;
mod episode;
mod ids;
mod job;
mod task;

pub use cell::{cell_transition, CellEvent, CellMachine, CellPhase, InterventionReason, InterventionTicket};
pub use episode::{
    Action, EpisodeFrames, EpisodeRecord, InvalidReason, LatencySummary, StateSummary, StepPhase,
    StepRecord, Verdict,
};
pub use ids::{CellId, JobId, TaskId, TicketId};
pub use job::{job_transition, EvaluationJob, JobEvent, JobStatus};
pub use task::{
    builtin_tasks, validate_task_spec, Container, InitialStateDistribution, Interval, Scene,
    SuccessThresholds, TaskGoal, TaskSpec, TaskSpecViolation,
};

/// Rejected state-machine step.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransitionError {
    #[error("illegal transition: {event} while {current}")]
    IllegalTransition { current: String, event: String },
    #[error("job cannot complete with {valid} of {required} valid episodes")]
    IncompleteJob { valid: u32, required: u32 },
}

impl TransitionError {
    pub(crate) fn illegal(current: impl std::fmt::Debug, event: impl std::fmt::Debug) -> Self {
        TransitionError::IllegalTransition {
            current: format!("{current:?}"),
            event: format!("{event:?}"),
        }
    }
}
