use serde::{Deserialize, Serialize};

use super::{CellId, EpisodeRecord, JobId, TaskId, TransitionError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    /// Head of a queue whose cell is in its cooldown window.
    CoolingDownBlocked,
    Running,
    AwaitingIntervention,
    Completed,
    Canceled,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Completed | JobStatus::Canceled | JobStatus::Failed)
    }

    pub fn is_pending(self) -> bool {
        matches!(self, JobStatus::Queued | JobStatus::CoolingDownBlocked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobEvent {
    Start,
    Block,
    TrialDone,
    Escalate,
    Resume,
    Cancel,
    Complete,
    Fail,
}

/// Status-level transition table.
pub fn job_transition(status: JobStatus, event: JobEvent) -> Result<JobStatus, TransitionError> {
    use JobEvent as E;
    use JobStatus as S;
    let next = match (status, event) {
        (S::Queued, E::Start) | (S::CoolingDownBlocked, E::Start) => S::Running,
        (S::Queued, E::Block) | (S::CoolingDownBlocked, E::Block) => S::CoolingDownBlocked,
        (S::Queued | S::CoolingDownBlocked, E::Cancel) => S::Canceled,
        (S::Running, E::TrialDone) => S::Running,
        (S::Running, E::Escalate) => S::AwaitingIntervention,
        (S::Running, E::Complete) => S::Completed,
        (S::Running, E::Cancel) => S::Canceled,
        (S::Running, E::Fail) => S::Failed,
        (S::AwaitingIntervention, E::Resume) => S::Running,
        (S::AwaitingIntervention, E::Cancel) => S::Canceled,
        (current, event) => return Err(TransitionError::illegal(current, event)),
    };
    Ok(next)
}

/// A queued request binding a policy endpoint to a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationJob {
    pub job_id: JobId,
    pub submitter: String,
    pub task_id: TaskId,
    pub cell_id: CellId,
    pub policy_endpoint: String,
    pub num_trials: u32,
    pub status: JobStatus,
    pub submitted_at: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub episodes: Vec<EpisodeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EvaluationJob {
    pub fn valid_count(&self) -> u32 {
        self.episodes.iter().filter(|e| e.valid).count() as u32
    }

    pub fn success_count(&self) -> u32 {
        self.episodes.iter().filter(|e| e.is_success()).count() as u32
    }

    /// Apply `event`, enforcing that a completed job holds exactly
    /// `num_trials` valid episodes.
    pub fn apply(&mut self, event: JobEvent) -> Result<JobStatus, TransitionError> {
        let next = job_transition(self.status, event)?;
        if next == JobStatus::Completed && self.valid_count() != self.num_trials {
            return Err(TransitionError::IncompleteJob {
                valid: self.valid_count(),
                required: self.num_trials,
            });
        }
        self.status = next;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queued_start_runs() {
        assert_eq!(job_transition(JobStatus::Queued, JobEvent::Start), Ok(JobStatus::Running));
    }

    #[test]
    fn running_escalate_awaits() {
        assert_eq!(
            job_transition(JobStatus::Running, JobEvent::Escalate),
            Ok(JobStatus::AwaitingIntervention)
        );
    }

    #[test]
    fn terminal_states_reject_everything() {
        for status in [JobStatus::Completed, JobStatus::Canceled, JobStatus::Failed] {
            for event in [
                JobEvent::Start,
                JobEvent::Block,
                JobEvent::TrialDone,
                JobEvent::Escalate,
                JobEvent::Resume,
                JobEvent::Cancel,
                JobEvent::Complete,
                JobEvent::Fail,
            ] {
                assert!(matches!(
                    job_transition(status, event),
                    Err(TransitionError::IllegalTransition { .. })
                ));
            }
        }
    }

    #[test]
    fn completion_requires_all_valid_trials() {
        let mut job = EvaluationJob {
            job_id: "job-1".into(),
            submitter: "a".into(),
            task_id: "open_drawer".into(),
            cell_id: "drawer".into(),
            policy_endpoint: "http://127.0.0.1:1".into(),
            num_trials: 2,
            status: JobStatus::Running,
            submitted_at: 0.0,
            started_at: Some(0.0),
            finished_at: None,
            episodes: vec![],
            failure: None,
        };
        assert_eq!(
            job.apply(JobEvent::Complete),
            Err(TransitionError::IncompleteJob { valid: 0, required: 2 })
        );
        assert_eq!(job.status, JobStatus::Running);
    }
}
