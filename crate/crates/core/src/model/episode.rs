use serde::{Deserialize, Serialize};

use super::{Container, TaskId};

/// End-effector delta (x, y, z, roll, pitch, yaw) plus gripper command.
pub type Action = [f64; 7];

/// Classifier label for a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Failure,
    Invalid,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Success, Verdict::Failure, Verdict::Invalid];

    /// Row/column index in a confusion matrix.
    pub fn index(self) -> usize {
        match self {
            Verdict::Success => 0,
            Verdict::Failure => 1,
            Verdict::Invalid => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPhase {
    Eval,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: u32,
    pub action: Action,
    pub phase: StepPhase,
    pub boundary_clamped: bool,
    pub motor_fault: bool,
}

/// Per-scene scalars describing a world state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scene", rename_all = "snake_case")]
pub enum StateSummary {
    Drawer { drawer_openness_m: f64 },
    Sink { object_x_m: f64, object_y_m: f64, container: Container },
    Cloth { fold_fraction: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u32,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let sum: f64 = samples.iter().sum();
        Self {
            count: samples.len() as u32,
            mean_ms: sum / samples.len() as f64,
            min_ms: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Why an episode was excluded from scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum InvalidReason {
    MotorFault,
    PolicyError(String),
    ClassifierError(String),
    /// The success classifier reported an out-of-distribution scene.
    ClassifierInvalid,
    Canceled,
}

/// Initial and final frames of an episode as PNG bytes. Kept in memory only;
/// the report store writes them under `frames/`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeFrames {
    pub initial_png: Vec<u8>,
    pub final_png: Vec<u8>,
}

/// One trial attempt. Re-runs after an invalidated attempt are new records
/// whose `rerun_of` points at the invalidated index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: u32,
    pub task_id: TaskId,
    pub initial_state_summary: StateSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state_summary: Option<StateSummary>,
    /// Eval-phase steps only; never exceeds the task's step budget.
    pub steps_executed: u32,
    /// Eval steps followed by the steps of the reset that ran after this episode.
    pub step_log: Vec<StepRecord>,
    pub success_verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_answer: Option<String>,
    pub reset_attempts: u32,
    pub motor_failures: u32,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<InvalidReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerun_of: Option<u32>,
    pub started_at: f64,
    pub wall_time_s: f64,
    pub policy_latency_ms: LatencySummary,
    #[serde(skip)]
    pub frames: Option<EpisodeFrames>,
}

impl EpisodeRecord {
    pub fn eval_steps(&self) -> usize {
        self.step_log.iter().filter(|s| s.phase == StepPhase::Eval).count()
    }

    pub fn reset_steps(&self) -> usize {
        self.step_log.iter().filter(|s| s.phase == StepPhase::Reset).count()
    }

    pub fn is_success(&self) -> bool {
        self.valid && self.success_verdict == Verdict::Success
    }
}
