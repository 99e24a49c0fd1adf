//! The per-cell trial loop: verify the scene, roll out the policy for the
//! task's step budget, label the final frame, reset with verified retries,
//! and escalate to a human when automatic recovery runs out.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio_util::sync::CancellationToken;

use crate::clock::Clock;
use crate::gateway::{encode_png, encode_png_base64, GatewayClient, ObservationPayload, PolicyEndpoint};
use crate::model::{
    CellEvent, CellMachine, CellPhase, EpisodeFrames, EpisodeRecord, InterventionReason, InterventionTicket,
    InvalidReason, JobId, LatencySummary, StepPhase, StepRecord, Verdict,
};
use crate::safety::{SafetyMonitor, WaitOutcome};
use crate::sim::{SimCell, SimError, StepEvents};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub reset_max_attempts: u32,
    pub reboot_max_attempts: u32,
    pub early_stop_on_oracle_success: bool,
    /// Consecutive invalid episodes caused by policy or classifier errors
    /// before the job fails.
    pub max_consecutive_policy_errors: u32,
    /// Simulated duration of one blocking action.
    pub step_duration_s: f64,
    pub reboot_duration_s: f64,
    /// Keep initial and final PNG frames of every episode.
    pub record_frames: bool,
    /// Real-time pause after each action chunk, for demos.
    pub step_delay_ms: u64,
    /// Park and wait for the operator on escalation. When false the run
    /// stops with [`EngineError::InterventionUnresolved`].
    pub wait_for_intervention: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            reset_max_attempts: 3,
            reboot_max_attempts: 3,
            early_stop_on_oracle_success: false,
            max_consecutive_policy_errors: 5,
            step_duration_s: 1.4,
            reboot_duration_s: 30.0,
            record_frames: false,
            step_delay_ms: 0,
            wait_for_intervention: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.reset_max_attempts == 0 || self.reboot_max_attempts == 0 {
            return Err("engine: reset_max_attempts and reboot_max_attempts must be at least 1".into());
        }
        if self.max_consecutive_policy_errors == 0 {
            return Err("engine: max_consecutive_policy_errors must be at least 1".into());
        }
        if !(self.step_duration_s >= 0.0) || !(self.reboot_duration_s >= 0.0) {
            return Err("engine: durations must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub job_id: JobId,
    pub episodes: Vec<EpisodeRecord>,
    pub success_count: u32,
    pub valid_count: u32,
    pub motor_failure_reruns: u32,
    pub interventions: Vec<InterventionTicket>,
    /// Eval-phase steps of valid episodes only.
    pub total_eval_steps: u64,
    /// Reset-phase steps of every reset, including ones outside episodes.
    pub total_reset_steps: u64,
}

impl EvaluationResult {
    fn new(job_id: JobId) -> Self {
        Self {
            job_id,
            episodes: Vec::new(),
            success_count: 0,
            valid_count: 0,
            motor_failure_reruns: 0,
            interventions: Vec::new(),
            total_eval_steps: 0,
            total_reset_steps: 0,
        }
    }

    fn push(&mut self, record: EpisodeRecord) {
        if record.valid {
            self.valid_count += 1;
            self.total_eval_steps += record.eval_steps() as u64;
            if record.success_verdict == Verdict::Success {
                self.success_count += 1;
            }
        }
        if record.invalid_reason == Some(InvalidReason::MotorFault) {
            self.motor_failure_reruns += 1;
        }
        self.total_reset_steps += record.reset_steps() as u64;
        self.episodes.push(record);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("policy server failed {errors} episodes in a row: {detail}")]
    PolicyUnreachable { result: Box<EvaluationResult>, errors: u32, detail: String },
    #[error("evaluation canceled")]
    Canceled { result: Box<EvaluationResult>, open_ticket: Option<InterventionTicket> },
    #[error("intervention {} is unresolved", ticket.ticket_id)]
    InterventionUnresolved { result: Box<EvaluationResult>, ticket: InterventionTicket },
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
}

impl EngineError {
    pub fn partial_result(&self) -> Option<&EvaluationResult> {
        match self {
            EngineError::PolicyUnreachable { result, .. }
            | EngineError::Canceled { result, .. }
            | EngineError::InterventionUnresolved { result, .. } => Some(result),
            EngineError::Sim(_) => None,
        }
    }
}

/// Progress hooks. Called synchronously from the engine; keep them short.
pub trait EngineListener: Send + Sync {
    /// The cell machine after `event` was applied.
    fn on_cell_event(&self, _machine: &CellMachine, _event: CellEvent) {}
    /// An episode attempt finished, including the reset that followed it.
    fn on_episode(&self, _record: &EpisodeRecord) {}
    fn on_intervention(&self, _ticket: &InterventionTicket) {}
    fn on_resumed(&self, _ticket: &InterventionTicket) {}
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NullListener;

impl EngineListener for NullListener {}

/// Everything an engine needs besides the cell.
#[derive(Clone)]
pub struct EngineContext {
    pub gateway: GatewayClient,
    pub policy: PolicyEndpoint,
    pub classifier: PolicyEndpoint,
    pub safety: SafetyMonitor,
    pub clock: Arc<dyn Clock>,
    pub listener: Arc<dyn EngineListener>,
    pub cancel: CancellationToken,
    pub config: EngineConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetOutcome {
    Ok { attempts: u32 },
    Escalated { attempts: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RebootOutcome {
    Ok,
    Escalated,
}

/// How an attempt ended before its reset.
#[derive(Debug, Clone, PartialEq)]
enum Ending {
    Scored,
    MotorFault,
    PolicyError(String),
    ClassifierInvalid,
    ClassifierError(String),
    Canceled,
}

enum Halt {
    Canceled(Option<InterventionTicket>),
    Unresolved(InterventionTicket),
}

/// Stable 64-bit FNV-1a, used to give every job its own random streams.
fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// One evaluation run on one cell. Strictly sequential.
pub struct Engine<'a> {
    job_id: JobId,
    cell: &'a mut SimCell,
    ctx: EngineContext,
    machine: CellMachine,
    stream_salt: u64,
    ready: bool,
}

impl<'a> Engine<'a> {
    /// `machine` is the cell's current state machine; it must be idle with
    /// no job running.
    pub fn new(job_id: JobId, cell: &'a mut SimCell, mut machine: CellMachine, ctx: EngineContext) -> Self {
        machine.reset_max_attempts = ctx.config.reset_max_attempts.max(1);
        machine.reboot_max_attempts = ctx.config.reboot_max_attempts.max(1);
        let stream_salt = fnv1a(job_id.as_str()) << 24;
        Self { job_id, cell, ctx, machine, stream_salt, ready: false }
    }

    pub fn machine(&self) -> &CellMachine {
        &self.machine
    }

    fn emit(&mut self, event: CellEvent) {
        if let Err(err) = self.machine.apply(event) {
            tracing::error!(%err, cell = %self.cell.cell_id, "cell event rejected");
            return;
        }
        self.ctx.listener.on_cell_event(&self.machine, event);
    }

    fn now(&self) -> f64 {
        self.ctx.clock.now()
    }

    /// Ask the reset-success classifier whether the scene is ready.
    async fn verify_scene(&self) -> bool {
        let Ok(image) = encode_png_base64(&self.cell.render()) else {
            return false;
        };
        let task = self.cell.task();
        match self
            .ctx
            .gateway
            .query_classifier(&self.ctx.classifier, &image, &task.reset_prompt, &task.reset_answer_table())
            .await
        {
            Ok(v) => v.label == Verdict::Success,
            Err(err) => {
                tracing::warn!(%err, "reset classifier query failed");
                false
            }
        }
    }

    /// Run trials until `num_trials` valid episodes exist.
    pub async fn run_evaluation(&mut self, num_trials: u32) -> Result<EvaluationResult, EngineError> {
        let mut result = EvaluationResult::new(self.job_id.clone());
        self.emit(CellEvent::JobStart);
        let outcome = self.trial_loop(num_trials, &mut result).await;
        self.emit(CellEvent::JobEnd);
        match outcome {
            Ok(()) => Ok(result),
            Err(LoopExit::Halt(Halt::Canceled(open_ticket))) => {
                Err(EngineError::Canceled { result: Box::new(result), open_ticket })
            }
            Err(LoopExit::Halt(Halt::Unresolved(ticket))) => {
                Err(EngineError::InterventionUnresolved { result: Box::new(result), ticket })
            }
            Err(LoopExit::PolicyErrors { errors, detail }) => {
                Err(EngineError::PolicyUnreachable { result: Box::new(result), errors, detail })
            }
            Err(LoopExit::Sim(e)) => Err(EngineError::Sim(e)),
        }
    }

    async fn trial_loop(&mut self, num_trials: u32, result: &mut EvaluationResult) -> Result<(), LoopExit> {
        let mut index = 0u32;
        let mut rerun_of = None;
        let mut policy_errors = 0u32;
        while result.valid_count < num_trials {
            if self.ctx.cancel.is_cancelled() {
                return Err(LoopExit::Halt(Halt::Canceled(None)));
            }
            if !self.ready {
                let mut log = Vec::new();
                let ensured = self.ensure_ready(&mut log, result).await;
                result.total_reset_steps += log.len() as u64;
                ensured?;
            }

            let (mut record, ending) = self.run_episode(index, rerun_of).await?;
            self.ready = false;
            match &ending {
                Ending::Scored => policy_errors = 0,
                Ending::PolicyError(_) | Ending::ClassifierError(_) => policy_errors += 1,
                _ => {}
            }

            // Recover the cell; the record is published once its reset is done.
            let recovery = match &ending {
                Ending::MotorFault => match self.handle_motor_failure().await {
                    RebootOutcome::Ok => self.reset_into(&mut record, result).await,
                    RebootOutcome::Escalated => self
                        .escalate(InterventionReason::MotorRebootExhausted, result)
                        .await
                        .map_err(LoopExit::Halt),
                },
                Ending::ClassifierInvalid => self
                    .escalate(InterventionReason::InvalidStateDetected, result)
                    .await
                    .map_err(LoopExit::Halt),
                _ => self.reset_into(&mut record, result).await,
            };
            record.wall_time_s = self.now() - record.started_at;
            rerun_of = (!record.valid).then_some(record.index);
            self.ctx.listener.on_episode(&record);
            result.push(record);
            index += 1;
            recovery?;

            if ending == Ending::Canceled {
                return Err(LoopExit::Halt(Halt::Canceled(None)));
            }
            if policy_errors >= self.ctx.config.max_consecutive_policy_errors {
                let detail = match ending {
                    Ending::PolicyError(d) | Ending::ClassifierError(d) => d,
                    _ => String::new(),
                };
                return Err(LoopExit::PolicyErrors { errors: policy_errors, detail });
            }
        }
        Ok(())
    }

    /// Reset after an episode, logging the reset steps into its record.
    async fn reset_into(&mut self, record: &mut EpisodeRecord, result: &mut EvaluationResult) -> Result<(), LoopExit> {
        match self.execute_reset(&mut record.step_log).await.map_err(LoopExit::Sim)? {
            ResetOutcome::Ok { attempts } => {
                record.reset_attempts = attempts;
                self.ready = true;
                Ok(())
            }
            ResetOutcome::Escalated { attempts } => {
                record.reset_attempts = attempts;
                let reason = self.machine.escalation.unwrap_or(InterventionReason::ResetExhausted);
                self.escalate(reason, result).await.map_err(LoopExit::Halt)
            }
        }
    }

    /// Make sure the scene is in the initial-state distribution before a
    /// trial, resetting (and escalating) as needed.
    async fn ensure_ready(&mut self, log: &mut Vec<StepRecord>, result: &mut EvaluationResult) -> Result<(), LoopExit> {
        loop {
            if !self.cell.world().motors_ok {
                if self.handle_motor_failure().await == RebootOutcome::Escalated {
                    self.escalate(InterventionReason::MotorRebootExhausted, result)
                        .await
                        .map_err(LoopExit::Halt)?;
                }
                continue;
            }
            if self.verify_scene().await {
                self.ready = true;
                return Ok(());
            }
            match self.execute_reset(log).await.map_err(LoopExit::Sim)? {
                ResetOutcome::Ok { .. } => {
                    self.ready = true;
                    return Ok(());
                }
                ResetOutcome::Escalated { .. } => {
                    let reason = self.machine.escalation.unwrap_or(InterventionReason::ResetExhausted);
                    self.escalate(reason, result).await.map_err(LoopExit::Halt)?;
                }
            }
        }
    }

    /// One rollout of up to K steps followed by a single classification of
    /// the final frame.
    async fn run_episode(&mut self, index: u32, rerun_of: Option<u32>) -> Result<(EpisodeRecord, Ending), LoopExit> {
        let task = self.cell.task().clone();
        let config = self.ctx.config.clone();
        self.cell.begin_episode(self.stream_salt | index as u64);
        self.emit(CellEvent::TrialStart);

        let started_at = self.now();
        let initial_state_summary = self.cell.world().summary();
        let initial_png = if config.record_frames { encode_png(&self.cell.render()).ok() } else { None };
        let mut step_log = Vec::with_capacity(task.max_steps as usize);
        let mut latencies = Vec::new();
        let mut ending = Ending::Scored;

        'rollout: while (step_log.len() as u32) < task.max_steps {
            if self.ctx.cancel.is_cancelled() {
                ending = Ending::Canceled;
                break;
            }
            let world = *self.cell.world();
            let p = world.gripper_pose;
            let proprio = [p.position[0], p.position[1], p.position[2], p.rotation[0], p.rotation[1], p.rotation[2], p.gripper];
            let obs = match ObservationPayload::from_raster(&self.cell.render(), &task.instruction, Some(proprio)) {
                Ok(obs) => obs,
                Err(e) => {
                    ending = Ending::PolicyError(e.to_string());
                    break;
                }
            };
            let chunk = match self.ctx.gateway.query_policy(&self.ctx.policy, &obs).await {
                Ok((chunk, latency_ms)) => {
                    latencies.push(latency_ms);
                    chunk
                }
                Err(e) => {
                    tracing::warn!(err = %e, episode = index, "policy query failed");
                    ending = Ending::PolicyError(e.to_string());
                    break;
                }
            };
            for action in chunk.actions {
                if step_log.len() as u32 >= task.max_steps {
                    break;
                }
                let events = self.cell.step(&action).map_err(LoopExit::Sim)?;
                self.ctx.clock.elapse(config.step_duration_s);
                step_log.push(step_record(step_log.len(), action, StepPhase::Eval, events));
                if events.motor_fault {
                    ending = Ending::MotorFault;
                    break 'rollout;
                }
                if config.early_stop_on_oracle_success && self.cell.ground_truth() {
                    break 'rollout;
                }
                if self.ctx.cancel.is_cancelled() {
                    ending = Ending::Canceled;
                    break 'rollout;
                }
            }
            if config.step_delay_ms > 0 {
                tokio::time::sleep(Duration::from_millis(config.step_delay_ms)).await;
            }
        }
        let steps_executed = step_log.len() as u32;

        let mut verdict = Verdict::Failure;
        let mut classifier_answer = None;
        if ending == Ending::MotorFault {
            self.emit(CellEvent::MotorFault);
        } else {
            self.emit(CellEvent::TrialEnd);
            if ending == Ending::Scored {
                let labeled = match encode_png_base64(&self.cell.render()) {
                    Ok(image) => {
                        self.ctx
                            .gateway
                            .query_classifier(&self.ctx.classifier, &image, &task.success_prompt, &task.answer_table())
                            .await
                    }
                    Err(e) => Err(e),
                };
                match labeled {
                    Ok(v) => {
                        verdict = v.label;
                        classifier_answer = Some(v.raw_text);
                        if verdict == Verdict::Invalid {
                            ending = Ending::ClassifierInvalid;
                        }
                    }
                    Err(e) => ending = Ending::ClassifierError(e.to_string()),
                }
            }
            self.emit(CellEvent::ClassifyDone);
        }

        let final_png = if config.record_frames { encode_png(&self.cell.render()).ok() } else { None };
        let invalid_reason = match &ending {
            Ending::Scored => None,
            Ending::MotorFault => Some(InvalidReason::MotorFault),
            Ending::PolicyError(e) => Some(InvalidReason::PolicyError(e.clone())),
            Ending::ClassifierInvalid => Some(InvalidReason::ClassifierInvalid),
            Ending::ClassifierError(e) => Some(InvalidReason::ClassifierError(e.clone())),
            Ending::Canceled => Some(InvalidReason::Canceled),
        };
        if ending == Ending::ClassifierInvalid {
            verdict = Verdict::Invalid;
        }
        let record = EpisodeRecord {
            index,
            task_id: task.task_id.clone(),
            initial_state_summary,
            final_state_summary: Some(self.cell.world().summary()),
            steps_executed,
            step_log,
            success_verdict: verdict,
            classifier_answer,
            reset_attempts: 0,
            motor_failures: u32::from(ending == Ending::MotorFault),
            valid: invalid_reason.is_none(),
            invalid_reason,
            rerun_of,
            started_at,
            wall_time_s: 0.0,
            policy_latency_ms: LatencySummary::from_samples(&latencies),
            frames: initial_png.zip(final_png).map(|(initial_png, final_png)| EpisodeFrames { initial_png, final_png }),
        };
        Ok((record, ending))
    }

    /// Run the reset policy and check it with the reset-success classifier,
    /// retrying up to `reset_max_attempts` consecutive failures. A motor
    /// fault mid-reset is rebooted and the reset re-attempted without
    /// clearing the failure count.
    pub async fn execute_reset(&mut self, log: &mut Vec<StepRecord>) -> Result<ResetOutcome, SimError> {
        let mut attempts = 0;
        loop {
            self.emit(CellEvent::ResetStart);
            attempts += 1;
            let run = self.cell.run_reset()?;
            for (action, events) in &run.steps {
                self.ctx.clock.elapse(self.ctx.config.step_duration_s);
                log.push(step_record(log.len(), *action, StepPhase::Reset, *events));
            }
            if run.motor_fault {
                self.emit(CellEvent::MotorFault);
                if self.machine.phase == CellPhase::AwaitingIntervention {
                    return Ok(ResetOutcome::Escalated { attempts });
                }
                if self.handle_motor_failure().await == RebootOutcome::Escalated {
                    return Ok(ResetOutcome::Escalated { attempts });
                }
                continue;
            }
            if self.verify_scene().await {
                self.emit(CellEvent::ResetOk);
                return Ok(ResetOutcome::Ok { attempts });
            }
            self.emit(CellEvent::ResetFail);
            if self.machine.phase == CellPhase::AwaitingIntervention {
                return Ok(ResetOutcome::Escalated { attempts });
            }
        }
    }

    /// Reboot the motors at the safe pose, retrying up to
    /// `reboot_max_attempts` consecutive failures.
    pub async fn handle_motor_failure(&mut self) -> RebootOutcome {
        if self.machine.phase == CellPhase::AwaitingIntervention {
            return RebootOutcome::Escalated;
        }
        if self.machine.phase != CellPhase::Faulted {
            self.emit(CellEvent::MotorFault);
            if self.machine.phase == CellPhase::AwaitingIntervention {
                return RebootOutcome::Escalated;
            }
        }
        loop {
            self.emit(CellEvent::RebootStart);
            self.ctx.clock.elapse(self.ctx.config.reboot_duration_s);
            if self.cell.reboot() {
                self.emit(CellEvent::RebootOk);
                return RebootOutcome::Ok;
            }
            self.emit(CellEvent::RebootFail);
            if self.machine.phase == CellPhase::AwaitingIntervention {
                return RebootOutcome::Escalated;
            }
        }
    }

    /// Raise a ticket, park until the operator resolves it, then take over
    /// the restored cell.
    async fn escalate(&mut self, reason: InterventionReason, result: &mut EvaluationResult) -> Result<(), Halt> {
        if self.machine.phase != CellPhase::AwaitingIntervention {
            self.emit(CellEvent::Escalate(reason));
        }
        let reason = self.machine.escalation.unwrap_or(reason);
        let now = self.now();
        let ticket = match self.ctx.safety.raise_intervention(&self.cell.cell_id, reason, Some(&self.job_id), now).await {
            Ok(t) => t,
            Err(e) => match e.into_ticket() {
                Some(t) => t,
                None => unreachable!("raise only fails with a persisted ticket"),
            },
        };
        self.ctx.listener.on_intervention(&ticket);
        result.interventions.push(ticket.clone());
        if !self.ctx.config.wait_for_intervention {
            return Err(Halt::Unresolved(ticket));
        }
        match self.ctx.safety.wait_resolved(&ticket.ticket_id, &self.ctx.cancel).await {
            WaitOutcome::Resolved => {}
            WaitOutcome::Canceled => return Err(Halt::Canceled(Some(ticket))),
        }
        self.cell.operator_restore().map_err(|e| {
            tracing::error!(%e, "operator restore failed");
            Halt::Unresolved(ticket.clone())
        })?;
        self.emit(CellEvent::Resume);
        let resolved = self.ctx.safety.ticket(&ticket.ticket_id).unwrap_or(ticket);
        if let Some(slot) = result.interventions.iter_mut().find(|t| t.ticket_id == resolved.ticket_id) {
            *slot = resolved.clone();
        }
        self.ctx.listener.on_resumed(&resolved);
        self.ready = false;
        Ok(())
    }
}

/// Why the trial loop stopped early.
enum LoopExit {
    Halt(Halt),
    PolicyErrors { errors: u32, detail: String },
    Sim(SimError),
}

impl std::fmt::Debug for LoopExit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoopExit::Halt(Halt::Canceled(_)) => f.write_str("Canceled"),
            LoopExit::Halt(Halt::Unresolved(t)) => write!(f, "Unresolved({})", t.ticket_id),
            LoopExit::PolicyErrors { errors, .. } => write!(f, "PolicyErrors({errors})"),
            LoopExit::Sim(e) => write!(f, "Sim({e})"),
        }
    }
}

fn step_record(index: usize, action: crate::model::Action, phase: StepPhase, events: StepEvents) -> StepRecord {
    StepRecord {
        step_index: index as u32,
        action,
        phase,
        boundary_clamped: events.boundary_clamped,
        motor_fault: events.motor_fault,
    }
}
