use serde::{Deserialize, Serialize};

use super::{CellId, JobId, TicketId, TransitionError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellPhase {
    Idle,
    RunningTrial,
    ClassifyingSuccess,
    Resetting,
    RebootingMotors,
    CoolingDown,
    AwaitingIntervention,
    /// Motors are down and no reboot has started yet.
    Faulted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionReason {
    ResetExhausted,
    MotorRebootExhausted,
    InvalidStateDetected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event", content = "reason")]
pub enum CellEvent {
    JobStart,
    JobEnd,
    TrialStart,
    TrialEnd,
    ClassifyDone,
    ResetStart,
    ResetOk,
    ResetFail,
    MotorFault,
    RebootStart,
    RebootOk,
    RebootFail,
    CooldownDue,
    CooldownDone,
    Escalate(InterventionReason),
    Resume,
}

/// Cell phase plus the counters the transition rules depend on.
///
/// Consecutive reset failures reset to zero on any successful reset; the
/// motor-fault counter resets when a trial finishes without a fault.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMachine {
    pub phase: CellPhase,
    pub reset_max_attempts: u32,
    pub reboot_max_attempts: u32,
    pub consecutive_reset_failures: u32,
    pub consecutive_motor_faults: u32,
    pub consecutive_reboot_failures: u32,
    pub job_active: bool,
    pub cooldown_pending: bool,
    pub escalation: Option<InterventionReason>,
}

impl CellMachine {
    pub fn new(reset_max_attempts: u32, reboot_max_attempts: u32) -> Self {
        Self {
            phase: CellPhase::Idle,
            reset_max_attempts: reset_max_attempts.max(1),
            reboot_max_attempts: reboot_max_attempts.max(1),
            consecutive_reset_failures: 0,
            consecutive_motor_faults: 0,
            consecutive_reboot_failures: 0,
            job_active: false,
            cooldown_pending: false,
            escalation: None,
        }
    }

    /// Apply one event in place.
    pub fn apply(&mut self, event: CellEvent) -> Result<CellPhase, TransitionError> {
        *self = cell_transition(self.clone(), event)?;
        Ok(self.phase)
    }

    /// Fold a recorded event log from `self`.
    pub fn replay<I: IntoIterator<Item = CellEvent>>(mut self, events: I) -> Result<Self, TransitionError> {
        for event in events {
            self = cell_transition(self, event)?;
        }
        Ok(self)
    }

    fn escalate(mut self, reason: InterventionReason) -> Self {
        self.phase = CellPhase::AwaitingIntervention;
        self.escalation = Some(reason);
        self
    }
}

impl Default for CellMachine {
    fn default() -> Self {
        Self::new(3, 3)
    }
}

/// Deterministic next state of a cell.
pub fn cell_transition(mut m: CellMachine, event: CellEvent) -> Result<CellMachine, TransitionError> {
    use CellEvent as E;
    use CellPhase as P;

    let illegal = |m: &CellMachine| Err(TransitionError::illegal(m.phase, event));

    // Phase-independent events first.
    match event {
        E::Escalate(reason) => {
            if m.phase == P::AwaitingIntervention {
                return Ok(m);
            }
            return Ok(m.escalate(reason));
        }
        E::CooldownDue => {
            if m.phase == P::Idle && !m.job_active {
                m.phase = P::CoolingDown;
                m.cooldown_pending = false;
            } else if m.phase != P::CoolingDown {
                m.cooldown_pending = true;
            }
            return Ok(m);
        }
        E::JobEnd => {
            if !m.job_active {
                return illegal(&m);
            }
            m.job_active = false;
            if m.phase == P::Idle && m.cooldown_pending {
                m.phase = P::CoolingDown;
                m.cooldown_pending = false;
            }
            return Ok(m);
        }
        _ => {}
    }

    match (m.phase, event) {
        (P::Idle, E::JobStart) if !m.job_active => {
            m.job_active = true;
        }
        (P::Idle, E::TrialStart) => m.phase = P::RunningTrial,
        (P::Idle | P::Resetting, E::ResetStart) => m.phase = P::Resetting,
        (P::RunningTrial, E::TrialEnd) => {
            m.consecutive_motor_faults = 0;
            m.phase = P::ClassifyingSuccess;
        }
        (P::ClassifyingSuccess, E::ClassifyDone) => m.phase = P::Resetting,
        (P::Resetting, E::ResetOk) => {
            m.consecutive_reset_failures = 0;
            m.phase = P::Idle;
        }
        (P::Resetting, E::ResetFail) => {
            m.consecutive_reset_failures += 1;
            if m.consecutive_reset_failures >= m.reset_max_attempts {
                return Ok(m.escalate(InterventionReason::ResetExhausted));
            }
        }
        (P::Idle | P::RunningTrial | P::Resetting, E::MotorFault) => {
            m.consecutive_motor_faults += 1;
            if m.consecutive_motor_faults >= m.reboot_max_attempts {
                return Ok(m.escalate(InterventionReason::MotorRebootExhausted));
            }
            m.phase = P::Faulted;
        }
        (P::Faulted, E::RebootStart) => m.phase = P::RebootingMotors,
        (P::RebootingMotors, E::RebootOk) => {
            m.consecutive_reboot_failures = 0;
            m.phase = P::Idle;
        }
        (P::RebootingMotors, E::RebootFail) => {
            m.consecutive_reboot_failures += 1;
            if m.consecutive_reboot_failures >= m.reboot_max_attempts {
                return Ok(m.escalate(InterventionReason::MotorRebootExhausted));
            }
            m.phase = P::Faulted;
        }
        (P::CoolingDown, E::CooldownDone) => m.phase = P::Idle,
        (P::AwaitingIntervention, E::Resume) => {
            m.consecutive_reset_failures = 0;
            m.consecutive_motor_faults = 0;
            m.consecutive_reboot_failures = 0;
            m.escalation = None;
            if m.cooldown_pending && !m.job_active {
                m.cooldown_pending = false;
                m.phase = P::CoolingDown;
            } else {
                m.phase = P::Idle;
            }
        }
        _ => return illegal(&m),
    }
    Ok(m)
}

/// A request for a human operator to restore a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTicket {
    pub ticket_id: TicketId,
    pub cell_id: CellId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
    pub reason: InterventionReason,
    pub raised_at: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_at: Option<f64>,
    /// Webhook delivery attempts made so far (the first happens when raised).
    pub notification_delivery_count: u32,
    pub notification_acknowledged: bool,
}

impl InterventionTicket {
    pub fn is_resolved(&self) -> bool {
        self.resolved_at.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resetting() -> CellMachine {
        CellMachine::default().replay([CellEvent::JobStart, CellEvent::ResetStart]).unwrap()
    }

    #[test]
    fn three_reset_failures_escalate() {
        let mut m = resetting();
        assert_eq!(m.apply(CellEvent::ResetFail).unwrap(), CellPhase::Resetting);
        m.apply(CellEvent::ResetStart).unwrap();
        assert_eq!(m.apply(CellEvent::ResetFail).unwrap(), CellPhase::Resetting);
        m.apply(CellEvent::ResetStart).unwrap();
        assert_eq!(m.apply(CellEvent::ResetFail).unwrap(), CellPhase::AwaitingIntervention);
        assert_eq!(m.escalation, Some(InterventionReason::ResetExhausted));
    }

    #[test]
    fn successful_reset_clears_failure_counter() {
        let m = resetting()
            .replay([CellEvent::ResetFail, CellEvent::ResetFail, CellEvent::ResetOk, CellEvent::ResetStart])
            .unwrap();
        assert_eq!(m.consecutive_reset_failures, 0);
        let m = m.replay([CellEvent::ResetFail, CellEvent::ResetFail]).unwrap();
        assert_eq!(m.phase, CellPhase::Resetting);
    }

    #[test]
    fn idle_cooldown_due_cools_down() {
        let m = cell_transition(CellMachine::default(), CellEvent::CooldownDue).unwrap();
        assert_eq!(m.phase, CellPhase::CoolingDown);
    }

    #[test]
    fn cooldown_during_trial_is_deferred_to_job_end() {
        let m = CellMachine::default()
            .replay([CellEvent::JobStart, CellEvent::TrialStart, CellEvent::CooldownDue])
            .unwrap();
        assert_eq!(m.phase, CellPhase::RunningTrial);
        assert!(m.cooldown_pending);
        let m = m
            .replay([CellEvent::TrialEnd, CellEvent::ClassifyDone, CellEvent::ResetStart, CellEvent::ResetOk])
            .unwrap();
        // Between trials of the same job the cell stays available.
        assert_eq!(m.phase, CellPhase::Idle);
        let m = m.replay([CellEvent::JobEnd]).unwrap();
        assert_eq!(m.phase, CellPhase::CoolingDown);
    }

    #[test]
    fn job_cannot_start_while_cooling() {
        let m = cell_transition(CellMachine::default(), CellEvent::CooldownDue).unwrap();
        assert!(cell_transition(m, CellEvent::JobStart).is_err());
    }

    #[test]
    fn motor_faults_escalate_after_budget() {
        let cycle = [CellEvent::MotorFault, CellEvent::RebootStart, CellEvent::RebootOk];
        let m = CellMachine::default()
            .replay([CellEvent::JobStart, CellEvent::TrialStart])
            .unwrap()
            .replay(cycle)
            .unwrap()
            .replay([CellEvent::TrialStart])
            .unwrap()
            .replay(cycle)
            .unwrap()
            .replay([CellEvent::TrialStart, CellEvent::MotorFault])
            .unwrap();
        assert_eq!(m.phase, CellPhase::AwaitingIntervention);
        assert_eq!(m.escalation, Some(InterventionReason::MotorRebootExhausted));
    }

    #[test]
    fn reboot_failures_escalate() {
        let m = CellMachine::default()
            .replay([
                CellEvent::MotorFault,
                CellEvent::RebootStart,
                CellEvent::RebootFail,
                CellEvent::RebootStart,
                CellEvent::RebootFail,
                CellEvent::RebootStart,
            ])
            .unwrap();
        assert_eq!(m.phase, CellPhase::RebootingMotors);
        let m = cell_transition(m, CellEvent::RebootFail).unwrap();
        assert_eq!(m.phase, CellPhase::AwaitingIntervention);
    }

    #[test]
    fn fault_during_reset_keeps_reset_counter() {
        let m = resetting()
            .replay([
                CellEvent::ResetFail,
                CellEvent::ResetStart,
                CellEvent::MotorFault,
                CellEvent::RebootStart,
                CellEvent::RebootOk,
                CellEvent::ResetStart,
            ])
            .unwrap();
        assert_eq!(m.consecutive_reset_failures, 1);
    }

    #[test]
    fn resume_with_pending_cooldown_cools_first() {
        let m = CellMachine::default()
            .replay([
                CellEvent::Escalate(InterventionReason::InvalidStateDetected),
                CellEvent::CooldownDue,
                CellEvent::Resume,
            ])
            .unwrap();
        assert_eq!(m.phase, CellPhase::CoolingDown);
    }

    #[test]
    fn resume_only_from_awaiting() {
        assert!(cell_transition(CellMachine::default(), CellEvent::Resume).is_err());
    }
}
