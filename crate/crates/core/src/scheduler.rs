//! Per-cell FIFO queues, between-job cooldowns and the job store.
//!
//! The store is the single writer of job and cell-queue state: every
//! mutation goes through a [`Scheduler`] method holding one lock, and
//! readers get cloned snapshots.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use tokio_util::sync::CancellationToken;

pub use crate::clock::Window;
use crate::clock::Clock;
use crate::engine::{EngineError, EngineListener, EvaluationResult};
use crate::model::{
    CellEvent, CellId, CellMachine, CellPhase, EpisodeRecord, EvaluationJob, InterventionTicket, JobEvent, JobId,
    JobStatus, TaskId, TransitionError, Verdict,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub cooldown_period_s: f64,
    /// Active time after which a cooldown is due.
    pub cooldown_interval_s: f64,
    /// Pending jobs one submitter may hold per cell; `None` for no limit.
    pub max_queued_per_submitter: Option<u32>,
    /// Per-job event buffer; a subscriber further behind is disconnected.
    /// Set by the service from its API config.
    #[serde(skip)]
    pub event_buffer_size: usize,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cooldown_period_s > 0.0) || !(self.cooldown_interval_s > 0.0) {
            return Err("scheduler: cooldown_period_s and cooldown_interval_s must be positive".into());
        }
        if self.max_queued_per_submitter == Some(0) {
            return Err("scheduler.max_queued_per_submitter: must be at least 1 when set".into());
        }
        if self.event_buffer_size == 0 {
            return Err("scheduler.event_buffer_size: must be at least 1".into());
        }
        Ok(())
    }
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            cooldown_period_s: 1200.0,
            cooldown_interval_s: 21_600.0,
            max_queued_per_submitter: Some(1),
            event_buffer_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub task_id: TaskId,
    pub policy_endpoint: String,
    pub num_trials: u32,
    pub submitter: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("num_trials must be at least 1")]
    InvalidTrialCount,
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown cell {0}")]
    UnknownCell(CellId),
    #[error("job {0} already finished")]
    TerminalJob(JobId),
    #[error("job {0} is already being canceled")]
    AlreadyCanceling(JobId),
    #[error("{submitter} already has {limit} pending job(s) on cell {cell}")]
    RateLimited { submitter: String, cell: CellId, limit: u32 },
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

#[derive(Debug, Clone)]
struct CellSlot {
    tasks: Vec<TaskId>,
    machine: CellMachine,
    pending: VecDeque<JobId>,
    running: Option<JobId>,
    /// Active seconds accrued towards the next cooldown.
    ledger_s: f64,
    total_active_s: f64,
    active_since: Option<f64>,
    cooldown_until: Option<f64>,
    cooldowns: Vec<Window>,
    runs: Vec<Window>,
}

impl CellSlot {
    fn accrued(&self, now: f64) -> f64 {
        self.ledger_s + self.active_since.map_or(0.0, |t| (now - t).max(0.0))
    }
}

/// Read-only view of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSnapshot {
    pub cell_id: CellId,
    pub tasks: Vec<TaskId>,
    pub phase: CellPhase,
    pub machine: CellMachine,
    pub running_job: Option<JobId>,
    pub queue: Vec<JobId>,
    pub cooldown_until: Option<f64>,
    pub active_since_cooldown_s: f64,
    pub total_active_s: f64,
    pub cooldowns: Vec<Window>,
    pub job_runs: Vec<Window>,
}

/// A job handed to a cell worker.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub job_id: JobId,
    pub cell_id: CellId,
    pub task_id: TaskId,
    pub policy_endpoint: String,
    pub num_trials: u32,
    pub cancel: CancellationToken,
    /// Cell machine to hand to the engine.
    pub machine: CellMachine,
}

/// Live progress of one job. Subscribers first receive a
/// [`JobStreamEvent::Snapshot`], then every later event without gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JobStreamEvent {
    Snapshot { job_id: JobId, status: JobStatus, episodes: Vec<EpisodeEvent> },
    Episode(EpisodeEvent),
    Status { job_id: JobId, status: JobStatus },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEvent {
    pub index: u32,
    pub verdict: Verdict,
    pub valid: bool,
    /// Successes over valid episodes so far.
    pub running_rate: f64,
}

impl JobStreamEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobStreamEvent::Status { status, .. } if status.is_terminal())
    }
}

fn episode_events(episodes: &[EpisodeRecord]) -> Vec<EpisodeEvent> {
    let mut valid = 0u32;
    let mut successes = 0u32;
    episodes
        .iter()
        .map(|e| {
            if e.valid {
                valid += 1;
                successes += u32::from(e.is_success());
            }
            EpisodeEvent {
                index: e.index,
                verdict: e.success_verdict,
                valid: e.valid,
                running_rate: if valid == 0 { 0.0 } else { successes as f64 / valid as f64 },
            }
        })
        .collect()
}

#[derive(Debug, Default)]
struct Store {
    jobs: BTreeMap<JobId, EvaluationJob>,
    cells: BTreeMap<CellId, CellSlot>,
    task_cell: HashMap<TaskId, CellId>,
    cancels: HashMap<JobId, CancellationToken>,
    canceling: HashSet<JobId>,
    streams: HashMap<JobId, broadcast::Sender<JobStreamEvent>>,
    next_id: u64,
}

impl Store {
    fn publish(&self, job_id: &JobId, event: JobStreamEvent) {
        if let Some(tx) = self.streams.get(job_id) {
            let _ = tx.send(event);
        }
    }

    fn set_status(&mut self, job_id: &JobId, event: JobEvent) -> Result<JobStatus, SchedulerError> {
        let job = self.jobs.get_mut(job_id).ok_or_else(|| SchedulerError::UnknownJob(job_id.clone()))?;
        let before = job.status;
        let after = job.apply(event)?;
        if before != after {
            self.publish(job_id, JobStreamEvent::Status { job_id: job_id.clone(), status: after });
        }
        Ok(after)
    }
}

/// Job store plus dispatcher. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct Scheduler {
    store: Arc<Mutex<Store>>,
    clock: Arc<dyn Clock>,
    config: SchedulerConfig,
}

impl Scheduler {
    /// `cells` binds every cell to the tasks it hosts; a task belongs to at
    /// most one cell.
    pub fn new(cells: Vec<(CellId, Vec<TaskId>)>, clock: Arc<dyn Clock>, config: SchedulerConfig) -> Self {
        let mut store = Store::default();
        for (cell_id, tasks) in cells {
            for t in &tasks {
                store.task_cell.insert(t.clone(), cell_id.clone());
            }
            store.cells.insert(
                cell_id,
                CellSlot {
                    tasks,
                    machine: CellMachine::default(),
                    pending: VecDeque::new(),
                    running: None,
                    ledger_s: 0.0,
                    total_active_s: 0.0,
                    active_since: None,
                    cooldown_until: None,
                    cooldowns: Vec::new(),
                    runs: Vec::new(),
                },
            );
        }
        Self { store: Arc::new(Mutex::new(store)), clock, config }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn cell_for_task(&self, task: &TaskId) -> Option<CellId> {
        self.store.lock().task_cell.get(task).cloned()
    }

    /// Queue a job at the tail of its cell's FIFO.
    pub fn submit(&self, req: SubmitRequest) -> Result<JobId, SchedulerError> {
        if req.num_trials == 0 {
            return Err(SchedulerError::InvalidTrialCount);
        }
        let now = self.clock.now();
        let mut store = self.store.lock();
        let cell_id = store.task_cell.get(&req.task_id).cloned().ok_or_else(|| SchedulerError::UnknownTask(req.task_id.clone()))?;
        if let Some(limit) = self.config.max_queued_per_submitter {
            let slot = &store.cells[&cell_id];
            let mine = slot.pending.iter().filter(|id| store.jobs[*id].submitter == req.submitter).count();
            if mine as u32 >= limit {
                return Err(SchedulerError::RateLimited { submitter: req.submitter, cell: cell_id, limit });
            }
        }
        store.next_id += 1;
        let job_id = JobId(format!("job-{:06}", store.next_id));
        let job = EvaluationJob {
            job_id: job_id.clone(),
            submitter: req.submitter,
            task_id: req.task_id,
            cell_id: cell_id.clone(),
            policy_endpoint: req.policy_endpoint,
            num_trials: req.num_trials,
            status: JobStatus::Queued,
            submitted_at: now,
            started_at: None,
            finished_at: None,
            episodes: Vec::new(),
            failure: None,
        };
        store.jobs.insert(job_id.clone(), job);
        let (tx, _) = broadcast::channel(self.config.event_buffer_size.max(1));
        store.streams.insert(job_id.clone(), tx);
        store.cells.get_mut(&cell_id).expect("bound cell").pending.push_back(job_id.clone());
        Ok(job_id)
    }

    /// Start cooldowns that are due and hand queue heads to idle cells.
    pub fn dispatch_tick(&self) -> Vec<Assignment> {
        let now = self.clock.now();
        let mut guard = self.store.lock();
        let store = &mut *guard;
        let mut out = Vec::new();
        let mut blocked = Vec::new();
        for (cell_id, slot) in store.cells.iter_mut() {
            if slot.machine.phase == CellPhase::CoolingDown && slot.cooldown_until.is_some_and(|t| now >= t) {
                let _ = slot.machine.apply(CellEvent::CooldownDone);
                slot.cooldown_until = None;
            }
            let idle = slot.machine.phase == CellPhase::Idle && slot.running.is_none();
            if idle && slot.ledger_s >= self.config.cooldown_interval_s {
                let _ = slot.machine.apply(CellEvent::CooldownDue);
            }
            if slot.machine.phase == CellPhase::CoolingDown && slot.cooldown_until.is_none() {
                // Entered on this tick or at the end of the last job.
                slot.ledger_s = (slot.ledger_s - self.config.cooldown_interval_s).max(0.0);
                slot.cooldown_until = Some(now + self.config.cooldown_period_s);
                slot.cooldowns.push(Window { start: now, end: now + self.config.cooldown_period_s });
            }
            if slot.machine.phase == CellPhase::CoolingDown {
                if let Some(head) = slot.pending.front() {
                    blocked.push(head.clone());
                }
                continue;
            }
            if !(slot.machine.phase == CellPhase::Idle && slot.running.is_none() && !slot.machine.job_active) {
                continue;
            }
            let Some(job_id) = slot.pending.pop_front() else { continue };
            let machine = slot.machine.clone();
            let _ = slot.machine.apply(CellEvent::JobStart);
            slot.running = Some(job_id.clone());
            slot.active_since = Some(now);
            let cancel = CancellationToken::new();
            store.cancels.insert(job_id.clone(), cancel.clone());
            let job = store.jobs.get_mut(&job_id).expect("queued job exists");
            job.started_at = Some(now);
            out.push(Assignment {
                job_id: job_id.clone(),
                cell_id: cell_id.clone(),
                task_id: job.task_id.clone(),
                policy_endpoint: job.policy_endpoint.clone(),
                num_trials: job.num_trials,
                cancel,
                machine,
            });
        }
        for a in &out {
            let _ = store.set_status(&a.job_id, JobEvent::Start);
        }
        for id in blocked {
            if store.jobs[&id].status == JobStatus::Queued {
                let _ = store.set_status(&id, JobEvent::Block);
            }
        }
        out
    }

    /// Record that a running job's cell is still active; defers a due
    /// cooldown to the end of the job.
    pub fn note_progress(&self, cell_id: &CellId) {
        let now = self.clock.now();
        let mut store = self.store.lock();
        if let Some(slot) = store.cells.get_mut(cell_id) {
            if slot.running.is_some() && slot.accrued(now) >= self.config.cooldown_interval_s && !slot.machine.cooldown_pending {
                let _ = slot.machine.apply(CellEvent::CooldownDue);
            }
        }
    }

    /// Take back a finished engine run and settle the job.
    pub fn finish(&self, job_id: &JobId, outcome: &Result<EvaluationResult, EngineError>) -> Result<JobStatus, SchedulerError> {
        let now = self.clock.now();
        let mut guard = self.store.lock();
        let store = &mut *guard;
        let job = store.jobs.get(job_id).ok_or_else(|| SchedulerError::UnknownJob(job_id.clone()))?;
        let cell_id = job.cell_id.clone();

        let (event, failure) = match outcome {
            Ok(_) => (JobEvent::Complete, None),
            Err(EngineError::Canceled { .. }) => (JobEvent::Cancel, None),
            Err(e) => (JobEvent::Fail, Some(e.to_string())),
        };
        let job = store.jobs.get_mut(job_id).expect("checked above");
        if let Ok(result) = outcome {
            // Listener updates already carry every episode; trust the result.
            if job.episodes.len() != result.episodes.len() {
                job.episodes = result.episodes.iter().map(strip_frames).collect();
            }
        }
        if job.status == JobStatus::AwaitingIntervention && event != JobEvent::Cancel {
            job.apply(JobEvent::Resume)?;
        }
        job.failure = failure;
        job.finished_at = Some(now);
        let status = store.set_status(job_id, event)?;

        store.cancels.remove(job_id);
        store.canceling.remove(job_id);
        let slot = store.cells.get_mut(&cell_id).expect("bound cell");
        if let Some(start) = slot.active_since.take() {
            let active = (now - start).max(0.0);
            slot.ledger_s += active;
            slot.total_active_s += active;
            slot.runs.push(Window { start, end: now });
        }
        slot.running = None;
        if slot.ledger_s >= self.config.cooldown_interval_s && slot.machine.phase != CellPhase::CoolingDown {
            let _ = slot.machine.apply(CellEvent::CooldownDue);
        }
        if slot.machine.job_active {
            let _ = slot.machine.apply(CellEvent::JobEnd);
        }
        if slot.machine.phase == CellPhase::CoolingDown && slot.cooldown_until.is_none() {
            slot.ledger_s = (slot.ledger_s - self.config.cooldown_interval_s).max(0.0);
            slot.cooldown_until = Some(now + self.config.cooldown_period_s);
            slot.cooldowns.push(Window { start: now, end: now + self.config.cooldown_period_s });
        }
        Ok(status)
    }

    /// Cancel a job. Queued jobs leave the queue at once; running jobs stop
    /// at the next step boundary and settle through [`Scheduler::finish`].
    pub fn cancel(&self, job_id: &JobId) -> Result<JobStatus, SchedulerError> {
        let now = self.clock.now();
        let mut guard = self.store.lock();
        let store = &mut *guard;
        let job = store.jobs.get(job_id).ok_or_else(|| SchedulerError::UnknownJob(job_id.clone()))?;
        match job.status {
            s if s.is_terminal() => Err(SchedulerError::TerminalJob(job_id.clone())),
            s if s.is_pending() => {
                let cell_id = job.cell_id.clone();
                store.cells.get_mut(&cell_id).expect("bound cell").pending.retain(|id| id != job_id);
                store.jobs.get_mut(job_id).expect("exists").finished_at = Some(now);
                store.set_status(job_id, JobEvent::Cancel)
            }
            s => {
                if !store.canceling.insert(job_id.clone()) {
                    return Err(SchedulerError::AlreadyCanceling(job_id.clone()));
                }
                if let Some(token) = store.cancels.get(job_id) {
                    token.cancel();
                }
                Ok(s)
            }
        }
    }

    /// Apply `Resume` to a cell whose engine is gone (its job was canceled
    /// while the cell waited for an operator).
    pub fn resume_idle_cell(&self, cell_id: &CellId) -> Result<CellPhase, SchedulerError> {
        let mut store = self.store.lock();
        let slot = store.cells.get_mut(cell_id).ok_or_else(|| SchedulerError::UnknownCell(cell_id.clone()))?;
        Ok(slot.machine.apply(CellEvent::Resume)?)
    }

    /// Listener feeding engine progress for `job_id` into the store.
    pub fn listener(&self, job_id: JobId, cell_id: CellId) -> JobListener {
        JobListener { scheduler: self.clone(), job_id, cell_id }
    }

    pub fn job(&self, job_id: &JobId) -> Option<EvaluationJob> {
        self.store.lock().jobs.get(job_id).cloned()
    }

    /// Every job in submission order.
    pub fn jobs(&self) -> Vec<EvaluationJob> {
        self.store.lock().jobs.values().cloned().collect()
    }

    pub fn cells(&self) -> Vec<CellSnapshot> {
        let store = self.store.lock();
        store.cells.iter().map(|(id, slot)| snapshot(id, slot, self.clock.now())).collect()
    }

    pub fn cell(&self, cell_id: &CellId) -> Option<CellSnapshot> {
        let store = self.store.lock();
        store.cells.get(cell_id).map(|slot| snapshot(cell_id, slot, self.clock.now()))
    }

    /// Snapshot of `job_id` plus a receiver for everything after it.
    pub fn subscribe(&self, job_id: &JobId) -> Option<(JobStreamEvent, broadcast::Receiver<JobStreamEvent>)> {
        let store = self.store.lock();
        let job = store.jobs.get(job_id)?;
        let rx = store.streams.get(job_id)?.subscribe();
        let snapshot = JobStreamEvent::Snapshot {
            job_id: job_id.clone(),
            status: job.status,
            episodes: episode_events(&job.episodes),
        };
        Some((snapshot, rx))
    }

    /// Make the next job id larger than `used`, e.g. after a restart over an
    /// existing report directory.
    pub fn reserve_ids(&self, used: u64) {
        let mut store = self.store.lock();
        store.next_id = store.next_id.max(used);
    }

    /// Replace a job's episode list, e.g. after relabeling.
    pub fn replace_episodes(&self, job_id: &JobId, episodes: Vec<EpisodeRecord>) -> Result<(), SchedulerError> {
        let mut store = self.store.lock();
        let job = store.jobs.get_mut(job_id).ok_or_else(|| SchedulerError::UnknownJob(job_id.clone()))?;
        job.episodes = episodes;
        Ok(())
    }
}

fn strip_frames(e: &EpisodeRecord) -> EpisodeRecord {
    EpisodeRecord { frames: None, ..e.clone() }
}

fn snapshot(id: &CellId, slot: &CellSlot, now: f64) -> CellSnapshot {
    CellSnapshot {
        cell_id: id.clone(),
        tasks: slot.tasks.clone(),
        phase: slot.machine.phase,
        machine: slot.machine.clone(),
        running_job: slot.running.clone(),
        queue: slot.pending.iter().cloned().collect(),
        cooldown_until: slot.cooldown_until,
        active_since_cooldown_s: slot.accrued(now),
        total_active_s: slot.total_active_s + slot.active_since.map_or(0.0, |t| (now - t).max(0.0)),
        cooldowns: slot.cooldowns.clone(),
        job_runs: slot.runs.clone(),
    }
}

/// [`EngineListener`] that writes progress of one job into the store.
#[derive(Clone)]
pub struct JobListener {
    scheduler: Scheduler,
    job_id: JobId,
    cell_id: CellId,
}

impl EngineListener for JobListener {
    fn on_cell_event(&self, machine: &CellMachine, event: CellEvent) {
        if event == CellEvent::JobEnd {
            // Settled by `Scheduler::finish`, which owns the cooldown flag.
            return;
        }
        {
            let mut store = self.scheduler.store.lock();
            if let Some(slot) = store.cells.get_mut(&self.cell_id) {
                let pending = slot.machine.cooldown_pending;
                slot.machine = machine.clone();
                slot.machine.cooldown_pending |= pending;
            }
        }
        if matches!(event, CellEvent::TrialEnd | CellEvent::ResetOk | CellEvent::MotorFault) {
            self.scheduler.note_progress(&self.cell_id);
        }
    }

    fn on_episode(&self, record: &EpisodeRecord) {
        let mut guard = self.scheduler.store.lock();
        let store = &mut *guard;
        let Some(job) = store.jobs.get_mut(&self.job_id) else { return };
        job.episodes.push(strip_frames(record));
        let event = episode_events(&job.episodes).pop().expect("just pushed");
        if job.status == JobStatus::Running {
            let _ = job.apply(JobEvent::TrialDone);
        }
        store.publish(&self.job_id, JobStreamEvent::Episode(event));
    }

    fn on_intervention(&self, _ticket: &InterventionTicket) {
        let mut store = self.scheduler.store.lock();
        if store.jobs.get(&self.job_id).is_some_and(|j| j.status == JobStatus::Running) {
            let _ = store.set_status(&self.job_id, JobEvent::Escalate);
        }
    }

    fn on_resumed(&self, _ticket: &InterventionTicket) {
        let mut store = self.scheduler.store.lock();
        if store.jobs.get(&self.job_id).is_some_and(|j| j.status == JobStatus::AwaitingIntervention) {
            let _ = store.set_status(&self.job_id, JobEvent::Resume);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn scheduler(clock: &ManualClock) -> Scheduler {
        Scheduler::new(
            vec![
                ("drawer".into(), vec!["open_drawer".into(), "close_drawer".into()]),
                ("sink".into(), vec!["eggplant_to_sink".into()]),
            ],
            Arc::new(clock.clone()),
            SchedulerConfig::default(),
        )
    }

    fn req(task: &str, who: &str) -> SubmitRequest {
        SubmitRequest {
            task_id: task.into(),
            policy_endpoint: "http://127.0.0.1:1".into(),
            num_trials: 1,
            submitter: who.into(),
        }
    }

    fn done() -> Result<EvaluationResult, EngineError> {
        Ok(EvaluationResult {
            job_id: "x".into(),
            episodes: vec![],
            success_count: 0,
            valid_count: 0,
            motor_failure_reruns: 0,
            interventions: vec![],
            total_eval_steps: 0,
            total_reset_steps: 0,
        })
    }

    #[test]
    fn zero_trials_rejected() {
        let clock = ManualClock::new(0.0);
        let mut r = req("open_drawer", "a");
        r.num_trials = 0;
        assert_eq!(scheduler(&clock).submit(r), Err(SchedulerError::InvalidTrialCount));
    }

    #[test]
    fn unknown_task_rejected() {
        let clock = ManualClock::new(0.0);
        assert!(matches!(scheduler(&clock).submit(req("juggle", "a")), Err(SchedulerError::UnknownTask(_))));
    }

    #[test]
    fn two_cells_run_concurrently() {
        let clock = ManualClock::new(0.0);
        let s = scheduler(&clock);
        s.submit(req("open_drawer", "a")).unwrap();
        s.submit(req("eggplant_to_sink", "b")).unwrap();
        let started = s.dispatch_tick();
        assert_eq!(started.len(), 2);
    }

    #[test]
    fn empty_queue_assigns_nothing() {
        let clock = ManualClock::new(0.0);
        assert!(scheduler(&clock).dispatch_tick().is_empty());
    }

    #[test]
    fn cancel_semantics() {
        let clock = ManualClock::new(0.0);
        let s = scheduler(&clock);
        let a = s.submit(req("open_drawer", "a")).unwrap();
        let b = s.submit(req("open_drawer", "b")).unwrap();
        assert_eq!(s.cancel(&b), Ok(JobStatus::Canceled));
        let started = s.dispatch_tick();
        assert_eq!(started[0].job_id, a);
        assert_eq!(s.cancel(&a), Ok(JobStatus::Running));
        assert!(started[0].cancel.is_cancelled());
        assert_eq!(s.cancel(&a), Err(SchedulerError::AlreadyCanceling(a.clone())));
        assert_eq!(s.cancel(&b), Err(SchedulerError::TerminalJob(b.clone())));
        // A canceled engine run hands back its partial result.
        let outcome = Err(EngineError::Canceled { result: Box::new(done().unwrap()), open_ticket: None });
        assert_eq!(s.finish(&a, &outcome), Ok(JobStatus::Canceled));
        assert!(s.dispatch_tick().is_empty());
    }

    #[test]
    fn rate_limit_counts_pending_jobs_per_cell() {
        let clock = ManualClock::new(0.0);
        let s = Scheduler::new(
            vec![("drawer".into(), vec!["open_drawer".into()])],
            Arc::new(clock.clone()),
            SchedulerConfig { max_queued_per_submitter: Some(1), ..Default::default() },
        );
        s.submit(req("open_drawer", "a")).unwrap();
        assert!(matches!(s.submit(req("open_drawer", "a")), Err(SchedulerError::RateLimited { .. })));
        s.submit(req("open_drawer", "b")).unwrap();
    }

    #[test]
    fn cooldown_is_inserted_between_jobs_after_six_active_hours() {
        let clock = ManualClock::new(0.0);
        let s = scheduler(&clock);
        let first = s.submit(req("open_drawer", "a")).unwrap();
        let second = s.submit(req("open_drawer", "b")).unwrap();
        s.dispatch_tick();
        clock.advance(3.0 * 3600.0);
        s.note_progress(&"drawer".into());
        clock.advance(3.5 * 3600.0);
        s.note_progress(&"drawer".into());
        // Due mid-job: deferred, the job keeps running.
        let cell = s.cell(&"drawer".into()).unwrap();
        assert_eq!(cell.phase, CellPhase::Idle);
        assert!(cell.machine.cooldown_pending);
        let unreachable = Err(EngineError::PolicyUnreachable { result: Box::new(done().unwrap()), errors: 5, detail: "down".into() });
        assert_eq!(s.finish(&first, &unreachable), Ok(JobStatus::Failed));
        assert!(s.dispatch_tick().is_empty());
        assert_eq!(s.job(&second).unwrap().status, JobStatus::CoolingDownBlocked);
        clock.advance(1199.0);
        assert!(s.dispatch_tick().is_empty());
        clock.advance(1.0);
        let started = s.dispatch_tick();
        assert_eq!(started[0].job_id, second);
        let cell = s.cell(&"drawer".into()).unwrap();
        assert_eq!(cell.cooldowns.len(), 1);
        // The half hour beyond the interval carries over.
        assert!((cell.active_since_cooldown_s - 1800.0).abs() < 1e-6);
    }
}
