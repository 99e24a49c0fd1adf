//! Wires cells, scheduler, engine workers and the report store together.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use autoeval_core::clock::{Clock, ManualClock, SystemClock};
use autoeval_core::engine::{Engine, EngineContext, EngineError, EngineListener, EvaluationResult};
use autoeval_core::gateway::{GatewayClient, PolicyEndpoint};
use autoeval_core::metrics::{JobSummary, ReportError, ReportStore};
use autoeval_core::model::{
    CellEvent, CellId, CellMachine, CellPhase, EpisodeRecord, InterventionTicket, JobId, TaskId, TaskSpec,
};
use autoeval_core::safety::{SafetyError, SafetyMonitor};
use autoeval_core::scheduler::{Assignment, JobListener, Scheduler, SchedulerError, SubmitRequest};
use autoeval_core::sim::{spawn_builtin_classifier_server, ServerHandle, SimCell, SimError};
use tokio::sync::{Mutex, Notify};
use tokio_util::sync::CancellationToken;

use crate::config::{ClockKind, ServiceConfig};

/// How often the dispatcher looks for due cooldowns without being woken.
const TICK: Duration = Duration::from_millis(200);

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("cell {cell}: {source}")]
    Sim { cell: CellId, source: SimError },
    #[error(transparent)]
    Report(#[from] ReportError),
}

#[derive(Debug, thiserror::Error)]
pub enum ResumeError {
    #[error("unknown cell {0}")]
    UnknownCell(CellId),
    #[error(transparent)]
    Safety(#[from] SafetyError),
}

struct CellRuntime {
    sim: Mutex<SimCell>,
    tasks: HashMap<TaskId, TaskSpec>,
    classifiers: HashMap<TaskId, PolicyEndpoint>,
}

/// A running service instance. Dropping the last handle does not stop the
/// dispatcher; call [`Runtime::shutdown`].
pub struct Runtime {
    pub config: ServiceConfig,
    pub scheduler: Scheduler,
    pub safety: SafetyMonitor,
    pub reports: ReportStore,
    pub clock: Arc<dyn Clock>,
    manual: Option<ManualClock>,
    gateway: GatewayClient,
    cells: HashMap<CellId, Arc<CellRuntime>>,
    wake: Notify,
    stop: CancellationToken,
    _servers: Vec<ServerHandle>,
}

impl Runtime {
    /// Build every cell, start builtin classifiers and the dispatcher.
    pub async fn start(config: ServiceConfig) -> Result<Arc<Self>, RuntimeError> {
        let manual = (config.clock == ClockKind::Simulated).then(|| ManualClock::new(0.0));
        let clock: Arc<dyn Clock> = match &manual {
            Some(m) => Arc::new(m.clone()),
            None => Arc::new(SystemClock),
        };
        let reports = ReportStore::new(&config.api.static_report_root, config.report)?;
        let mut scheduler_config = config.scheduler.clone();
        scheduler_config.event_buffer_size = config.api.event_buffer_size;
        let scheduler = Scheduler::new(
            config.cells.iter().map(|c| (c.cell_id.clone(), c.tasks.clone())).collect(),
            clock.clone(),
            scheduler_config,
        );
        scheduler.reserve_ids(highest_job_number(&reports));

        let mut cells = HashMap::new();
        let mut servers = Vec::new();
        for cell in &config.cells {
            let specs = config.tasks_of(cell);
            let err = |source| RuntimeError::Sim { cell: cell.cell_id.clone(), source };
            let mut classifiers = HashMap::new();
            for (i, spec) in specs.iter().enumerate() {
                let endpoint = match &cell.classifier_url {
                    Some(url) => PolicyEndpoint::new(url.clone()),
                    None => {
                        let server = spawn_builtin_classifier_server(
                            cell.fault.classifier_confusion,
                            spec.clone(),
                            cell.geometry.clone(),
                            cell.seed.wrapping_add(i as u64 + 1),
                            "127.0.0.1:0".parse().unwrap(),
                        )
                        .await
                        .map_err(err)?;
                        let endpoint = server.endpoint.clone();
                        servers.push(server);
                        endpoint
                    }
                };
                classifiers.insert(spec.task_id.clone(), endpoint);
            }
            let sim = SimCell::new(cell.cell_id.clone(), specs[0].clone(), cell.geometry.clone(), cell.fault.clone(), cell.seed)
                .map_err(err)?;
            cells.insert(
                cell.cell_id.clone(),
                Arc::new(CellRuntime {
                    sim: Mutex::new(sim),
                    tasks: specs.into_iter().map(|s| (s.task_id.clone(), s)).collect(),
                    classifiers,
                }),
            );
        }

        let runtime = Arc::new(Self {
            safety: SafetyMonitor::new(config.notifications.clone()),
            config,
            scheduler,
            reports,
            clock,
            manual,
            gateway: GatewayClient::new(),
            cells,
            wake: Notify::new(),
            stop: CancellationToken::new(),
            _servers: servers,
        });
        tokio::spawn(dispatcher(runtime.clone()));
        Ok(runtime)
    }

    pub fn task(&self, task: &TaskId) -> Option<&TaskSpec> {
        self.cells.values().find_map(|c| c.tasks.get(task))
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        let mut all: Vec<_> = self.cells.values().flat_map(|c| c.tasks.values().cloned()).collect();
        all.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        all
    }

    pub fn submit(&self, req: SubmitRequest) -> Result<JobId, SchedulerError> {
        let id = self.scheduler.submit(req)?;
        self.persist(&id);
        self.wake.notify_one();
        Ok(id)
    }

    pub fn cancel(&self, job: &JobId) -> Result<(), SchedulerError> {
        self.scheduler.cancel(job)?;
        self.persist(job);
        self.wake.notify_one();
        Ok(())
    }

    /// Operator says the cell is restored. Resolves the open ticket; an
    /// engine parked on it continues by itself, an idle cell is restored
    /// here.
    pub async fn resume_cell(&self, cell_id: &CellId) -> Result<InterventionTicket, ResumeError> {
        let cell = self.cells.get(cell_id).ok_or_else(|| ResumeError::UnknownCell(cell_id.clone()))?;
        let ticket = self.safety.resolve_cell(cell_id, self.clock.now())?;
        let snapshot = self.scheduler.cell(cell_id).ok_or_else(|| ResumeError::UnknownCell(cell_id.clone()))?;
        if snapshot.running_job.is_none() && snapshot.phase == CellPhase::AwaitingIntervention {
            if let Err(e) = cell.sim.lock().await.operator_restore() {
                tracing::warn!(cell = %cell_id, error = %e, "operator restore failed");
            }
            if let Err(e) = self.scheduler.resume_idle_cell(cell_id) {
                tracing::warn!(cell = %cell_id, error = %e, "could not resume idle cell");
            }
        }
        self.wake.notify_one();
        Ok(ticket)
    }

    /// Stop dispatching and cancel running jobs.
    pub fn shutdown(&self) {
        self.stop.cancel();
        for job in self.scheduler.jobs() {
            if !job.status.is_terminal() {
                let _ = self.scheduler.cancel(&job.job_id);
            }
        }
    }

    fn interventions_of(&self, job: &JobId) -> Vec<InterventionTicket> {
        self.safety.tickets().into_iter().filter(|t| t.job_id.as_ref() == Some(job)).collect()
    }

    /// Write the current job summary to the report store.
    fn persist(&self, job: &JobId) {
        let Some(state) = self.scheduler.job(job) else { return };
        let summary = JobSummary::of(&state, self.interventions_of(job));
        if let Err(e) = self.reports.write_job(&summary) {
            tracing::error!(job = %job, error = %e, "writing job summary failed");
        }
    }

    /// In simulated time nothing advances the clock while every cell
    /// idles, so skip ahead to the earliest cooldown end.
    fn skip_idle_time(&self) -> bool {
        let Some(manual) = &self.manual else { return false };
        let cells = self.scheduler.cells();
        if cells.iter().any(|c| c.running_job.is_some()) {
            return false;
        }
        let now = self.clock.now();
        let next = cells
            .iter()
            .filter(|c| !c.queue.is_empty())
            .filter_map(|c| c.cooldown_until)
            .filter(|&t| t > now)
            .min_by(f64::total_cmp);
        match next {
            Some(t) => {
                manual.set(t);
                true
            }
            None => false,
        }
    }
}

fn highest_job_number(reports: &ReportStore) -> u64 {
    let Ok(entries) = std::fs::read_dir(reports.root()) else { return 0 };
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("job-")?.parse::<u64>().ok())
        .max()
        .unwrap_or(0)
}

async fn dispatcher(rt: Arc<Runtime>) {
    loop {
        for assignment in rt.scheduler.dispatch_tick() {
            rt.persist(&assignment.job_id);
            tokio::spawn(run_job(rt.clone(), assignment));
        }
        if rt.skip_idle_time() {
            continue;
        }
        tokio::select! {
            _ = rt.stop.cancelled() => return,
            _ = rt.wake.notified() => {}
            _ = tokio::time::sleep(TICK) => {}
        }
    }
}

/// Forwards engine progress to the scheduler and appends episodes to the
/// job's log as they finish.
struct WorkerListener {
    job: JobListener,
    job_id: JobId,
    reports: ReportStore,
}

impl EngineListener for WorkerListener {
    fn on_cell_event(&self, machine: &CellMachine, event: CellEvent) {
        self.job.on_cell_event(machine, event);
    }

    fn on_episode(&self, record: &EpisodeRecord) {
        if let Err(e) = self.reports.append_episode(&self.job_id, record) {
            tracing::error!(job = %self.job_id, error = %e, "appending episode failed");
        }
        self.job.on_episode(record);
    }

    fn on_intervention(&self, ticket: &InterventionTicket) {
        self.job.on_intervention(ticket);
    }

    fn on_resumed(&self, ticket: &InterventionTicket) {
        self.job.on_resumed(ticket);
    }
}

async fn run_job(rt: Arc<Runtime>, a: Assignment) {
    let cell = rt.cells[&a.cell_id].clone();
    let outcome = {
        let mut sim = cell.sim.lock().await;
        evaluate(&rt, &cell, &mut sim, &a).await
    };
    match &outcome {
        Ok(r) => tracing::info!(job = %a.job_id, successes = r.success_count, valid = r.valid_count, "job finished"),
        Err(e) => tracing::warn!(job = %a.job_id, error = %e, "job stopped"),
    }
    if let Err(e) = rt.scheduler.finish(&a.job_id, &outcome) {
        tracing::error!(job = %a.job_id, error = %e, "settling job failed");
    }
    rt.persist(&a.job_id);
    if let Err(e) = rt.reports.regenerate(&a.job_id) {
        tracing::error!(job = %a.job_id, error = %e, "writing report failed");
    }
    rt.wake.notify_one();
}

async fn evaluate(
    rt: &Runtime,
    cell: &CellRuntime,
    sim: &mut SimCell,
    a: &Assignment,
) -> Result<EvaluationResult, EngineError> {
    let spec = cell.tasks[&a.task_id].clone();
    sim.set_task(spec).map_err(EngineError::Sim)?;
    let listener = WorkerListener {
        job: rt.scheduler.listener(a.job_id.clone(), a.cell_id.clone()),
        job_id: a.job_id.clone(),
        reports: rt.reports.clone(),
    };
    let ctx = EngineContext {
        gateway: rt.gateway.clone(),
        policy: PolicyEndpoint::new(a.policy_endpoint.clone())
            .with_timeout_ms(rt.config.policy_timeout_ms)
            .with_retries(rt.config.policy_retries),
        classifier: cell.classifiers[&a.task_id].clone(),
        safety: rt.safety.clone(),
        clock: rt.clock.clone(),
        listener: Arc::new(listener),
        cancel: a.cancel.clone(),
        config: rt.config.engine.clone(),
    };
    Engine::new(a.job_id.clone(), sim, a.machine.clone(), ctx).run_evaluation(a.num_trials).await
}
