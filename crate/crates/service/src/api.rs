//! JSON/HTTP interface used by the operator console and the CLI.

use std::convert::Infallible;
use std::sync::Arc;

use autoeval_core::gateway::PolicyEndpoint;
use autoeval_core::metrics::ReportError;
use autoeval_core::model::{
    CellId, EvaluationJob, InterventionTicket, JobId, JobStatus, TaskId, TaskSpec, Verdict,
};
use autoeval_core::safety::SafetyError;
use autoeval_core::scheduler::{CellSnapshot, JobStreamEvent, SchedulerError, SubmitRequest};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use tower_http::services::ServeDir;

use crate::runtime::{ResumeError, Runtime};

pub const DEFAULT_TRIALS: u32 = 50;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self { status, message: message.to_string() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

impl From<SchedulerError> for ApiError {
    fn from(e: SchedulerError) -> Self {
        let status = match &e {
            SchedulerError::UnknownTask(_) | SchedulerError::UnknownJob(_) | SchedulerError::UnknownCell(_) => {
                StatusCode::NOT_FOUND
            }
            SchedulerError::InvalidTrialCount => StatusCode::BAD_REQUEST,
            SchedulerError::TerminalJob(_)
            | SchedulerError::AlreadyCanceling(_)
            | SchedulerError::RateLimited { .. }
            | SchedulerError::Transition(_) => StatusCode::CONFLICT,
        };
        Self::new(status, e)
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        let status = match &e {
            ReportError::UnknownJob(_) | ReportError::UnknownEpisode { .. } => StatusCode::NOT_FOUND,
            ReportError::InvalidLabel(_) => StatusCode::BAD_REQUEST,
            ReportError::Corrupt { .. } | ReportError::Io(_) | ReportError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e)
    }
}

impl From<ResumeError> for ApiError {
    fn from(e: ResumeError) -> Self {
        let status = match &e {
            ResumeError::UnknownCell(_) => StatusCode::NOT_FOUND,
            ResumeError::Safety(SafetyError::UnknownTicket(_)) => StatusCode::NOT_FOUND,
            ResumeError::Safety(_) => StatusCode::CONFLICT,
        };
        Self::new(status, e)
    }
}

/// Parse a JSON body ourselves so that every rejection is a 400 with a
/// message naming the field.
fn body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid body: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitBody {
    pub task_id: TaskId,
    pub policy_url: String,
    #[serde(default)]
    pub num_trials: Option<u32>,
    #[serde(default)]
    pub submitter: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Submitted {
    pub job_id: JobId,
    pub status: JobStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobView {
    #[serde(flatten)]
    pub job: EvaluationJob,
    pub valid_count: u32,
    pub success_count: u32,
    pub report_url: String,
}

impl JobView {
    fn of(mut job: EvaluationJob, with_episodes: bool) -> Self {
        if !with_episodes {
            job.episodes.clear();
        }
        let (valid_count, success_count) = (job.valid_count(), job.success_count());
        let report_url = format!("/api/reports/{}", job.job_id);
        Self { job, valid_count, success_count, report_url }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellView {
    #[serde(flatten)]
    pub cell: CellSnapshot,
    pub open_ticket: Option<InterventionTicket>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskView {
    #[serde(flatten)]
    pub task: TaskSpec,
    pub cell_id: CellId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelabelBody {
    pub verdict: Verdict,
    pub annotator: String,
}

pub fn router(rt: Arc<Runtime>) -> Router {
    let api = Router::new()
        .route("/api/health", get(|| async { "ok" }))
        .route("/api/tasks", get(list_tasks))
        .route("/api/jobs", get(list_jobs).post(submit))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/events", get(job_events))
        .route("/api/jobs/{id}/cancel", post(cancel_job))
        .route("/api/cells", get(list_cells))
        .route("/api/cells/{id}/resume", post(resume_cell))
        .route("/api/interventions", get(list_interventions))
        .route("/api/reports/{id}", get(get_report))
        .route("/api/reports/{id}/frames/{name}", get(get_frame))
        .route("/api/reports/{id}/archive", get(get_archive))
        .route("/api/reports/{id}/episodes/{index}/relabel", post(relabel));
    let api = match &rt.config.api.console_root {
        Some(root) => api.fallback_service(ServeDir::new(root).append_index_html_on_directories(true)),
        None => api,
    };
    api.with_state(rt)
}

async fn list_tasks(State(rt): State<Arc<Runtime>>) -> Json<Vec<TaskView>> {
    let views = rt
        .tasks()
        .into_iter()
        .filter_map(|task| Some(TaskView { cell_id: rt.scheduler.cell_for_task(&task.task_id)?, task }))
        .collect();
    Json(views)
}

async fn submit(State(rt): State<Arc<Runtime>>, bytes: Bytes) -> Result<(StatusCode, Json<Submitted>), ApiError> {
    let req: SubmitBody = body(&bytes)?;
    PolicyEndpoint::new(req.policy_url.clone())
        .validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("policy_url: {e}")))?;
    let submitter = req.submitter.filter(|s| !s.trim().is_empty()).unwrap_or_else(|| "anonymous".into());
    let job_id = rt.submit(SubmitRequest {
        task_id: req.task_id,
        policy_endpoint: req.policy_url,
        num_trials: req.num_trials.unwrap_or(DEFAULT_TRIALS),
        submitter,
    })?;
    Ok((StatusCode::ACCEPTED, Json(Submitted { job_id, status: JobStatus::Queued })))
}

async fn list_jobs(State(rt): State<Arc<Runtime>>) -> Json<Vec<JobView>> {
    Json(rt.scheduler.jobs().into_iter().map(|j| JobView::of(j, false)).collect())
}

fn unknown_job(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}"))
}

async fn get_job(State(rt): State<Arc<Runtime>>, Path(id): Path<String>) -> Result<Json<JobView>, ApiError> {
    let job = rt.scheduler.job(&JobId::from(id.as_str())).ok_or_else(|| unknown_job(&id))?;
    Ok(Json(JobView::of(job, true)))
}

async fn cancel_job(State(rt): State<Arc<Runtime>>, Path(id): Path<String>) -> Result<Json<JobView>, ApiError> {
    let job_id = JobId::from(id.as_str());
    rt.cancel(&job_id)?;
    let job = rt.scheduler.job(&job_id).ok_or_else(|| unknown_job(&id))?;
    Ok(Json(JobView::of(job, false)))
}

fn sse_event(ev: &JobStreamEvent) -> Event {
    let name = match ev {
        JobStreamEvent::Snapshot { .. } => "snapshot",
        JobStreamEvent::Episode(_) => "episode",
        JobStreamEvent::Status { .. } => "status",
    };
    Event::default().event(name).json_data(ev).unwrap_or_else(|_| Event::default().event(name))
}

enum StreamState {
    Start(JobStreamEvent, tokio::sync::broadcast::Receiver<JobStreamEvent>),
    Live(tokio::sync::broadcast::Receiver<JobStreamEvent>),
    Done,
}

/// Snapshot first, then every event in order. The stream ends after a
/// terminal status, or with a `lagged` event if this subscriber fell
/// behind; reconnecting yields a fresh snapshot.
async fn job_events(
    State(rt): State<Arc<Runtime>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let (snapshot, rx) = rt.scheduler.subscribe(&JobId::from(id.as_str())).ok_or_else(|| unknown_job(&id))?;
    let events = stream::unfold(StreamState::Start(snapshot, rx), |state| async move {
        match state {
            StreamState::Start(snapshot, rx) => {
                let terminal = matches!(&snapshot, JobStreamEvent::Snapshot { status, .. } if status.is_terminal());
                let next = if terminal { StreamState::Done } else { StreamState::Live(rx) };
                Some((Ok(sse_event(&snapshot)), next))
            }
            StreamState::Live(mut rx) => match rx.recv().await {
                Ok(ev) => {
                    let next = if ev.is_terminal() { StreamState::Done } else { StreamState::Live(rx) };
                    Some((Ok(sse_event(&ev)), next))
                }
                Err(RecvError::Lagged(n)) => {
                    Some((Ok(Event::default().event("lagged").data(n.to_string())), StreamState::Done))
                }
                Err(RecvError::Closed) => None,
            },
            StreamState::Done => None,
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn list_cells(State(rt): State<Arc<Runtime>>) -> Json<Vec<CellView>> {
    Json(
        rt.scheduler
            .cells()
            .into_iter()
            .map(|cell| CellView { open_ticket: rt.safety.unresolved_for(&cell.cell_id), cell })
            .collect(),
    )
}

async fn resume_cell(
    State(rt): State<Arc<Runtime>>,
    Path(id): Path<String>,
) -> Result<Json<InterventionTicket>, ApiError> {
    Ok(Json(rt.resume_cell(&CellId::from(id.as_str())).await?))
}

async fn list_interventions(State(rt): State<Arc<Runtime>>) -> Json<Vec<InterventionTicket>> {
    Json(rt.safety.tickets())
}

async fn get_report(State(rt): State<Arc<Runtime>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let report = rt.reports.report(&JobId::from(id.as_str()))?;
    Ok(Json(report).into_response())
}

async fn get_frame(
    State(rt): State<Arc<Runtime>>,
    Path((id, name)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let path = rt
        .reports
        .frame_path(&JobId::from(id.as_str()), &name)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no frame {name} for job {id}")))?;
    let bytes = tokio::fs::read(path).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_archive(State(rt): State<Arc<Runtime>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let job = JobId::from(id.as_str());
    let reports = rt.reports.clone();
    let bytes = tokio::task::spawn_blocking(move || reports.archive(&job))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))??;
    let disposition = format!("attachment; filename=\"{id}.tar.gz\"");
    Ok(([(header::CONTENT_TYPE, "application/gzip".to_owned()), (header::CONTENT_DISPOSITION, disposition)], bytes)
        .into_response())
}

async fn relabel(
    State(rt): State<Arc<Runtime>>,
    Path((id, index)): Path<(String, u32)>,
    bytes: Bytes,
) -> Result<Response, ApiError> {
    let req: RelabelBody = body(&bytes)?;
    if req.annotator.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "annotator must not be empty"));
    }
    let report = rt.reports.relabel(&JobId::from(id.as_str()), index, req.verdict, &req.annotator, rt.clock.now())?;
    Ok(Json(report).into_response())
}
