//! TOML service configuration. See `docs/config.md` for every key.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use autoeval_core::engine::EngineConfig;
use autoeval_core::gateway::PolicyEndpoint;
use autoeval_core::metrics::ReportConfig;
use autoeval_core::model::{builtin_tasks, validate_task_spec, CellId, TaskId, TaskSpec};
use autoeval_core::safety::NotificationConfig;
use autoeval_core::scheduler::SchedulerConfig;
use autoeval_core::sim::{FaultProfile, SceneGeometry};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    Wall,
    /// Time advances only by simulated work; idle gaps are skipped.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApiConfig {
    pub bind_address: SocketAddr,
    pub static_report_root: PathBuf,
    pub event_buffer_size: usize,
    /// Directory with a built operator console, served at `/`.
    pub console_root: Option<PathBuf>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            bind_address: "127.0.0.1:8080".parse().unwrap(),
            static_report_root: PathBuf::from("reports"),
            event_buffer_size: 256,
            console_root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub cell_id: CellId,
    /// Builtin task ids hosted by this cell; all must share one scene.
    pub tasks: Vec<TaskId>,
    #[serde(default)]
    pub seed: u64,
    /// External classifier server. Without one a builtin classifier is
    /// started per task, using `fault.classifier_confusion`.
    #[serde(default)]
    pub classifier_url: Option<String>,
    #[serde(default)]
    pub fault: FaultProfile,
    #[serde(default)]
    pub geometry: SceneGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default)]
    pub api: ApiConfig,
    #[serde(default)]
    pub clock: ClockKind,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub notifications: Option<NotificationConfig>,
    /// Per-request timeout for policy servers.
    #[serde(default = "default_policy_timeout")]
    pub policy_timeout_ms: u64,
    #[serde(default = "default_policy_retries")]
    pub policy_retries: u32,
    pub cells: Vec<CellConfig>,
}

fn default_policy_timeout() -> u64 {
    PolicyEndpoint::new("").request_timeout_ms
}

fn default_policy_retries() -> u32 {
    PolicyEndpoint::new("").max_retries
}

impl ServiceConfig {
    /// A single-cell config around one builtin task, for tests and demos.
    pub fn single_cell(cell_id: &str, tasks: &[&str]) -> Self {
        Self {
            api: ApiConfig::default(),
            clock: ClockKind::Wall,
            scheduler: SchedulerConfig::default(),
            engine: EngineConfig::default(),
            report: ReportConfig::default(),
            notifications: None,
            policy_timeout_ms: default_policy_timeout(),
            policy_retries: default_policy_retries(),
            cells: vec![CellConfig {
                cell_id: cell_id.into(),
                tasks: tasks.iter().map(|t| TaskId::from(*t)).collect(),
                seed: 0,
                classifier_url: None,
                fault: FaultProfile::default(),
                geometry: SceneGeometry::default(),
            }],
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let config = Self::parse(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Builtin task specs hosted by `cell`.
    pub fn tasks_of(&self, cell: &CellConfig) -> Vec<TaskSpec> {
        let all = builtin_tasks();
        cell.tasks.iter().filter_map(|id| all.iter().find(|t| &t.task_id == id).cloned()).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.api.event_buffer_size == 0 {
            return bad("api.event_buffer_size: must be at least 1".into());
        }
        self.scheduler.validate().map_err(ConfigError::Invalid)?;
        self.engine.validate().map_err(ConfigError::Invalid)?;
        if let Some(n) = &self.notifications {
            n.validate().map_err(ConfigError::Invalid)?;
        }
        if !(self.report.minutes_per_intervention >= 0.0) || !(self.report.manual_steps_per_minute > 0.0) {
            return bad("report: minutes_per_intervention must be >= 0 and manual_steps_per_minute > 0".into());
        }
        if self.cells.is_empty() {
            return bad("cells: at least one cell is required".into());
        }
        let builtin = builtin_tasks();
        let mut cell_ids = HashSet::new();
        let mut hosted = HashSet::new();
        for (i, cell) in self.cells.iter().enumerate() {
            let at = format!("cells[{i}]");
            if cell.cell_id.as_str().is_empty() {
                return bad(format!("{at}.cell_id: must not be empty"));
            }
            if !cell_ids.insert(cell.cell_id.clone()) {
                return bad(format!("{at}.cell_id: duplicate cell {}", cell.cell_id));
            }
            if cell.tasks.is_empty() {
                return bad(format!("{at}.tasks: at least one task is required"));
            }
            let mut scene = None;
            for (j, task_id) in cell.tasks.iter().enumerate() {
                let Some(spec) = builtin.iter().find(|t| &t.task_id == task_id) else {
                    let known: Vec<_> = builtin.iter().map(|t| t.task_id.as_str()).collect();
                    return bad(format!("{at}.tasks[{j}]: unknown task \"{task_id}\"; known: {}", known.join(", ")));
                };
                if !hosted.insert(task_id.clone()) {
                    return bad(format!("{at}.tasks[{j}]: task {task_id} is already hosted by another cell"));
                }
                if *scene.get_or_insert(spec.scene) != spec.scene {
                    return bad(format!("{at}.tasks[{j}]: {task_id} needs another scene than the cell's first task"));
                }
                let geometry = &cell.geometry;
                if let Some(v) = validate_task_spec(spec, &geometry.workspace_bounds, geometry.drawer_travel_max).first() {
                    return bad(format!("{at}.tasks[{j}]: {}: {}", v.field, v.message));
                }
            }
            cell.fault.validate().map_err(|e| ConfigError::Invalid(format!("{at}.fault: {e}")))?;
            cell.geometry.validate().map_err(|e| ConfigError::Invalid(format!("{at}.geometry: {e}")))?;
            if let Some(url) = &cell.classifier_url {
                PolicyEndpoint::new(url.clone())
                    .validate()
                    .map_err(|e| ConfigError::Invalid(format!("{at}.classifier_url: {e}")))?;
            }
        }
        Ok(())
    }
}
