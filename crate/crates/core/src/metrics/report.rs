//! Per-job report directory:
//!
//! ```text
//! <root>/<job_id>/job.json          job summary and interventions
//!                 episodes.jsonl    append-only raw episode log
//!                 relabels.jsonl    manual relabel audit trail
//!                 frames/<i>_initial.png, <i>_final.png
//!                 report.json       regenerated from the three logs
//! ```
//!
//! `report.json` is a pure function of the other files, so regenerating it
//! any number of times yields the same bytes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::{human_time_saved, success_rate, throughput, HumanTime, SuccessRate};
use crate::clock::Window;
use crate::model::{
    CellId, EpisodeRecord, EvaluationJob, InterventionTicket, InvalidReason, JobId, JobStatus, TaskId, Verdict,
};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {job} has no episode {index}")]
    UnknownEpisode { job: JobId, index: u32 },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("{path}:{line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub minutes_per_intervention: f64,
    /// Pace of a person running the same evaluation by hand, in eval steps
    /// per minute.
    pub manual_steps_per_minute: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { minutes_per_intervention: 1.0, manual_steps_per_minute: 62.5 }
    }
}

/// Job metadata kept next to the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
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
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default)]
    pub interventions: Vec<InterventionTicket>,
}

impl JobSummary {
    pub fn of(job: &EvaluationJob, interventions: Vec<InterventionTicket>) -> Self {
        Self {
            job_id: job.job_id.clone(),
            submitter: job.submitter.clone(),
            task_id: job.task_id.clone(),
            cell_id: job.cell_id.clone(),
            policy_endpoint: job.policy_endpoint.clone(),
            num_trials: job.num_trials,
            status: job.status,
            submitted_at: job.submitted_at,
            started_at: job.started_at,
            finished_at: job.finished_at,
            failure: job.failure.clone(),
            interventions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelEntry {
    pub episode_index: u32,
    pub old: Verdict,
    pub new: Verdict,
    pub annotator: String,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRefs {
    pub initial: String,
    #[serde(rename = "final")]
    pub final_: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub index: u32,
    pub outcome: Verdict,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<InvalidReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerun_of: Option<u32>,
    pub steps: u32,
    pub reset_steps: u32,
    pub reset_attempts: u32,
    pub motor_failures: u32,
    pub mean_latency_ms: f64,
    pub relabeled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<FrameRefs>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryCounts {
    /// Attempts invalidated by a motor fault and run again.
    pub motor_failure_reruns: u32,
    /// Faults recovered by reboot, in eval and reset phases.
    pub motor_failures: u32,
    /// Resets that needed more than one attempt.
    pub reset_retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub job: JobSummary,
    pub episodes: Vec<EpisodeRow>,
    /// Absent when no episode is valid.
    pub success_rate: Option<SuccessRate>,
    pub throughput_steps_per_min: Option<f64>,
    pub recovery: RecoveryCounts,
    pub intervention_count: u32,
    pub human_time: HumanTime,
    pub relabels: Vec<RelabelEntry>,
}

impl EvaluationReport {
    /// Build a report from raw records, applying `relabels` in order.
    pub fn build(
        job: JobSummary,
        episodes: &[EpisodeRecord],
        relabels: &[RelabelEntry],
        frames: impl Fn(u32) -> Option<FrameRefs>,
        config: &ReportConfig,
    ) -> Self {
        let mut episodes = episodes.to_vec();
        let mut relabeled = std::collections::BTreeSet::new();
        for r in relabels {
            if let Some(e) = episodes.iter_mut().find(|e| e.index == r.episode_index) {
                e.success_verdict = r.new;
                relabeled.insert(r.episode_index);
            }
        }
        let rows = episodes
            .iter()
            .map(|e| EpisodeRow {
                index: e.index,
                outcome: e.success_verdict,
                valid: e.valid,
                invalid_reason: e.invalid_reason.clone(),
                rerun_of: e.rerun_of,
                steps: e.eval_steps() as u32,
                reset_steps: e.reset_steps() as u32,
                reset_attempts: e.reset_attempts,
                motor_failures: e.motor_failures,
                mean_latency_ms: e.policy_latency_ms.mean_ms,
                relabeled: relabeled.contains(&e.index),
                frames: frames(e.index),
            })
            .collect();
        let window = match (episodes.first(), episodes.last()) {
            (Some(first), Some(last)) => Some(Window::new(first.started_at, last.started_at + last.wall_time_s)),
            _ => None,
        };
        let throughput_steps_per_min = window.and_then(|w| throughput(&episodes, w).ok());
        let valid_eval_steps: usize = episodes.iter().filter(|e| e.valid).map(|e| e.eval_steps()).sum();
        let intervention_count = job.interventions.len() as u32;
        let human_time = human_time_saved(
            intervention_count,
            config.minutes_per_intervention,
            valid_eval_steps as f64 / config.manual_steps_per_minute,
        );
        let recovery = RecoveryCounts {
            motor_failure_reruns: episodes
                .iter()
                .filter(|e| e.invalid_reason == Some(InvalidReason::MotorFault))
                .count() as u32,
            motor_failures: episodes.iter().map(|e| e.motor_failures).sum(),
            reset_retries: episodes.iter().filter(|e| e.reset_attempts > 1).count() as u32,
        };
        Self {
            job,
            episodes: rows,
            success_rate: success_rate(&episodes).ok(),
            throughput_steps_per_min,
            recovery,
            intervention_count,
            human_time,
            relabels: relabels.to_vec(),
        }
    }
}

/// Directory-backed store of per-job logs and reports. One writer per job;
/// readers skip a trailing partial line, so they always see a prefix.
#[derive(Debug, Clone)]
pub struct ReportStore {
    root: PathBuf,
    config: ReportConfig,
}

const JOB_FILE: &str = "job.json";
const EPISODES_FILE: &str = "episodes.jsonl";
const RELABELS_FILE: &str = "relabels.jsonl";
const REPORT_FILE: &str = "report.json";
const FRAMES_DIR: &str = "frames";

impl ReportStore {
    pub fn new(root: impl Into<PathBuf>, config: ReportConfig) -> Result<Self, ReportError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root, config })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, job: &JobId) -> PathBuf {
        self.root.join(job.as_str())
    }

    pub fn exists(&self, job: &JobId) -> bool {
        self.job_dir(job).join(JOB_FILE).is_file()
    }

    /// Write or overwrite the job summary.
    pub fn write_job(&self, summary: &JobSummary) -> Result<(), ReportError> {
        let dir = self.job_dir(&summary.job_id);
        fs::create_dir_all(dir.join(FRAMES_DIR))?;
        write_atomic(&dir.join(JOB_FILE), &serde_json::to_vec_pretty(summary)?)
    }

    pub fn read_job(&self, job: &JobId) -> Result<JobSummary, ReportError> {
        let path = self.job_dir(job).join(JOB_FILE);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ReportError::UnknownJob(job.clone()),
            _ => ReportError::Io(e),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Append one episode, plus its frames when present.
    pub fn append_episode(&self, job: &JobId, record: &EpisodeRecord) -> Result<(), ReportError> {
        let dir = self.job_dir(job);
        fs::create_dir_all(dir.join(FRAMES_DIR))?;
        if let Some(frames) = &record.frames {
            let refs = frame_refs(record.index);
            fs::write(dir.join(&refs.initial), &frames.initial_png)?;
            fs::write(dir.join(&refs.final_), &frames.final_png)?;
        }
        append_line(&dir.join(EPISODES_FILE), record)
    }

    pub fn episodes(&self, job: &JobId) -> Result<Vec<EpisodeRecord>, ReportError> {
        read_lines(&self.job_dir(job).join(EPISODES_FILE))
    }

    pub fn relabels(&self, job: &JobId) -> Result<Vec<RelabelEntry>, ReportError> {
        read_lines(&self.job_dir(job).join(RELABELS_FILE))
    }

    /// Rebuild `report.json` from the logs.
    pub fn regenerate(&self, job: &JobId) -> Result<EvaluationReport, ReportError> {
        let summary = self.read_job(job)?;
        let episodes = self.episodes(job)?;
        let relabels = self.relabels(job)?;
        let dir = self.job_dir(job);
        let report = EvaluationReport::build(
            summary,
            &episodes,
            &relabels,
            |i| {
                let refs = frame_refs(i);
                dir.join(&refs.initial).is_file().then_some(refs)
            },
            &self.config,
        );
        write_atomic(&dir.join(REPORT_FILE), &serde_json::to_vec_pretty(&report)?)?;
        Ok(report)
    }

    /// The persisted report, regenerating it if missing.
    pub fn report(&self, job: &JobId) -> Result<EvaluationReport, ReportError> {
        match fs::read(self.job_dir(job).join(REPORT_FILE)) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => self.regenerate(job),
            Err(e) => Err(e.into()),
        }
    }

    /// Override the success label of a valid episode and recompute the
    /// report. Relabeling to the current label still leaves an audit entry.
    pub fn relabel(
        &self,
        job: &JobId,
        index: u32,
        new: Verdict,
        annotator: &str,
        timestamp: f64,
    ) -> Result<EvaluationReport, ReportError> {
        if new == Verdict::Invalid {
            return Err(ReportError::InvalidLabel("episodes can only be relabeled success or failure".into()));
        }
        self.read_job(job)?;
        let episodes = self.episodes(job)?;
        let episode = episodes
            .iter()
            .find(|e| e.index == index)
            .ok_or_else(|| ReportError::UnknownEpisode { job: job.clone(), index })?;
        if !episode.valid {
            return Err(ReportError::InvalidLabel(format!("episode {index} is invalid and not scored")));
        }
        let old = self
            .relabels(job)?
            .iter()
            .rev()
            .find(|r| r.episode_index == index)
            .map_or(episode.success_verdict, |r| r.new);
        let entry = RelabelEntry { episode_index: index, old, new, annotator: annotator.to_string(), timestamp };
        append_line(&self.job_dir(job).join(RELABELS_FILE), &entry)?;
        self.regenerate(job)
    }

    /// Path of a frame file inside a job directory, if it exists.
    pub fn frame_path(&self, job: &JobId, name: &str) -> Option<PathBuf> {
        if name.contains('/') || name.contains("..") {
            return None;
        }
        let path = self.job_dir(job).join(FRAMES_DIR).join(name);
        path.is_file().then_some(path)
    }

    /// The whole job directory as a gzip-compressed tarball.
    pub fn archive(&self, job: &JobId) -> Result<Vec<u8>, ReportError> {
        self.read_job(job)?;
        let dir = self.job_dir(job);
        let encoder = GzEncoder::new(Vec::new(), Compression::default());
        let mut tar = tar::Builder::new(encoder);
        tar.append_dir_all(job.as_str(), &dir)?;
        Ok(tar.into_inner()?.finish()?)
    }
}

fn frame_refs(index: u32) -> FrameRefs {
    FrameRefs {
        initial: format!("{FRAMES_DIR}/{index}_initial.png"),
        final_: format!("{FRAMES_DIR}/{index}_final.png"),
    }
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    // One write per line keeps concurrent readers on line boundaries.
    file.write_all(&line)?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            // A write in progress.
            break;
        }
        let value = serde_json::from_str(buf.trim_end()).map_err(|e| ReportError::Corrupt {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
