use std::io::Read;

use autoeval_core::metrics::{JobSummary, ReportConfig, ReportError, ReportStore};
use autoeval_core::model::{
    EpisodeFrames, EpisodeRecord, InvalidReason, JobId, JobStatus, LatencySummary, StateSummary, StepPhase, StepRecord,
    Verdict,
};

fn summary(id: &str, trials: u32) -> JobSummary {
    JobSummary {
        job_id: id.into(),
        submitter: "lab".into(),
        task_id: "open_drawer".into(),
        cell_id: "drawer".into(),
        policy_endpoint: "http://127.0.0.1:1".into(),
        num_trials: trials,
        status: JobStatus::Completed,
        submitted_at: 0.0,
        started_at: Some(0.0),
        finished_at: Some(1000.0),
        failure: None,
        interventions: vec![],
    }
}

fn episode(index: u32, verdict: Verdict, valid: bool) -> EpisodeRecord {
    EpisodeRecord {
        index,
        task_id: "open_drawer".into(),
        initial_state_summary: StateSummary::Drawer { drawer_openness_m: 0.0 },
        final_state_summary: Some(StateSummary::Drawer { drawer_openness_m: 0.05 }),
        steps_executed: 10,
        step_log: (0..15)
            .map(|i| StepRecord {
                step_index: i,
                action: [0.0; 7],
                phase: if i < 10 { StepPhase::Eval } else { StepPhase::Reset },
                boundary_clamped: false,
                motor_fault: false,
            })
            .collect(),
        success_verdict: verdict,
        classifier_answer: Some("yes".into()),
        reset_attempts: 1,
        motor_failures: u32::from(!valid),
        valid,
        invalid_reason: (!valid).then_some(InvalidReason::MotorFault),
        rerun_of: None,
        started_at: index as f64 * 20.0,
        wall_time_s: 20.0,
        policy_latency_ms: LatencySummary::from_samples(&[3.0, 5.0]),
        frames: Some(EpisodeFrames { initial_png: vec![1, 2, 3], final_png: vec![4, 5] }),
    }
}

fn populated(dir: &std::path::Path, n: u32) -> (ReportStore, JobId) {
    let store = ReportStore::new(dir, ReportConfig::default()).unwrap();
    let job = JobId::from("job-000001");
    store.write_job(&summary(job.as_str(), n)).unwrap();
    for i in 0..n {
        let verdict = if i % 2 == 0 { Verdict::Success } else { Verdict::Failure };
        store.append_episode(&job, &episode(i, verdict, true)).unwrap();
    }
    store.append_episode(&job, &episode(n, Verdict::Invalid, false)).unwrap();
    (store, job)
}

#[test]
fn regeneration_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (store, job) = populated(dir.path(), 50);
    let a = store.regenerate(&job).unwrap();
    let bytes_a = std::fs::read(store.job_dir(&job).join("report.json")).unwrap();
    let b = store.regenerate(&job).unwrap();
    let bytes_b = std::fs::read(store.job_dir(&job).join("report.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(bytes_a, bytes_b);
    let rate = a.success_rate.unwrap();
    assert_eq!((rate.successes, rate.valid), (25, 50));
    assert_eq!(a.recovery.motor_failure_reruns, 1);
    assert_eq!(a.episodes.len(), 51);
    assert_eq!(a.episodes[0].frames.as_ref().unwrap().initial, "frames/0_initial.png");
    assert_eq!(std::fs::read(store.job_dir(&job).join("frames/0_final.png")).unwrap(), [4, 5]);
}

#[test]
fn relabel_moves_rate_by_one_over_n_and_is_audited() {
    let dir = tempfile::tempdir().unwrap();
    let (store, job) = populated(dir.path(), 50);
    let before = store.regenerate(&job).unwrap().success_rate.unwrap().rate;
    let after = store.relabel(&job, 0, Verdict::Failure, "ana", 5.0).unwrap();
    assert!((before - after.success_rate.unwrap().rate - 1.0 / 50.0).abs() < 1e-12);
    assert!(after.episodes[0].relabeled);
    let again = store.relabel(&job, 0, Verdict::Failure, "ana", 6.0).unwrap();
    assert_eq!(again.success_rate, after.success_rate);
    assert_eq!(again.relabels.len(), 2);
    assert_eq!((again.relabels[1].old, again.relabels[1].new), (Verdict::Failure, Verdict::Failure));
    // The raw log is untouched.
    assert_eq!(store.episodes(&job).unwrap()[0].success_verdict, Verdict::Success);
}

#[test]
fn relabel_rejects_unscored_and_unknown_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let (store, job) = populated(dir.path(), 4);
    assert!(matches!(store.relabel(&job, 4, Verdict::Success, "a", 0.0), Err(ReportError::InvalidLabel(_))));
    assert!(matches!(store.relabel(&job, 1, Verdict::Invalid, "a", 0.0), Err(ReportError::InvalidLabel(_))));
    assert!(matches!(store.relabel(&job, 99, Verdict::Success, "a", 0.0), Err(ReportError::UnknownEpisode { .. })));
    assert!(matches!(store.report(&"nope".into()), Err(ReportError::UnknownJob(_))));
}

#[test]
fn readers_ignore_a_partial_trailing_line() {
    let dir = tempfile::tempdir().unwrap();
    let (store, job) = populated(dir.path(), 3);
    let path = store.job_dir(&job).join("episodes.jsonl");
    let mut file = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    std::io::Write::write_all(&mut file, b"{\"index\":9,").unwrap();
    assert_eq!(store.episodes(&job).unwrap().len(), 4);
}

#[test]
fn archive_contains_the_job_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (store, job) = populated(dir.path(), 2);
    store.regenerate(&job).unwrap();
    let bytes = store.archive(&job).unwrap();
    let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(&bytes[..]));
    let mut names = Vec::new();
    for entry in tar.entries().unwrap() {
        let mut entry = entry.unwrap();
        let name = entry.path().unwrap().display().to_string();
        if name.ends_with("report.json") {
            let mut s = String::new();
            entry.read_to_string(&mut s).unwrap();
            assert!(s.contains("success_rate"));
        }
        names.push(name);
    }
    for want in ["job.json", "episodes.jsonl", "report.json", "frames/1_initial.png"] {
        assert!(names.iter().any(|n| n.ends_with(want)), "{want} in {names:?}");
    }
}
