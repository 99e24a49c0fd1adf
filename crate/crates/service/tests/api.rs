mod common;

use std::sync::Arc;
use std::time::Duration;

use autoeval_core::safety::NotificationConfig;
use autoeval_core::sim::FaultProfile;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::Router;
use common::{base_config, policy, Service};
use parking_lot::Mutex;
use serde_json::{json, Value};

#[tokio::test]
async fn submission_validation() {
    let svc = Service::start(base_config()).await;
    let pol = policy("open_drawer", 1.0, 1).await;
    let url = pol.endpoint.base_url.clone();

    let (status, body) = svc.post("/api/jobs", json!({"task_id": "juggle", "policy_url": url})).await;
    assert_eq!(status, 404, "{body}");
    let (status, body) = svc.post("/api/jobs", json!({"task_id": "open_drawer", "policy_url": "ftp://x"})).await;
    assert_eq!(status, 400);
    assert!(body["error"].as_str().unwrap().contains("policy_url"));
    let (status, _) = svc.post("/api/jobs", json!({"task_id": "open_drawer", "policy_url": url, "num_trials": 0})).await;
    assert_eq!(status, 400);
    let (status, body) = svc.post_raw("/api/jobs", "{\"task_id\": 3").await;
    assert_eq!(status, 400, "{body}");
    let (status, body) = svc.post("/api/jobs", json!({"task": "open_drawer", "policy_url": url})).await;
    assert_eq!(status, 400);
    assert!(body["error"].as_str().unwrap().contains("task"), "{body}");

    // Omitted trial count defaults to 50.
    let (status, body) = svc.post("/api/jobs", json!({"task_id": "open_drawer", "policy_url": url, "submitter": "ana"})).await;
    assert_eq!(status, 202, "{body}");
    let job = body["job_id"].as_str().unwrap().to_owned();
    let (_, detail) = svc.get(&format!("/api/jobs/{job}")).await;
    assert_eq!(detail["num_trials"], 50);
    assert_eq!(detail["report_url"], format!("/api/reports/{job}"));
    let (status, _) = svc.get("/api/jobs/job-999999").await;
    assert_eq!(status, 404);
    svc.post(&format!("/api/jobs/{job}/cancel"), json!({})).await;
    svc.wait(&job).await;

    let (_, tasks) = svc.get("/api/tasks").await;
    assert_eq!(tasks.as_array().unwrap().len(), 4);
    assert!(tasks.as_array().unwrap().iter().any(|t| t["task_id"] == "eggplant_to_sink" && t["cell_id"] == "sink"));
}

#[tokio::test]
async fn one_pending_job_per_submitter_per_cell() {
    let mut config = base_config();
    config.engine.step_delay_ms = 1;
    let svc = Service::start(config).await;
    let pol = policy("open_drawer", 1.0, 1).await;
    let blocker = svc.submit("open_drawer", &pol, 5, "other").await;
    let first = svc.submit("open_drawer", &pol, 1, "ana").await;
    let (status, body) = svc
        .post("/api/jobs", json!({"task_id": "close_drawer", "policy_url": pol.endpoint.base_url, "submitter": "ana"}))
        .await;
    assert_eq!(status, 409, "{body}");
    // Another cell is fine.
    let sink = policy("eggplant_to_sink", 1.0, 1).await;
    let other_cell = svc.submit("eggplant_to_sink", &sink, 1, "ana").await;
    for job in [blocker, first, other_cell] {
        assert_eq!(svc.wait(&job).await["status"], "completed");
    }
}

#[tokio::test]
async fn event_stream_has_one_event_per_episode_then_terminal_status() {
    let mut config = base_config();
    config.engine.step_delay_ms = 1;
    let svc = Service::start(config).await;
    let pol = policy("open_drawer", 0.5, 4).await;
    // Queue behind a running job so the subscription starts before the
    // first episode.
    let blocker = svc.submit("open_drawer", &pol, 4, "a").await;
    let job = svc.submit("open_drawer", &pol, 10, "b").await;
    let events = svc.events(&job).await;

    assert_eq!(events[0].0, "snapshot");
    assert_eq!(events[0].1["type"], "snapshot");
    assert_eq!(events[0].1["episodes"], json!([]));
    let episodes: Vec<&Value> = events.iter().filter(|(n, _)| n == "episode").map(|(_, v)| v).collect();
    assert_eq!(episodes.len(), 10);
    let indices: Vec<u64> = episodes.iter().map(|e| e["index"].as_u64().unwrap()).collect();
    assert_eq!(indices, (0..10).collect::<Vec<_>>());
    let (last_name, last) = events.last().unwrap();
    assert_eq!(last_name, "status");
    assert_eq!(last["status"], "completed");

    // The running rate is the tally of the events so far.
    let mut successes = 0;
    for (i, e) in episodes.iter().enumerate() {
        successes += u32::from(e["verdict"] == "success");
        let want = successes as f64 / (i + 1) as f64;
        assert!((e["running_rate"].as_f64().unwrap() - want).abs() < 1e-12);
    }
    let detail = svc.wait(&job).await;
    assert_eq!(detail["success_count"], successes);
    svc.wait(&blocker).await;
}

#[tokio::test]
async fn late_subscribers_get_a_complete_prefix() {
    let mut config = base_config();
    config.engine.step_delay_ms = 1;
    let svc = Service::start(config).await;
    let pol = policy("open_drawer", 0.5, 9).await;
    let job = svc.submit("open_drawer", &pol, 12, "a").await;
    tokio::time::sleep(Duration::from_millis(150)).await;
    let events = svc.events(&job).await;
    let mut indices: Vec<u64> = events[0].1["episodes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["index"].as_u64().unwrap())
        .collect();
    indices.extend(events.iter().filter(|(n, _)| n == "episode").map(|(_, e)| e["index"].as_u64().unwrap()));
    assert_eq!(indices, (0..12).collect::<Vec<_>>());

    // A finished job streams only its snapshot.
    let events = svc.events(&job).await;
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].1["status"], "completed");
    assert_eq!(events[0].1["episodes"].as_array().unwrap().len(), 12);
}

#[tokio::test]
async fn cancel_is_conflict_rejecting() {
    let mut config = base_config();
    config.engine.step_delay_ms = 2;
    let svc = Service::start(config).await;
    let pol = policy("open_drawer", 1.0, 1).await;
    let running = svc.submit("open_drawer", &pol, 500, "a").await;
    let queued = svc.submit("open_drawer", &pol, 5, "b").await;

    let (status, body) = svc.post(&format!("/api/jobs/{queued}/cancel"), json!({})).await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["status"], "canceled");
    let (status, _) = svc.post(&format!("/api/jobs/{queued}/cancel"), json!({})).await;
    assert_eq!(status, 409);

    tokio::time::sleep(Duration::from_millis(200)).await;
    let (status, _) = svc.post(&format!("/api/jobs/{running}/cancel"), json!({})).await;
    assert_eq!(status, 200);
    let (status, body) = svc.post(&format!("/api/jobs/{running}/cancel"), json!({})).await;
    assert!(status == 409, "{status} {body}");
    let detail = svc.wait(&running).await;
    assert_eq!(detail["status"], "canceled");
    let (status, _) = svc.post(&format!("/api/jobs/{running}/cancel"), json!({})).await;
    assert_eq!(status, 409);
    let (status, _) = svc.post("/api/jobs/job-424242/cancel", json!({})).await;
    assert_eq!(status, 404);

    // The canceled job keeps its partial episodes and has a report.
    let (status, report) = svc.get(&format!("/api/reports/{running}")).await;
    assert_eq!(status, 200);
    assert_eq!(report["job"]["status"], "canceled");
    assert!(report["episodes"].as_array().unwrap().len() < 500);
}

#[tokio::test]
async fn resume_without_an_open_ticket_is_a_conflict() {
    let svc = Service::start(base_config()).await;
    let (status, body) = svc.post("/api/cells/drawer/resume", json!({})).await;
    assert_eq!(status, 409, "{body}");
    let (status, _) = svc.post("/api/cells/attic/resume", json!({})).await;
    assert_eq!(status, 404);
    let (_, cells) = svc.get("/api/cells").await;
    let cells = cells.as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c["phase"] == "idle" && c["open_ticket"].is_null()));
}

#[derive(Default)]
struct Hook {
    keys: Mutex<Vec<String>>,
}

async fn spawn_hook(hook: Arc<Hook>) -> String {
    let router = Router::new()
        .route(
            "/hook",
            post(|axum::extract::State(h): axum::extract::State<Arc<Hook>>, headers: HeaderMap| async move {
                let key = headers.get("Idempotency-Key").and_then(|v| v.to_str().ok()).unwrap_or_default();
                h.keys.lock().push(key.to_owned());
                StatusCode::OK
            }),
        )
        .with_state(hook);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}/hook")
}

#[tokio::test]
async fn escalated_cell_is_resumed_over_http() {
    let hook = Arc::new(Hook::default());
    let mut config = base_config();
    config.notifications = Some(NotificationConfig::new(spawn_hook(hook.clone()).await));
    config.cells[0].fault = FaultProfile { reset_failure_prob: 1.0, ..Default::default() };
    let svc = Service::start(config).await;
    let pol = policy("open_drawer", 1.0, 1).await;
    let job = svc.submit("open_drawer", &pol, 1, "a").await;

    let mut cell = Value::Null;
    for _ in 0..200 {
        let (_, cells) = svc.get("/api/cells").await;
        cell = cells[0].clone();
        if cell["phase"] == "awaiting_intervention" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    assert_eq!(cell["phase"], "awaiting_intervention", "{cell}");
    assert_eq!(cell["open_ticket"]["reason"], "reset_exhausted");
    let (_, detail) = svc.get(&format!("/api/jobs/{job}")).await;
    assert_eq!(detail["status"], "awaiting_intervention");

    let (status, ticket) = svc.post("/api/cells/drawer/resume", json!({})).await;
    assert_eq!(status, 200, "{ticket}");
    assert!(ticket["resolved_at"].is_number());
    let detail = svc.wait(&job).await;
    assert_eq!(detail["status"], "completed");
    let (status, _) = svc.post("/api/cells/drawer/resume", json!({})).await;
    assert_eq!(status, 409);

    let ticket_id = ticket["ticket_id"].as_str().unwrap();
    let keys = hook.keys.lock().clone();
    assert!(!keys.is_empty() && keys.iter().all(|k| k == ticket_id), "{keys:?}");
    let (_, report) = svc.get(&format!("/api/reports/{job}")).await;
    assert_eq!(report["intervention_count"], 1);
}

#[tokio::test]
async fn reports_frames_archive_and_relabel() {
    let svc = Service::start(base_config()).await;
    let pol = policy("eggplant_to_sink", 0.5, 2).await;
    let job = svc.submit("eggplant_to_sink", &pol, 8, "a").await;
    let detail = svc.wait(&job).await;
    assert_eq!(detail["status"], "completed");

    let (status, report) = svc.get(detail["report_url"].as_str().unwrap()).await;
    assert_eq!(status, 200);
    let rows = report["episodes"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    let rate = &report["success_rate"];
    assert_eq!(rate["valid"], 8);
    assert_eq!(rate["successes"], detail["success_count"]);

    let frame = rows[0]["frames"]["initial"].as_str().unwrap();
    let name = frame.strip_prefix("frames/").unwrap();
    let resp = svc.http.get(format!("{}/api/reports/{job}/frames/{name}", svc.url)).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(&resp.bytes().await.unwrap()[..4], b"\x89PNG");
    let (status, _) = svc.get(&format!("/api/reports/{job}/frames/..%2Fjob.json")).await;
    assert_eq!(status, 404);

    let resp = svc.http.get(format!("{}/api/reports/{job}/archive", svc.url)).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.headers()["content-type"], "application/gzip");
    assert_eq!(&resp.bytes().await.unwrap()[..2], [0x1f, 0x8b]);

    // Flip the first episode and watch the rate move by 1/8.
    let first = rows[0]["outcome"].as_str().unwrap();
    let flipped = if first == "success" { "failure" } else { "success" };
    let path = format!("/api/reports/{job}/episodes/0/relabel");
    let (status, after) = svc.post(&path, json!({"verdict": flipped, "annotator": "ana"})).await;
    assert_eq!(status, 200, "{after}");
    let delta = after["success_rate"]["rate"].as_f64().unwrap() - rate["rate"].as_f64().unwrap();
    assert!((delta.abs() - 1.0 / 8.0).abs() < 1e-12, "{delta}");
    assert_eq!(after["relabels"].as_array().unwrap().len(), 1);
    let (_, reread) = svc.get(&format!("/api/reports/{job}")).await;
    assert_eq!(reread, after);

    let (status, _) = svc.post(&path, json!({"verdict": "invalid", "annotator": "ana"})).await;
    assert_eq!(status, 400);
    let (status, _) = svc.post(&path, json!({"verdict": "maybe", "annotator": "ana"})).await;
    assert_eq!(status, 400);
    let (status, _) = svc.post(&path, json!({"verdict": "success", "annotator": " "})).await;
    assert_eq!(status, 400);
    let (status, _) = svc.post(&format!("/api/reports/{job}/episodes/99/relabel"), json!({"verdict": "success", "annotator": "a"})).await;
    assert_eq!(status, 404);
    let (status, _) = svc.get("/api/reports/job-777777").await;
    assert_eq!(status, 404);
}
