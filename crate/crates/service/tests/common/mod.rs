#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use autoeval_core::model::{builtin_tasks, TaskSpec};
use autoeval_core::sim::{spawn_builtin_policy_server, SceneGeometry, ServerHandle, SyntheticPolicySpec};
use autoeval_service::config::ClockKind;
use autoeval_service::{Runtime, ServiceConfig};
use serde_json::Value;

pub fn task(name: &str) -> TaskSpec {
    builtin_tasks().into_iter().find(|t| t.task_id.as_str() == name).expect("builtin task")
}

pub async fn policy(task_name: &str, success_prob: f64, seed: u64) -> ServerHandle {
    let spec = task(task_name);
    let behaviour = SyntheticPolicySpec::new(success_prob, spec.max_steps / 2).with_seed(seed);
    spawn_builtin_policy_server(behaviour, spec, SceneGeometry::default(), "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap()
}

pub struct Service {
    pub url: String,
    pub runtime: Arc<Runtime>,
    pub http: reqwest::Client,
    _dir: tempfile::TempDir,
}

/// A drawer cell and a sink cell on simulated time, frames recorded.
pub fn base_config() -> ServiceConfig {
    let mut config = ServiceConfig::single_cell("drawer", &["open_drawer", "close_drawer"]);
    let mut sink = config.cells[0].clone();
    sink.cell_id = "sink".into();
    sink.tasks = vec!["eggplant_to_sink".into(), "eggplant_to_basket".into()];
    sink.seed = 2;
    config.cells.push(sink);
    config.clock = ClockKind::Simulated;
    config.engine.record_frames = true;
    config.policy_retries = 0;
    config.policy_timeout_ms = 2_000;
    config
}

impl Service {
    pub async fn start(mut config: ServiceConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        config.api.static_report_root = dir.path().join("reports");
        config.validate().unwrap();
        let runtime = Runtime::start(config).await.unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let router = autoeval_service::api::router(runtime.clone());
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
        Self { url, runtime, http: reqwest::Client::new(), _dir: dir }
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let resp = self.http.post(format!("{}{path}", self.url)).json(&body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_raw(&self, path: &str, body: &'static str) -> (u16, Value) {
        let resp = self
            .http
            .post(format!("{}{path}", self.url))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.http.get(format!("{}{path}", self.url)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn submit(&self, task: &str, policy: &ServerHandle, trials: u32, who: &str) -> String {
        let (status, body) = self
            .post(
                "/api/jobs",
                serde_json::json!({
                    "task_id": task, "policy_url": policy.endpoint.base_url,
                    "num_trials": trials, "submitter": who,
                }),
            )
            .await;
        assert_eq!(status, 202, "{body}");
        body["job_id"].as_str().unwrap().to_owned()
    }

    /// Poll until the job is terminal and return its detail. Polls the
    /// list view, which leaves out episodes.
    pub async fn wait(&self, job: &str) -> Value {
        for _ in 0..1200 {
            let (_, jobs) = self.get("/api/jobs").await;
            let status = jobs.as_array().and_then(|all| all.iter().find(|j| j["job_id"] == job)).map(|j| j["status"].clone());
            if matches!(status.as_ref().and_then(Value::as_str), Some("completed" | "canceled" | "failed")) {
                return self.get(&format!("/api/jobs/{job}")).await.1;
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
        panic!("job {job} did not finish");
    }

    /// Read a whole event stream; it ends after the terminal status.
    pub async fn events(&self, job: &str) -> Vec<(String, Value)> {
        let resp = self.http.get(format!("{}/api/jobs/{job}/events", self.url)).send().await.unwrap();
        assert_eq!(resp.headers()["content-type"], "text/event-stream");
        let text = tokio::time::timeout(Duration::from_secs(60), resp.text()).await.unwrap().unwrap();
        parse_sse(&text)
    }
}

pub fn parse_sse(text: &str) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let mut name = String::from("message");
        let mut data = String::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                name = v.trim().to_owned();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
        if !data.is_empty() {
            out.push((name, serde_json::from_str(&data).unwrap_or(Value::String(data))));
        }
    }
    out
}
