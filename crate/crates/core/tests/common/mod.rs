#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use autoeval_core::clock::ManualClock;
use autoeval_core::engine::{Engine, EngineConfig, EngineContext, EngineError, EngineListener, EvaluationResult, NullListener};
use autoeval_core::gateway::GatewayClient;
use autoeval_core::model::{builtin_tasks, CellMachine, JobId, TaskSpec};
use autoeval_core::safety::{NotificationConfig, SafetyMonitor};
use autoeval_core::sim::{
    spawn_builtin_classifier_server, spawn_builtin_policy_server, FaultProfile, SceneGeometry, ServerHandle, SimCell,
    SyntheticPolicySpec,
};
use tokio_util::sync::CancellationToken;

pub fn task(name: &str) -> TaskSpec {
    builtin_tasks().into_iter().find(|t| t.task_id.as_str() == name).expect("builtin task")
}

pub fn localhost() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

pub struct Rig {
    pub cell: SimCell,
    pub policy: ServerHandle,
    pub classifier: ServerHandle,
    pub safety: SafetyMonitor,
    pub clock: ManualClock,
    pub config: EngineConfig,
    pub cancel: CancellationToken,
    pub listener: Arc<dyn EngineListener>,
}

pub struct RigOptions {
    pub task: &'static str,
    pub success_prob: f64,
    pub fault: FaultProfile,
    pub seed: u64,
    pub notifications: Option<NotificationConfig>,
}

impl Default for RigOptions {
    fn default() -> Self {
        Self { task: "open_drawer", success_prob: 1.0, fault: FaultProfile::default(), seed: 7, notifications: None }
    }
}

impl Rig {
    pub async fn new(opts: RigOptions) -> Self {
        let spec = task(opts.task);
        let geometry = SceneGeometry::default();
        let policy_spec = SyntheticPolicySpec::new(opts.success_prob, spec.max_steps / 2).with_seed(opts.seed);
        let policy = spawn_builtin_policy_server(policy_spec, spec.clone(), geometry.clone(), localhost()).await.unwrap();
        let classifier = spawn_builtin_classifier_server(
            opts.fault.classifier_confusion,
            spec.clone(),
            geometry.clone(),
            opts.seed,
            localhost(),
        )
        .await
        .unwrap();
        let cell = SimCell::new("cell-a".into(), spec, geometry, opts.fault, opts.seed).unwrap();
        Self {
            cell,
            policy,
            classifier,
            safety: SafetyMonitor::new(opts.notifications),
            clock: ManualClock::new(0.0),
            config: EngineConfig::default(),
            cancel: CancellationToken::new(),
            listener: Arc::new(NullListener),
        }
    }

    pub fn context(&self) -> EngineContext {
        EngineContext {
            gateway: GatewayClient::new(),
            policy: self.policy.endpoint.clone(),
            classifier: self.classifier.endpoint.clone(),
            safety: self.safety.clone(),
            clock: Arc::new(self.clock.clone()),
            listener: self.listener.clone(),
            cancel: self.cancel.clone(),
            config: self.config.clone(),
        }
    }

    pub async fn run(&mut self, job: &str, trials: u32) -> Result<EvaluationResult, EngineError> {
        let ctx = self.context();
        let mut engine = Engine::new(JobId::from(job), &mut self.cell, CellMachine::default(), ctx);
        engine.run_evaluation(trials).await
    }
}
