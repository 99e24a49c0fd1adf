//! Builtin policy and classifier servers speaking the gateway wire contract.
//!
//! Both decode the exact world state from the state strip of the observed
//! frame, so they act as oracles with configurable imperfection.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use axum::serve::ListenerExt;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use super::controller::{drive_action, speed_for_budget, SceneTarget};
use super::dynamics::kinematics;
use super::render::decode_state;
use super::world::{in_initial_distribution, oracle_verdict, sample_confusion, validate_confusion, CellWorldState, SceneGeometry, SimError};
use crate::gateway::{decode_png_base64, ActionChunk, ClassifyRequest, ClassifyResponse, ObservationPayload, PolicyEndpoint};
use crate::model::{Action, TaskSpec, Verdict};

/// Behaviour of the builtin stand-in for an evaluated policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPolicySpec {
    pub target_success_prob: f64,
    pub steps_to_complete: u32,
    /// Uniform jitter on every commanded rotation, and on translation while
    /// nothing is grasped. At most 0.003 m / rad.
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default = "SyntheticPolicySpec::default_chunk")]
    pub chunk_size: u32,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticPolicySpec {
    fn default_chunk() -> u32 {
        4
    }

    pub fn new(target_success_prob: f64, steps_to_complete: u32) -> Self {
        Self {
            target_success_prob,
            steps_to_complete,
            noise_scale: 0.0,
            chunk_size: Self::default_chunk(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, task: &TaskSpec) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.target_success_prob) {
            return bad(format!("target_success_prob {} outside [0, 1]", self.target_success_prob));
        }
        if self.steps_to_complete == 0 || self.steps_to_complete > task.max_steps {
            return bad(format!(
                "steps_to_complete {} must lie in [1, {}]",
                self.steps_to_complete, task.max_steps
            ));
        }
        if !(0.0..=0.003).contains(&self.noise_scale) {
            return bad(format!("noise_scale {} outside [0, 0.003]", self.noise_scale));
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1".into());
        }
        Ok(())
    }
}

/// A running builtin server. Dropping the handle stops it.
#[derive(Debug)]
pub struct ServerHandle {
    pub endpoint: PolicyEndpoint,
    pub addr: SocketAddr,
    pub stats: Arc<ServerStats>,
    shutdown: CancellationToken,
    task: Option<JoinHandle<()>>,
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub requests: AtomicU64,
    pub episodes: AtomicU64,
    pub succeeding_episodes: AtomicU64,
}

impl ServerStats {
    pub fn episodes(&self) -> u64 {
        self.episodes.load(Ordering::Relaxed)
    }

    pub fn succeeding_episodes(&self) -> u64 {
        self.succeeding_episodes.load(Ordering::Relaxed)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

impl ServerHandle {
    pub fn shutdown(&mut self) {
        self.shutdown.cancel();
        self.task.take();
    }

    /// Wait until the server has stopped serving.
    pub async fn join(mut self) {
        self.shutdown.cancel();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown.cancel();
    }
}

async fn serve(router: Router, bind: SocketAddr, stats: Arc<ServerStats>) -> Result<ServerHandle, SimError> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| SimError::PortUnavailable { addr: bind.to_string(), reason: e.to_string() })?;
    let addr = listener
        .local_addr()
        .map_err(|e| SimError::PortUnavailable { addr: bind.to_string(), reason: e.to_string() })?;
    let shutdown = CancellationToken::new();
    let stop = shutdown.clone();
    let listener = listener.tap_io(|tcp| {
        let _ = tcp.set_nodelay(true);
    });
    let task = tokio::spawn(async move {
        let result = axum::serve(listener, router).with_graceful_shutdown(stop.cancelled_owned()).await;
        if let Err(err) = result {
            tracing::error!(%err, "builtin server stopped");
        }
    });
    Ok(ServerHandle {
        endpoint: PolicyEndpoint::new(format!("http://{addr}")),
        addr,
        stats,
        shutdown,
        task: Some(task),
    })
}

type Rejection = (StatusCode, String);

fn reject(msg: impl Into<String>) -> Rejection {
    (StatusCode::BAD_REQUEST, msg.into())
}

fn observed_state(image: &str, task: &TaskSpec) -> Result<CellWorldState, Rejection> {
    let img = decode_png_base64(image).map_err(|e| reject(e.to_string()))?;
    let world = decode_state(&img).ok_or_else(|| reject("frame carries no state strip"))?;
    if world.scene != task.scene {
        return Err(reject(format!("frame shows a {:?} scene, task is {:?}", world.scene, task.scene)));
    }
    Ok(world)
}

fn jitter(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        rng.random_range(-scale..=scale)
    }
}

#[derive(Debug)]
enum Plan {
    Succeed { target: SceneTarget, speed: f64 },
    Wander { waypoint: [f64; 3], speed: f64 },
}

#[derive(Debug)]
struct Episode {
    plan: Plan,
    rng: ChaCha8Rng,
}

struct PolicyState {
    spec: SyntheticPolicySpec,
    task: TaskSpec,
    geometry: SceneGeometry,
    stats: Arc<ServerStats>,
    episode: Mutex<Option<Episode>>,
}

impl PolicyState {
    fn random_waypoint(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let b = &self.geometry.workspace_bounds;
        // Stay above the table so nothing is ever touched.
        let z_lo = b.min_xyz[2].max(0.08).min(b.max_xyz[2]);
        [
            rng.random_range(b.min_xyz[0]..=b.max_xyz[0]),
            rng.random_range(b.min_xyz[1]..=b.max_xyz[1]),
            rng.random_range(z_lo..=b.max_xyz[2]),
        ]
    }

    fn start_episode(&self, world: &CellWorldState) -> Episode {
        let n = self.stats.episodes.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(n);
        let u: f64 = rng.random();
        let plan = if u < self.spec.target_success_prob {
            self.stats.succeeding_episodes.fetch_add(1, Ordering::Relaxed);
            let target = SceneTarget::success_for(&self.task, &self.geometry);
            let speed = speed_for_budget(world, &self.geometry, target, self.spec.steps_to_complete);
            Plan::Succeed { target, speed }
        } else {
            Plan::Wander { waypoint: self.random_waypoint(&mut rng), speed: rng.random_range(0.005..0.02) }
        };
        Episode { plan, rng }
    }

    fn next_action(&self, world: &CellWorldState, episode: &mut Episode) -> Action {
        let noise = self.spec.noise_scale;
        let mut action = match &mut episode.plan {
            Plan::Succeed { target, speed } => {
                let (mut a, phase) = drive_action(world, &self.geometry, *target, *speed, false);
                if matches!(phase, super::controller::DrivePhase::Approach) {
                    for v in a.iter_mut().take(3) {
                        *v += jitter(&mut episode.rng, noise);
                    }
                }
                a
            }
            Plan::Wander { waypoint, speed } => {
                let p = world.gripper_pose.position;
                if super::controller::distance(p, *waypoint) < 1e-3 {
                    *waypoint = self.random_waypoint(&mut episode.rng);
                }
                let d = super::controller::distance(p, *waypoint);
                let s = (*speed / d).min(1.0);
                let mut a = [
                    (waypoint[0] - p[0]) * s,
                    (waypoint[1] - p[1]) * s,
                    (waypoint[2] - p[2]) * s,
                    0.0,
                    0.0,
                    0.0,
                    1.0,
                ];
                for v in a.iter_mut().take(3) {
                    *v += jitter(&mut episode.rng, noise);
                }
                a
            }
        };
        for v in action.iter_mut().skip(3).take(3) {
            *v += jitter(&mut episode.rng, noise);
        }
        action
    }
}

async fn act(
    State(state): State<Arc<PolicyState>>,
    body: Result<Json<ObservationPayload>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ActionChunk>, Rejection> {
    state.stats.requests.fetch_add(1, Ordering::Relaxed);
    let Json(obs) = body.map_err(|e| reject(e.body_text()))?;
    let mut world = observed_state(&obs.image, &state.task)?;
    let mut guard = state.episode.lock();
    if world.elapsed_steps == 0 || guard.is_none() {
        *guard = Some(state.start_episode(&world));
    }
    let episode = guard.as_mut().expect("episode set above");
    let mut actions = Vec::with_capacity(state.spec.chunk_size as usize);
    for _ in 0..state.spec.chunk_size {
        let action = state.next_action(&world, episode);
        world = kinematics(&world, &action, &state.geometry).world;
        actions.push(action);
    }
    Ok(Json(ActionChunk { actions }))
}

async fn health() -> StatusCode {
    StatusCode::OK
}

/// Serve `POST /act` for `task`. Each episode (recognised by a frame whose
/// step counter is zero) succeeds with probability `target_success_prob`;
/// succeeding episodes reach the goal within `steps_to_complete` steps and
/// hold it, the others wander above the table with the gripper open.
pub async fn spawn_builtin_policy_server(
    spec: SyntheticPolicySpec,
    task: TaskSpec,
    geometry: SceneGeometry,
    bind: SocketAddr,
) -> Result<ServerHandle, SimError> {
    spec.validate(&task)?;
    geometry.validate().map_err(SimError::InvalidConfig)?;
    let stats = Arc::new(ServerStats::default());
    let state = Arc::new(PolicyState { spec, task, geometry, stats: stats.clone(), episode: Mutex::new(None) });
    let router = Router::new().route("/act", post(act)).route("/health", get(health)).with_state(state);
    serve(router, bind, stats).await
}

struct ClassifierState {
    confusion: [[f64; 3]; 3],
    task: TaskSpec,
    geometry: SceneGeometry,
    rng: Mutex<ChaCha8Rng>,
    stats: Arc<ServerStats>,
}

fn answer_for(table: &[(String, Verdict)], label: Verdict) -> String {
    table
        .iter()
        .find(|(_, v)| *v == label)
        .map(|(answer, _)| answer.clone())
        .unwrap_or_else(|| "invalid".to_owned())
}

async fn classify(
    State(state): State<Arc<ClassifierState>>,
    body: Result<Json<ClassifyRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ClassifyResponse>, Rejection> {
    state.stats.requests.fetch_add(1, Ordering::Relaxed);
    let Json(req) = body.map_err(|e| reject(e.body_text()))?;
    let world = observed_state(&req.image, &state.task)?;
    let prompt = req.prompt.trim().to_lowercase();
    let (truth, table) = if prompt == state.task.success_prompt.to_lowercase() {
        let truth = oracle_verdict(&world, &state.task).map_err(|e| reject(e.to_string()))?;
        (truth, state.task.answer_table())
    } else if prompt == state.task.reset_prompt.to_lowercase() {
        let truth = if world.object_escaped {
            Verdict::Invalid
        } else if in_initial_distribution(&world, &state.task, &state.geometry) {
            Verdict::Success
        } else {
            Verdict::Failure
        };
        (truth, state.task.reset_answer_table())
    } else {
        return Err(reject(format!("unknown prompt {:?}", req.prompt)));
    };
    let label = sample_confusion(&state.confusion, truth, &mut *state.rng.lock());
    Ok(Json(ClassifyResponse { answer: answer_for(&table, label) }))
}

/// Serve `POST /classify` for the success and reset prompts of `task`. The
/// true label comes from the ground-truth predicate (or the initial-state
/// check for the reset prompt); the emitted label is drawn from its
/// confusion row.
pub async fn spawn_builtin_classifier_server(
    confusion: [[f64; 3]; 3],
    task: TaskSpec,
    geometry: SceneGeometry,
    seed: u64,
    bind: SocketAddr,
) -> Result<ServerHandle, SimError> {
    validate_confusion(&confusion).map_err(SimError::InvalidConfig)?;
    geometry.validate().map_err(SimError::InvalidConfig)?;
    let stats = Arc::new(ServerStats::default());
    let state = Arc::new(ClassifierState {
        confusion,
        task,
        geometry,
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        stats: stats.clone(),
    });
    let router = Router::new()
        .route("/classify", post(classify))
        .route("/health", get(health))
        .with_state(state);
    serve(router, bind, stats).await
}
