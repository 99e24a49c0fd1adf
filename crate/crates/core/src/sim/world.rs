use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Container, Scene, StateSummary, TaskGoal, TaskSpec, Verdict};
use crate::safety::WorkspaceBounds;

/// Axis-aligned rectangle on the table plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub const fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1])]
    }

    /// True when a disc of `radius` at `p` lies entirely inside.
    pub fn contains_disc(&self, p: [f64; 2], radius: f64) -> bool {
        p[0] - radius >= self.min[0]
            && p[0] + radius <= self.max[0]
            && p[1] - radius >= self.min[1]
            && p[1] + radius <= self.max[1]
    }
}

/// Static layout of a simulated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGeometry {
    pub workspace_bounds: WorkspaceBounds,
    pub drawer_travel_max: f64,
    /// Handle position with the drawer fully closed. Opening moves it toward -x.
    pub drawer_handle_closed: [f64; 3],
    pub sink_region: Rect,
    pub basket_region: Rect,
    pub object_radius: f64,
    pub object_z: f64,
    /// Top-right cloth corner, the grasp point when unfolded.
    pub cloth_corner: [f64; 2],
    /// Corner displacement at fold fraction 1.
    pub cloth_diagonal: [f64; 2],
    pub cloth_z: f64,
    pub grasp_radius: f64,
    pub home_position: [f64; 3],
}

impl Default for SceneGeometry {
    fn default() -> Self {
        Self {
            workspace_bounds: WorkspaceBounds::default(),
            drawer_travel_max: 0.10,
            drawer_handle_closed: [0.40, 0.05, 0.06],
            sink_region: Rect::new([0.20, -0.18], [0.32, -0.04]),
            basket_region: Rect::new([0.28, 0.06], [0.42, 0.18]),
            object_radius: 0.015,
            object_z: 0.02,
            cloth_corner: [0.38, 0.12],
            cloth_diagonal: [-0.16, -0.24],
            cloth_z: 0.01,
            grasp_radius: 0.03,
            home_position: [0.30, 0.0, 0.15],
        }
    }
}

impl SceneGeometry {
    pub fn validate(&self) -> Result<(), String> {
        self.workspace_bounds.validate()?;
        if !(self.drawer_travel_max > 0.0) {
            return Err("drawer_travel_max must be positive".into());
        }
        if !(self.grasp_radius > 0.0) || !(self.object_radius >= 0.0) {
            return Err("grasp_radius must be positive and object_radius non-negative".into());
        }
        let (home, _) = crate::safety::clamp_to_workspace(self.home_position, &self.workspace_bounds);
        if home != self.home_position {
            return Err("home_position lies outside workspace_bounds".into());
        }
        if self.cloth_diagonal[0].hypot(self.cloth_diagonal[1]) == 0.0 {
            return Err("cloth_diagonal must be non-zero".into());
        }
        Ok(())
    }

    pub fn container_at(&self, xy: [f64; 2]) -> Container {
        if self.sink_region.contains_disc(xy, self.object_radius) {
            Container::Sink
        } else if self.basket_region.contains_disc(xy, self.object_radius) {
            Container::Basket
        } else {
            Container::None
        }
    }

    pub fn drawer_handle(&self, openness: f64) -> [f64; 3] {
        let h = self.drawer_handle_closed;
        [h[0] - openness, h[1], h[2]]
    }

    pub fn cloth_anchor(&self, fold: f64) -> [f64; 3] {
        [
            self.cloth_corner[0] + fold * self.cloth_diagonal[0],
            self.cloth_corner[1] + fold * self.cloth_diagonal[1],
            self.cloth_z,
        ]
    }

    /// The point a gripper must hold to move the scene of `scene`.
    pub fn anchor(&self, scene: Scene, world: &CellWorldState) -> [f64; 3] {
        match scene {
            Scene::Drawer => self.drawer_handle(world.drawer_openness_m),
            Scene::Sink => [world.object_xy_m[0], world.object_xy_m[1], self.object_z],
            Scene::Cloth => self.cloth_anchor(world.fold_fraction),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperPose {
    pub position: [f64; 3],
    /// Roll, pitch, yaw in radians.
    pub rotation: [f64; 3],
    /// 0 closed, 1 open.
    pub gripper: f64,
}

/// Complete state of one simulated cell. All three scene scalars are carried;
/// only the ones of the cell's scene are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellWorldState {
    pub scene: Scene,
    pub gripper_pose: GripperPose,
    pub drawer_openness_m: f64,
    pub object_xy_m: [f64; 2],
    pub container: Container,
    pub fold_fraction: f64,
    pub joint_efforts: [f64; 6],
    pub motors_ok: bool,
    /// Steps taken since the current episode began.
    pub elapsed_steps: u32,
    /// The object has left the workspace; only an operator can bring it back.
    pub object_escaped: bool,
}

pub(crate) const IDLE_EFFORT: f64 = 0.3;

impl CellWorldState {
    /// Arm at home with the gripper open; scene scalars at zero.
    pub fn at_home(scene: Scene, geometry: &SceneGeometry) -> Self {
        let object_xy_m = [0.0, 0.0];
        Self {
            scene,
            gripper_pose: GripperPose { position: geometry.home_position, rotation: [0.0; 3], gripper: 1.0 },
            drawer_openness_m: 0.0,
            object_xy_m,
            container: geometry.container_at(object_xy_m),
            fold_fraction: 0.0,
            joint_efforts: [IDLE_EFFORT; 6],
            motors_ok: true,
            elapsed_steps: 0,
            object_escaped: false,
        }
    }

    pub fn summary(&self) -> StateSummary {
        match self.scene {
            Scene::Drawer => StateSummary::Drawer { drawer_openness_m: self.drawer_openness_m },
            Scene::Sink => StateSummary::Sink {
                object_x_m: self.object_xy_m[0],
                object_y_m: self.object_xy_m[1],
                container: self.container,
            },
            Scene::Cloth => StateSummary::Cloth { fold_fraction: self.fold_fraction },
        }
    }
}

/// Fault injection knobs for a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultProfile {
    pub motor_failure_prob_per_step: f64,
    /// Rows: true label, columns: emitted label, both ordered success,
    /// failure, invalid.
    pub classifier_confusion: [[f64; 3]; 3],
    pub reset_failure_prob: f64,
    pub object_escape_prob_per_episode: f64,
    pub reboot_failure_prob: f64,
    /// Multiplier on the motor failure probability while any joint is over
    /// its effort limit.
    pub effort_breach_factor: f64,
}

pub const IDENTITY_CONFUSION: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Default for FaultProfile {
    fn default() -> Self {
        Self {
            motor_failure_prob_per_step: 0.0,
            classifier_confusion: IDENTITY_CONFUSION,
            reset_failure_prob: 0.0,
            object_escape_prob_per_episode: 0.0,
            reboot_failure_prob: 0.0,
            effort_breach_factor: 10.0,
        }
    }
}

impl FaultProfile {
    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            ("motor_failure_prob_per_step", self.motor_failure_prob_per_step),
            ("reset_failure_prob", self.reset_failure_prob),
            ("object_escape_prob_per_episode", self.object_escape_prob_per_episode),
            ("reboot_failure_prob", self.reboot_failure_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("fault_profile.{name} must lie in [0, 1], got {p}"));
            }
        }
        validate_confusion(&self.classifier_confusion)?;
        if !(self.effort_breach_factor >= 1.0) {
            return Err("fault_profile.effort_breach_factor must be at least 1".into());
        }
        Ok(())
    }
}

pub fn validate_confusion(m: &[[f64; 3]; 3]) -> Result<(), String> {
    for (i, row) in m.iter().enumerate() {
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(format!("classifier_confusion row {i} has an entry outside [0, 1]"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("classifier_confusion row {i} sums to {sum}, not 1"));
        }
    }
    Ok(())
}

/// Draw an emitted label from the confusion row of `truth`.
pub fn sample_confusion<R: Rng + ?Sized>(m: &[[f64; 3]; 3], truth: Verdict, rng: &mut R) -> Verdict {
    let row = &m[truth.index()];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for label in Verdict::ALL {
        acc += row[label.index()];
        if u < acc {
            return label;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    Verdict::ALL.into_iter().rev().find(|l| row[l.index()] > 0.0).unwrap_or(truth)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("motors are down")]
    MotorsDown,
    #[error("world of scene {world:?} does not belong to task scene {task:?}")]
    SceneMismatch { world: Scene, task: Scene },
    #[error("initial-state distribution of {0} is degenerate: 100 draws were all already successful")]
    DistributionDegenerate(String),
    #[error("cannot bind {addr}: {reason}")]
    PortUnavailable { addr: String, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// The ground-truth predicate of `task`, a pure function of the state.
pub fn ground_truth_success(world: &CellWorldState, task: &TaskSpec) -> Result<bool, SimError> {
    if world.scene != task.scene {
        return Err(SimError::SceneMismatch { world: world.scene, task: task.scene });
    }
    let t = &task.success_threshold_params;
    Ok(match task.goal {
        TaskGoal::OpenDrawer => world.drawer_openness_m >= t.drawer_open_min_m,
        TaskGoal::CloseDrawer => world.drawer_openness_m <= t.drawer_closed_max_m,
        TaskGoal::ObjectIn(target) => target != Container::None && world.container == target,
        TaskGoal::FoldCloth => world.fold_fraction >= t.fold_fraction_min,
    })
}

/// The label an oracle success classifier gives.
pub fn oracle_verdict(world: &CellWorldState, task: &TaskSpec) -> Result<Verdict, SimError> {
    if world.object_escaped {
        return Ok(Verdict::Invalid);
    }
    Ok(if ground_truth_success(world, task)? { Verdict::Success } else { Verdict::Failure })
}

/// Whether the scene is a valid starting point for `task`: scene scalars in
/// range, not already successful, arm parked at home with the gripper open.
pub fn in_initial_distribution(world: &CellWorldState, task: &TaskSpec, geometry: &SceneGeometry) -> bool {
    if world.scene != task.scene || world.object_escaped || !world.motors_ok {
        return false;
    }
    let d = &task.initial_state_distribution;
    let in_range = |r: Option<crate::model::Interval>, v: f64| r.is_some_and(|r| r.contains(v));
    let scene_ok = match task.scene {
        Scene::Drawer => in_range(d.drawer_openness_m, world.drawer_openness_m),
        Scene::Sink => in_range(d.object_x_m, world.object_xy_m[0]) && in_range(d.object_y_m, world.object_xy_m[1]),
        Scene::Cloth => in_range(d.fold_fraction, world.fold_fraction),
    };
    let p = world.gripper_pose.position;
    let h = geometry.home_position;
    let dist = ((p[0] - h[0]).powi(2) + (p[1] - h[1]).powi(2) + (p[2] - h[2]).powi(2)).sqrt();
    scene_ok
        && dist <= 0.01
        && world.gripper_pose.gripper >= 0.99
        && !ground_truth_success(world, task).unwrap_or(true)
}

/// Draw an initial state uniformly from the task ranges, rejecting states
/// that already satisfy the task.
pub fn sample_initial_state<R: Rng + ?Sized>(
    task: &TaskSpec,
    geometry: &SceneGeometry,
    rng: &mut R,
) -> Result<CellWorldState, SimError> {
    let d = &task.initial_state_distribution;
    let missing = |name: &str| SimError::InvalidConfig(format!("{}: missing {name} range", task.task_id));
    for _ in 0..100 {
        let mut world = CellWorldState::at_home(task.scene, geometry);
        match task.scene {
            Scene::Drawer => {
                let r = d.drawer_openness_m.ok_or_else(|| missing("drawer_openness_m"))?;
                world.drawer_openness_m = rng.random_range(r.min..=r.max);
            }
            Scene::Sink => {
                let rx = d.object_x_m.ok_or_else(|| missing("object_x_m"))?;
                let ry = d.object_y_m.ok_or_else(|| missing("object_y_m"))?;
                world.object_xy_m = [rng.random_range(rx.min..=rx.max), rng.random_range(ry.min..=ry.max)];
                world.container = geometry.container_at(world.object_xy_m);
            }
            Scene::Cloth => {
                let r = d.fold_fraction.ok_or_else(|| missing("fold_fraction"))?;
                world.fold_fraction = rng.random_range(r.min..=r.max);
            }
        }
        if !ground_truth_success(&world, task)? {
            return Ok(world);
        }
    }
    Err(SimError::DistributionDegenerate(task.task_id.to_string()))
}

/// Scene scalars of a state the reset-success check must reject: a fresh
/// draw pushed outside the task ranges.
pub fn perturbed_state<R: Rng + ?Sized>(
    task: &TaskSpec,
    geometry: &SceneGeometry,
    rng: &mut R,
) -> Result<CellWorldState, SimError> {
    let mut world = sample_initial_state(task, geometry, rng)?;
    let d = &task.initial_state_distribution;
    let b = &geometry.workspace_bounds;
    match task.scene {
        Scene::Drawer => {
            let r = d.drawer_openness_m.expect("sampled above");
            let above = r.max + 0.005 + rng.random_range(0.0..0.005);
            world.drawer_openness_m = if above <= geometry.drawer_travel_max {
                above
            } else {
                (r.min - 0.005 - rng.random_range(0.0..0.005)).max(0.0)
            };
        }
        Scene::Sink => {
            let r = d.object_x_m.expect("sampled above");
            let shift = (r.max - r.min) + 0.02;
            let room_above = b.max_xyz[0] - geometry.object_radius - r.max;
            let x = if room_above >= 0.02 {
                (world.object_xy_m[0] + shift).min(b.max_xyz[0] - geometry.object_radius)
            } else {
                (world.object_xy_m[0] - shift).max(b.min_xyz[0] + geometry.object_radius)
            };
            world.object_xy_m[0] = x;
            world.container = geometry.container_at(world.object_xy_m);
        }
        Scene::Cloth => {
            let r = d.fold_fraction.expect("sampled above");
            world.fold_fraction = (r.max + 0.1 + rng.random_range(0.0..0.1)).min(1.0);
        }
    }
    Ok(world)
}
