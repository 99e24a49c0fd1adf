//! Stateless scripted controller shared by the builtin policy and the reset
//! policy: approach the scene anchor, grasp, drag the scene to a target,
//! release, and optionally park the arm at home.

use serde::{Deserialize, Serialize};

use super::world::{CellWorldState, SceneGeometry};
use crate::model::{Action, Container, Scene, TaskGoal, TaskSpec};

const GRASP_TOLERANCE_M: f64 = 0.01;
const SCALAR_TOLERANCE: f64 = 1e-9;
const HOME_TOLERANCE_M: f64 = 1e-6;

/// Desired value of the scene scalar(s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneTarget {
    Openness(f64),
    ObjectXy([f64; 2]),
    Fold(f64),
}

impl SceneTarget {
    /// A target of the same scene carrying the scalars of `world`.
    pub fn of(world: &CellWorldState) -> Self {
        match world.scene {
            Scene::Drawer => SceneTarget::Openness(world.drawer_openness_m),
            Scene::Sink => SceneTarget::ObjectXy(world.object_xy_m),
            Scene::Cloth => SceneTarget::Fold(world.fold_fraction),
        }
    }

    /// A state comfortably inside the success region of `task`.
    pub fn success_for(task: &TaskSpec, geometry: &SceneGeometry) -> Self {
        let t = &task.success_threshold_params;
        match task.goal {
            TaskGoal::OpenDrawer => SceneTarget::Openness((2.0 * t.drawer_open_min_m).min(geometry.drawer_travel_max)),
            TaskGoal::CloseDrawer => SceneTarget::Openness(0.0),
            TaskGoal::ObjectIn(Container::Basket) => SceneTarget::ObjectXy(geometry.basket_region.center()),
            TaskGoal::ObjectIn(_) => SceneTarget::ObjectXy(geometry.sink_region.center()),
            TaskGoal::FoldCloth => SceneTarget::Fold((2.0 * t.fold_fraction_min).clamp(0.5, 1.0)),
        }
    }

    fn anchor(&self, geometry: &SceneGeometry) -> [f64; 3] {
        match *self {
            SceneTarget::Openness(o) => geometry.drawer_handle(o),
            SceneTarget::ObjectXy(xy) => [xy[0], xy[1], geometry.object_z],
            SceneTarget::Fold(f) => geometry.cloth_anchor(f),
        }
    }

    fn reached(&self, world: &CellWorldState) -> bool {
        match *self {
            SceneTarget::Openness(o) => (world.drawer_openness_m - o).abs() <= SCALAR_TOLERANCE,
            SceneTarget::ObjectXy(xy) => {
                (world.object_xy_m[0] - xy[0]).hypot(world.object_xy_m[1] - xy[1]) <= SCALAR_TOLERANCE
            }
            SceneTarget::Fold(f) => (world.fold_fraction - f).abs() <= SCALAR_TOLERANCE,
        }
    }
}

pub(crate) fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn toward(from: [f64; 3], to: [f64; 3], speed: f64) -> [f64; 3] {
    let d = distance(from, to);
    if d <= speed || d == 0.0 {
        return [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    }
    let s = speed / d;
    [(to[0] - from[0]) * s, (to[1] - from[1]) * s, (to[2] - from[2]) * s]
}

fn translate(delta: [f64; 3], gripper: f64) -> Action {
    [delta[0], delta[1], delta[2], 0.0, 0.0, 0.0, gripper]
}

/// What the next action of a [`drive_action`] does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrivePhase {
    Approach,
    Grasp,
    Drag,
    Release,
    Home,
    Done,
}

/// Next action bringing the scene of `world` to `target` at `speed` metres
/// per step. With `home_after`, the arm returns home once released.
pub fn drive_action(
    world: &CellWorldState,
    geometry: &SceneGeometry,
    target: SceneTarget,
    speed: f64,
    home_after: bool,
) -> (Action, DrivePhase) {
    let pos = world.gripper_pose.position;
    let closed = world.gripper_pose.gripper < 0.5;
    if target.reached(world) {
        if closed {
            return ([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], DrivePhase::Release);
        }
        if home_after && distance(pos, geometry.home_position) > HOME_TOLERANCE_M {
            return (translate(toward(pos, geometry.home_position, speed), 1.0), DrivePhase::Home);
        }
        return ([0.0; 7], DrivePhase::Done);
    }
    let anchor = geometry.anchor(world.scene, world);
    let dist = distance(pos, anchor);
    if closed {
        if dist <= geometry.grasp_radius * 0.9 {
            let goal = target.anchor(geometry);
            let step = toward(anchor, goal, speed);
            return (translate(step, 0.0), DrivePhase::Drag);
        }
        return ([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], DrivePhase::Release);
    }
    if dist <= GRASP_TOLERANCE_M {
        return ([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0], DrivePhase::Grasp);
    }
    (translate(toward(pos, anchor, speed), 1.0), DrivePhase::Approach)
}

/// Straight-line path length of a drive: gripper to anchor, then anchor to
/// its target position.
pub fn drive_length(world: &CellWorldState, geometry: &SceneGeometry, target: SceneTarget) -> f64 {
    let anchor = geometry.anchor(world.scene, world);
    distance(world.gripper_pose.position, anchor) + distance(anchor, target.anchor(geometry))
}

/// Speed at which a drive of `world` to `target` finishes within `steps`.
/// Approach and drag each round up by at most one step, and grasp and
/// release take one step each; two more steps absorb motion noise.
pub fn speed_for_budget(world: &CellWorldState, geometry: &SceneGeometry, target: SceneTarget, steps: u32) -> f64 {
    let usable = steps.saturating_sub(6).max(1) as f64;
    (drive_length(world, geometry, target) / usable).max(1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_tasks;
    use crate::sim::dynamics::kinematics;
    use crate::sim::world::{ground_truth_success, sample_initial_state};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn drives_every_task_to_success_within_budget() {
        let g = SceneGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for task in builtin_tasks() {
            for budget in [10, 30, task.max_steps] {
                let mut w = sample_initial_state(&task, &g, &mut rng).unwrap();
                let target = SceneTarget::success_for(&task, &g);
                let speed = speed_for_budget(&w, &g, target, budget);
                let mut first_done = None;
                for i in 0..task.max_steps {
                    let (a, phase) = drive_action(&w, &g, target, speed, false);
                    if phase == DrivePhase::Done && first_done.is_none() {
                        first_done = Some(i);
                    }
                    w = kinematics(&w, &a, &g).world;
                }
                assert!(ground_truth_success(&w, &task).unwrap(), "{} budget {budget}", task.task_id);
                assert!(first_done.unwrap() <= budget, "{} budget {budget}: {first_done:?}", task.task_id);
            }
        }
    }

    #[test]
    fn reset_drive_returns_home_with_gripper_open() {
        let g = SceneGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for task in builtin_tasks() {
            let mut w = sample_initial_state(&task, &g, &mut rng).unwrap();
            let goal = SceneTarget::of(&sample_initial_state(&task, &g, &mut rng).unwrap());
            let mut done = false;
            for _ in 0..400 {
                let (a, phase) = drive_action(&w, &g, goal, 0.02, true);
                if phase == DrivePhase::Done {
                    done = true;
                    break;
                }
                w = kinematics(&w, &a, &g).world;
            }
            assert!(done, "{}", task.task_id);
            assert!(goal.reached(&w));
            assert!(distance(w.gripper_pose.position, g.home_position) <= HOME_TOLERANCE_M);
        }
    }
}
