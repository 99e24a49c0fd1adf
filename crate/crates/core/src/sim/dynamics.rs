//! Kinematics of a simulated cell.
//!
//! An action is an end-effector delta `(dx, dy, dz, droll, dpitch, dyaw,
//! dgripper)`. The gripper command is a delta too, clamped to `[0, 1]`, so a
//! zero action leaves the arm where it is.
//!
//! Coupling rule: when the gripper was closed (`< 0.5`) and within
//! `grasp_radius` of the scene anchor before the step, the scene follows the
//! effective (post-clamp) translation:
//!
//! * drawer: openness changes by `-dx` (the drawer opens toward -x);
//! * sink: the object moves by `(dx, dy)`;
//! * cloth: the fold fraction changes by the projection of `(dx, dy)` onto
//!   the fold diagonal, in units of the diagonal.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{CellWorldState, FaultProfile, SceneGeometry, SimError, IDLE_EFFORT};
use crate::model::{Action, Scene};
use crate::safety::{check_efforts, clamp_to_workspace};

/// Per-joint share of translational and rotational motion effort.
const MOTION_WEIGHTS: [f64; 6] = [10.0, 12.0, 12.0, 8.0, 6.0, 4.0];
const ROTATION_WEIGHT: f64 = 0.5;
const CONTACT_EFFORT: f64 = 0.6;
const CLAMP_EFFORT_PER_M: f64 = 20.0;
const GRIPPER_CLOSED_BELOW: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub boundary_clamped: bool,
    pub coupled: bool,
    pub effort_breach: bool,
    pub motor_fault: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub world: CellWorldState,
    pub clamped: bool,
    pub coupled: bool,
    /// Distance the commanded position lay outside the workspace.
    pub overshoot_m: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let wrapped = (a + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped == -PI {
        PI
    } else {
        wrapped
    }
}

/// Deterministic part of a step: pose integration, clamping and coupling.
/// Does not touch efforts, motor state or the step counter.
pub fn kinematics(world: &CellWorldState, action: &Action, geometry: &SceneGeometry) -> Kinematics {
    let mut next = *world;
    let pose = world.gripper_pose;
    let commanded = [
        pose.position[0] + action[0],
        pose.position[1] + action[1],
        pose.position[2] + action[2],
    ];
    let (position, clamped) = clamp_to_workspace(commanded, &geometry.workspace_bounds);
    let overshoot_m = (0..3).map(|i| (commanded[i] - position[i]).powi(2)).sum::<f64>().sqrt();
    let delta = [position[0] - pose.position[0], position[1] - pose.position[1], position[2] - pose.position[2]];

    next.gripper_pose.position = position;
    for i in 0..3 {
        next.gripper_pose.rotation[i] = wrap_angle(pose.rotation[i] + action[3 + i]);
    }
    next.gripper_pose.gripper = (pose.gripper + action[6]).clamp(0.0, 1.0);

    let anchor = geometry.anchor(world.scene, world);
    let dist = (0..3).map(|i| (pose.position[i] - anchor[i]).powi(2)).sum::<f64>().sqrt();
    let coupled = !world.object_escaped && pose.gripper < GRIPPER_CLOSED_BELOW && dist <= geometry.grasp_radius;
    if coupled {
        match world.scene {
            Scene::Drawer => {
                next.drawer_openness_m = (world.drawer_openness_m - delta[0]).clamp(0.0, geometry.drawer_travel_max);
            }
            Scene::Sink => {
                next.object_xy_m = [world.object_xy_m[0] + delta[0], world.object_xy_m[1] + delta[1]];
                next.container = geometry.container_at(next.object_xy_m);
            }
            Scene::Cloth => {
                let d = geometry.cloth_diagonal;
                let along = (delta[0] * d[0] + delta[1] * d[1]) / (d[0] * d[0] + d[1] * d[1]);
                next.fold_fraction = (world.fold_fraction + along).clamp(0.0, 1.0);
            }
        }
    }
    Kinematics { world: next, clamped, coupled, overshoot_m }
}

/// Joint efforts for a step that moved by `delta` and rotated by `rotation`.
pub fn joint_efforts(delta: [f64; 3], rotation: [f64; 3], coupled: bool, overshoot_m: f64) -> [f64; 6] {
    let translation = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    let turn = rotation.iter().map(|r| r.abs()).sum::<f64>();
    let mut out = [0.0; 6];
    for (j, e) in out.iter_mut().enumerate() {
        *e = IDLE_EFFORT
            + MOTION_WEIGHTS[j] * translation
            + ROTATION_WEIGHT * turn
            + if coupled { CONTACT_EFFORT } else { 0.0 }
            + CLAMP_EFFORT_PER_M * overshoot_m;
    }
    out
}

/// Execute one blocking action on the cell.
///
/// Exactly one uniform draw is taken from `rng` per call, so trajectories
/// depend only on the seed and the action stream.
pub fn step<R: Rng + ?Sized>(
    world: &CellWorldState,
    action: &Action,
    geometry: &SceneGeometry,
    fault: &FaultProfile,
    rng: &mut R,
) -> Result<(CellWorldState, StepEvents), SimError> {
    if !world.motors_ok {
        return Err(SimError::MotorsDown);
    }
    let k = kinematics(world, action, geometry);
    let mut next = k.world;
    let delta = [
        next.gripper_pose.position[0] - world.gripper_pose.position[0],
        next.gripper_pose.position[1] - world.gripper_pose.position[1],
        next.gripper_pose.position[2] - world.gripper_pose.position[2],
    ];
    next.joint_efforts = joint_efforts(delta, [action[3], action[4], action[5]], k.coupled, k.overshoot_m);
    let effort_breach = !check_efforts(&next.joint_efforts, &geometry.workspace_bounds).is_empty();
    let p = if effort_breach {
        (fault.motor_failure_prob_per_step * fault.effort_breach_factor).min(1.0)
    } else {
        fault.motor_failure_prob_per_step
    };
    let u: f64 = rng.random();
    let motor_fault = u < p;
    if motor_fault {
        next.motors_ok = false;
    }
    next.elapsed_steps = world.elapsed_steps + 1;
    Ok((next, StepEvents { boundary_clamped: k.clamped, coupled: k.coupled, effort_breach, motor_fault }))
}
