use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::controller::{drive_action, DrivePhase, SceneTarget};
use super::dynamics::{self, StepEvents};
use super::render;
use super::world::{
    ground_truth_success, in_initial_distribution, perturbed_state, sample_initial_state, CellWorldState,
    FaultProfile, SceneGeometry, SimError, IDLE_EFFORT,
};
use crate::model::{Action, CellId, Scene, TaskSpec};

/// Stream used for draws made outside any episode (construction, restores).
const SETUP_STREAM: u64 = u64::MAX;

/// Outcome of one run of the builtin reset policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ResetRun {
    pub steps: Vec<(Action, StepEvents)>,
    /// The scene ended in the initial-state distribution. The engine does not
    /// read this; it asks the reset-success classifier instead.
    pub in_distribution: bool,
    /// The run stopped early because the motors went down.
    pub motor_fault: bool,
}

/// A simulated robot cell: world state, layout, fault profile and the
/// seeded random stream.
///
/// The stream is split per episode: [`SimCell::begin_episode`] switches to
/// the stream of that episode index, so a re-run draws the same numbers no
/// matter how many episodes came before it.
#[derive(Debug, Clone)]
pub struct SimCell {
    pub cell_id: CellId,
    pub geometry: SceneGeometry,
    pub fault: FaultProfile,
    task: TaskSpec,
    world: CellWorldState,
    seed: u64,
    rng: ChaCha8Rng,
    escape_pending: bool,
    /// Gripper speed of the reset policy in metres per step.
    pub reset_speed: f64,
    pub max_reset_steps: u32,
}

impl SimCell {
    pub fn new(
        cell_id: CellId,
        task: TaskSpec,
        geometry: SceneGeometry,
        fault: FaultProfile,
        seed: u64,
    ) -> Result<Self, SimError> {
        geometry.validate().map_err(SimError::InvalidConfig)?;
        fault.validate().map_err(SimError::InvalidConfig)?;
        let mut rng = Self::stream(seed, SETUP_STREAM);
        let world = sample_initial_state(&task, &geometry, &mut rng)?;
        Ok(Self {
            cell_id,
            geometry,
            fault,
            task,
            world,
            seed,
            rng,
            escape_pending: false,
            reset_speed: 0.02,
            max_reset_steps: 300,
        })
    }

    fn stream(seed: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        rng
    }

    pub fn world(&self) -> &CellWorldState {
        &self.world
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn scene(&self) -> Scene {
        self.world.scene
    }

    /// Switch to another task of the same scene. The world is kept.
    pub fn set_task(&mut self, task: TaskSpec) -> Result<(), SimError> {
        if task.scene != self.world.scene {
            return Err(SimError::SceneMismatch { world: self.world.scene, task: task.scene });
        }
        self.task = task;
        Ok(())
    }

    /// Overwrite the world, e.g. to stage a scenario in a test.
    pub fn set_world(&mut self, world: CellWorldState) {
        self.world = world;
    }

    /// Start episode `index`: select its random stream, zero the step
    /// counter and decide whether the object escapes during it.
    pub fn begin_episode(&mut self, index: u64) {
        self.rng = Self::stream(self.seed, index);
        self.world.elapsed_steps = 0;
        let u: f64 = self.rng.random();
        self.escape_pending = u < self.fault.object_escape_prob_per_episode;
    }

    pub fn step(&mut self, action: &Action) -> Result<StepEvents, SimError> {
        let (mut next, events) = dynamics::step(&self.world, action, &self.geometry, &self.fault, &mut self.rng)?;
        if self.escape_pending {
            self.escape_pending = false;
            next.object_escaped = true;
        }
        self.world = next;
        Ok(events)
    }

    pub fn render(&self) -> RgbImage {
        render::render(&self.world, &self.geometry)
    }

    pub fn ground_truth(&self) -> bool {
        ground_truth_success(&self.world, &self.task).unwrap_or(false)
    }

    pub fn in_initial_distribution(&self) -> bool {
        in_initial_distribution(&self.world, &self.task, &self.geometry)
    }

    /// Run the scripted reset policy. With probability `reset_failure_prob`
    /// it drives the scene to a state outside the initial distribution;
    /// otherwise to a fresh draw from it. Drawer, object and cloth are all
    /// moved by grasping and dragging, then the arm parks at home.
    pub fn run_reset(&mut self) -> Result<ResetRun, SimError> {
        if !self.world.motors_ok {
            return Err(SimError::MotorsDown);
        }
        let u: f64 = self.rng.random();
        let fails = u < self.fault.reset_failure_prob;
        let target = if self.world.object_escaped {
            // Nothing to grasp; park the arm and give up.
            SceneTarget::of(&self.world)
        } else if fails {
            SceneTarget::of(&perturbed_state(&self.task, &self.geometry, &mut self.rng)?)
        } else {
            SceneTarget::of(&sample_initial_state(&self.task, &self.geometry, &mut self.rng)?)
        };
        let mut steps = Vec::new();
        for _ in 0..self.max_reset_steps {
            let (action, phase) = drive_action(&self.world, &self.geometry, target, self.reset_speed, true);
            if phase == DrivePhase::Done {
                break;
            }
            let events = self.step(&action)?;
            steps.push((action, events));
            if events.motor_fault {
                return Ok(ResetRun { steps, in_distribution: false, motor_fault: true });
            }
        }
        Ok(ResetRun { steps, in_distribution: self.in_initial_distribution(), motor_fault: false })
    }

    /// Software reboot: park the arm at its safe pose and clear the motor
    /// fault. Fails with probability `reboot_failure_prob`.
    pub fn reboot(&mut self) -> bool {
        let u: f64 = self.rng.random();
        if u < self.fault.reboot_failure_prob {
            return false;
        }
        self.park();
        self.world.motors_ok = true;
        true
    }

    fn park(&mut self) {
        self.world.gripper_pose.position = self.geometry.home_position;
        self.world.gripper_pose.rotation = [0.0; 3];
        self.world.gripper_pose.gripper = 1.0;
        self.world.joint_efforts = [IDLE_EFFORT; 6];
    }

    /// What an on-call operator does: recover the object, fix the motors and
    /// set up a fresh initial scene.
    pub fn operator_restore(&mut self) -> Result<(), SimError> {
        let mut rng = Self::stream(self.seed ^ self.world.elapsed_steps as u64, SETUP_STREAM);
        let mut world = sample_initial_state(&self.task, &self.geometry, &mut rng)?;
        world.elapsed_steps = self.world.elapsed_steps;
        self.world = world;
        self.escape_pending = false;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_tasks;

    fn cell(task: &str, fault: FaultProfile) -> SimCell {
        let task = builtin_tasks().into_iter().find(|t| t.task_id.as_str() == task).unwrap();
        SimCell::new("c".into(), task, SceneGeometry::default(), fault, 11).unwrap()
    }

    #[test]
    fn perfect_reset_always_lands_in_distribution() {
        for task in ["open_drawer", "close_drawer", "eggplant_to_sink", "eggplant_to_basket", "fold_cloth"] {
            let mut c = cell(task, FaultProfile::default());
            for i in 0..20 {
                c.begin_episode(i);
                let run = c.run_reset().unwrap();
                assert!(run.in_distribution, "{task}");
                assert!(c.in_initial_distribution());
                assert!(!run.steps.is_empty());
            }
        }
    }

    #[test]
    fn certain_reset_failure_never_lands_in_distribution() {
        let mut c = cell("fold_cloth", FaultProfile { reset_failure_prob: 1.0, ..Default::default() });
        for i in 0..20 {
            c.begin_episode(i);
            assert!(!c.run_reset().unwrap().in_distribution);
        }
    }

    #[test]
    fn episode_streams_are_reproducible() {
        let fault = FaultProfile { motor_failure_prob_per_step: 0.05, ..Default::default() };
        let mut a = cell("eggplant_to_sink", fault.clone());
        let mut b = cell("eggplant_to_sink", fault);
        a.begin_episode(3);
        // b visits another episode first; episode 3 must not care.
        b.begin_episode(1);
        let _ = b.run_reset();
        b.set_world(*a.world());
        b.begin_episode(3);
        let action = [0.01, -0.005, -0.01, 0.0, 0.0, 0.1, 0.0];
        for _ in 0..30 {
            let ea = a.step(&action);
            let eb = b.step(&action);
            assert_eq!(ea, eb);
            assert_eq!(a.world(), b.world());
            if ea.is_err() {
                break;
            }
        }
    }

    #[test]
    fn escaped_object_blocks_reset_until_operator_restores() {
        let mut c = cell("eggplant_to_basket", FaultProfile { object_escape_prob_per_episode: 1.0, ..Default::default() });
        c.begin_episode(0);
        c.step(&[0.0; 7]).unwrap();
        assert!(c.world().object_escaped);
        assert!(!c.run_reset().unwrap().in_distribution);
        c.operator_restore().unwrap();
        assert!(c.in_initial_distribution());
    }

    #[test]
    fn reboot_parks_arm_and_clears_fault() {
        let mut c = cell("open_drawer", FaultProfile { motor_failure_prob_per_step: 1.0, ..Default::default() });
        c.begin_episode(0);
        assert!(c.step(&[0.01, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap().motor_fault);
        assert_eq!(c.step(&[0.0; 7]), Err(SimError::MotorsDown));
        assert!(c.reboot());
        assert!(c.world().motors_ok);
        assert_eq!(c.world().gripper_pose.position, c.geometry.home_position);
    }
}
