//! Seedable simulated robot cells and the builtin mock servers.

mod cell;
pub mod controller;
pub mod dynamics;
pub mod render;
mod servers;
mod world;

pub use cell::{ResetRun, SimCell};
pub use dynamics::{step, StepEvents};
pub use servers::{
    spawn_builtin_classifier_server, spawn_builtin_policy_server, ServerHandle, ServerStats, SyntheticPolicySpec,
};
pub use world::{
    ground_truth_success, in_initial_distribution, oracle_verdict, perturbed_state, sample_confusion,
    sample_initial_state, validate_confusion, CellWorldState, FaultProfile, GripperPose, Rect, SceneGeometry,
    SimError, IDENTITY_CONFUSION,
};
