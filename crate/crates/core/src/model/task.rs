use serde::{Deserialize, Serialize};

use super::TaskId;
use crate::model::Verdict;
use crate::safety::WorkspaceBounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scene {
    Drawer,
    Sink,
    Cloth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Container {
    Sink,
    Basket,
    None,
}

/// What the ground-truth predicate checks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "target")]
pub enum TaskGoal {
    OpenDrawer,
    CloseDrawer,
    ObjectIn(Container),
    FoldCloth,
}

impl TaskGoal {
    pub fn scene(self) -> Scene {
        match self {
            TaskGoal::OpenDrawer | TaskGoal::CloseDrawer => Scene::Drawer,
            TaskGoal::ObjectIn(_) => Scene::Sink,
            TaskGoal::FoldCloth => Scene::Cloth,
        }
    }
}

/// Closed interval `[min, max]` used for initial-state randomization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    /// Non-empty means `min < max` with both ends finite.
    pub fn is_non_empty(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min < self.max
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }

    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.min >= lo && self.max <= hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Per-scene parameter ranges for initial-state randomization. Only the
/// ranges relevant to the task's scene are consulted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateDistribution {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drawer_openness_m: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_x_m: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_y_m: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_fraction: Option<Interval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessThresholds {
    /// An open-drawer trial succeeds once the drawer is open at least this far.
    #[serde(default = "SuccessThresholds::default_open_min")]
    pub drawer_open_min_m: f64,
    /// Tolerance for "completely closed".
    #[serde(default = "SuccessThresholds::default_closed_max")]
    pub drawer_closed_max_m: f64,
    #[serde(default = "SuccessThresholds::default_fold_min")]
    pub fold_fraction_min: f64,
}

impl SuccessThresholds {
    fn default_open_min() -> f64 {
        0.015
    }
    fn default_closed_max() -> f64 {
        0.002
    }
    fn default_fold_min() -> f64 {
        0.25
    }
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            drawer_open_min_m: Self::default_open_min(),
            drawer_closed_max_m: Self::default_closed_max(),
            fold_fraction_min: Self::default_fold_min(),
        }
    }
}

/// An evaluation task: instruction, step budget and ground-truth predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub scene: Scene,
    pub goal: TaskGoal,
    pub instruction: String,
    /// Step budget K for one rollout.
    pub max_steps: u32,
    /// Question put to the success classifier about the final frame.
    pub success_prompt: String,
    /// Question put to the reset-success classifier.
    pub reset_prompt: String,
    pub reset_instruction: String,
    #[serde(rename = "ranges")]
    pub initial_state_distribution: InitialStateDistribution,
    #[serde(default, rename = "thresholds")]
    pub success_threshold_params: SuccessThresholds,
}

impl TaskSpec {
    /// Answer table for the success prompt. Keys are lower-case.
    pub fn answer_table(&self) -> Vec<(String, Verdict)> {
        let pairs: &[(&str, Verdict)] = match self.goal {
            TaskGoal::OpenDrawer | TaskGoal::FoldCloth => &[
                ("yes", Verdict::Success),
                ("no", Verdict::Failure),
                ("invalid", Verdict::Invalid),
            ],
            // The drawer question asks whether it is open.
            TaskGoal::CloseDrawer => &[
                ("yes", Verdict::Failure),
                ("no", Verdict::Success),
                ("invalid", Verdict::Invalid),
            ],
            TaskGoal::ObjectIn(Container::Basket) => &[
                ("basket", Verdict::Success),
                ("sink", Verdict::Failure),
                ("invalid", Verdict::Invalid),
            ],
            TaskGoal::ObjectIn(_) => &[
                ("sink", Verdict::Success),
                ("basket", Verdict::Failure),
                ("invalid", Verdict::Invalid),
            ],
        };
        pairs.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
    }

    /// Answer table for the reset prompt: "yes" means back in distribution.
    pub fn reset_answer_table(&self) -> Vec<(String, Verdict)> {
        vec![
            ("yes".to_owned(), Verdict::Success),
            ("no".to_owned(), Verdict::Failure),
            ("invalid".to_owned(), Verdict::Invalid),
        ]
    }
}

/// One failed [`TaskSpec`] invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskSpecViolation {
    pub field: &'static str,
    pub message: String,
}

impl TaskSpecViolation {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self { field, message: message.into() }
    }
}

/// Check every [`TaskSpec`] invariant. An empty list means the task is valid.
pub fn validate_task_spec(
    spec: &TaskSpec,
    bounds: &WorkspaceBounds,
    drawer_travel_max_m: f64,
) -> Vec<TaskSpecViolation> {
    let mut out = Vec::new();
    if spec.max_steps == 0 {
        out.push(TaskSpecViolation::new("max_steps", "must be at least 1"));
    }
    for (field, text) in [
        ("instruction", &spec.instruction),
        ("success_prompt", &spec.success_prompt),
        ("reset_prompt", &spec.reset_prompt),
    ] {
        if text.trim().is_empty() {
            out.push(TaskSpecViolation::new(field, "must not be empty"));
        }
    }
    if spec.goal.scene() != spec.scene {
        out.push(TaskSpecViolation::new(
            "goal",
            format!("{:?} does not belong to scene {:?}", spec.goal, spec.scene),
        ));
    }

    let dist = &spec.initial_state_distribution;
    let mut check_range = |name: &'static str, range: Option<Interval>, lo: f64, hi: f64| match range {
        None => out.push(TaskSpecViolation::new(
            "initial_state_distribution",
            format!("{name} range is required for scene {:?}", spec.scene),
        )),
        Some(r) if !r.is_non_empty() => out.push(TaskSpecViolation::new(
            "initial_state_distribution",
            format!("{name} range [{}, {}] is empty", r.min, r.max),
        )),
        Some(r) if !r.within(lo, hi) => out.push(TaskSpecViolation::new(
            "initial_state_distribution",
            format!("{name} range [{}, {}] leaves [{lo}, {hi}]", r.min, r.max),
        )),
        Some(_) => {}
    };
    match spec.scene {
        Scene::Drawer => check_range("drawer_openness_m", dist.drawer_openness_m, 0.0, drawer_travel_max_m),
        Scene::Sink => {
            check_range("object_x_m", dist.object_x_m, bounds.min_xyz[0], bounds.max_xyz[0]);
            check_range("object_y_m", dist.object_y_m, bounds.min_xyz[1], bounds.max_xyz[1]);
        }
        Scene::Cloth => check_range("fold_fraction", dist.fold_fraction, 0.0, 1.0),
    }

    let t = &spec.success_threshold_params;
    if !(t.drawer_open_min_m > 0.0 && t.drawer_open_min_m <= drawer_travel_max_m) {
        out.push(TaskSpecViolation::new("success_threshold_params", "drawer_open_min_m must lie in (0, travel]"));
    }
    if !(t.drawer_closed_max_m >= 0.0 && t.drawer_closed_max_m < t.drawer_open_min_m) {
        out.push(TaskSpecViolation::new(
            "success_threshold_params",
            "drawer_closed_max_m must lie in [0, drawer_open_min_m)",
        ));
    }
    if !(t.fold_fraction_min > 0.0 && t.fold_fraction_min <= 1.0) {
        out.push(TaskSpecViolation::new("success_threshold_params", "fold_fraction_min must lie in (0, 1]"));
    }
    out
}

/// The five tasks of the drawer, sink and cloth scenes with their default
/// step budgets (70 / 100 / 80).
pub fn builtin_tasks() -> Vec<TaskSpec> {
    const DRAWER_PROMPT: &str = "is the drawer open? answer yes or no";
    const SINK_PROMPT: &str = "is the eggplant in the sink or in the basket? answer sink or basket or invalid";
    const CLOTH_PROMPT: &str = "is the blue cloth folded or unfolded? answer yes or no";

    let task = |id: &str, goal: TaskGoal, instruction: &str, k: u32, prompt: &str, reset: &str, dist| TaskSpec {
        task_id: TaskId::from(id),
        scene: goal.scene(),
        goal,
        instruction: instruction.to_owned(),
        max_steps: k,
        success_prompt: prompt.to_owned(),
        reset_prompt: format!("is the scene ready for \"{instruction}\"? answer yes or no"),
        reset_instruction: reset.to_owned(),
        initial_state_distribution: dist,
        success_threshold_params: SuccessThresholds::default(),
    };

    vec![
        task(
            "open_drawer",
            TaskGoal::OpenDrawer,
            "open the drawer",
            70,
            DRAWER_PROMPT,
            "close the drawer",
            InitialStateDistribution {
                drawer_openness_m: Some(Interval::new(0.0, 0.008)),
                ..Default::default()
            },
        ),
        task(
            "close_drawer",
            TaskGoal::CloseDrawer,
            "close the drawer",
            70,
            DRAWER_PROMPT,
            "open the drawer",
            InitialStateDistribution {
                drawer_openness_m: Some(Interval::new(0.03, 0.09)),
                ..Default::default()
            },
        ),
        task(
            "eggplant_to_basket",
            TaskGoal::ObjectIn(Container::Basket),
            "put the eggplant in the yellow basket",
            100,
            SINK_PROMPT,
            "put the eggplant in the blue sink",
            InitialStateDistribution {
                object_x_m: Some(Interval::new(0.22, 0.30)),
                object_y_m: Some(Interval::new(-0.16, -0.06)),
                ..Default::default()
            },
        ),
        task(
            "eggplant_to_sink",
            TaskGoal::ObjectIn(Container::Sink),
            "put the eggplant in the blue sink",
            100,
            SINK_PROMPT,
            "put the eggplant in the yellow basket",
            InitialStateDistribution {
                object_x_m: Some(Interval::new(0.30, 0.40)),
                object_y_m: Some(Interval::new(0.08, 0.16)),
                ..Default::default()
            },
        ),
        task(
            "fold_cloth",
            TaskGoal::FoldCloth,
            "fold the cloth from top right to bottom left",
            80,
            CLOTH_PROMPT,
            "unfold the cloth",
            InitialStateDistribution {
                fold_fraction: Some(Interval::new(0.0, 0.10)),
                ..Default::default()
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drawer() -> TaskSpec {
        builtin_tasks().into_iter().find(|t| t.task_id.as_str() == "open_drawer").unwrap()
    }

    #[test]
    fn builtin_tasks_are_valid_with_expected_budgets() {
        let bounds = WorkspaceBounds::default();
        for task in builtin_tasks() {
            assert_eq!(validate_task_spec(&task, &bounds, 0.10), vec![], "{}", task.task_id);
            let expected = match task.scene {
                Scene::Drawer => 70,
                Scene::Sink => 100,
                Scene::Cloth => 80,
            };
            assert_eq!(task.max_steps, expected);
        }
    }

    #[test]
    fn zero_step_budget_is_rejected() {
        let mut spec = drawer();
        spec.max_steps = 0;
        let v = validate_task_spec(&spec, &WorkspaceBounds::default(), 0.10);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "max_steps");
    }

    #[test]
    fn empty_range_is_rejected() {
        let mut spec = builtin_tasks().into_iter().find(|t| t.scene == Scene::Sink).unwrap();
        spec.initial_state_distribution.object_x_m = Some(Interval::new(0.3, 0.3));
        let v = validate_task_spec(&spec, &WorkspaceBounds::default(), 0.10);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "initial_state_distribution");
    }

    #[test]
    fn range_outside_workspace_is_rejected() {
        let mut spec = builtin_tasks().into_iter().find(|t| t.scene == Scene::Sink).unwrap();
        spec.initial_state_distribution.object_y_m = Some(Interval::new(0.1, 0.9));
        assert!(!validate_task_spec(&spec, &WorkspaceBounds::default(), 0.10).is_empty());
    }

    #[test]
    fn close_drawer_answers_are_inverted() {
        let spec = builtin_tasks().into_iter().find(|t| t.task_id.as_str() == "close_drawer").unwrap();
        let table = spec.answer_table();
        assert!(table.contains(&("no".to_owned(), Verdict::Success)));
    }
}
