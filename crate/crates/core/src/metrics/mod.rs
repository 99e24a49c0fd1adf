//! Success rates, rank consistency between two evaluation methods,
//! throughput accounting and the episode report store.

mod fixtures;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::Window;
use crate::model::{Action, EpisodeRecord, StepPhase};

pub use fixtures::{parse_rate_table, read_rate_table, FixtureError, RateTable};
pub use report::{
    EpisodeRow, EvaluationReport, FrameRefs, JobSummary, RecoveryCounts, RelabelEntry, ReportConfig, ReportError,
    ReportStore,
};

pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no valid episodes")]
    NoValidEpisodes,
    #[error("a vector has zero variance")]
    DegenerateVariance,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} entries, got {got}")]
    TooFew { min: usize, got: usize },
    #[error("policy sets differ: {0}")]
    PolicySetMismatch(String),
    #[error("empty time window")]
    EmptyWindow,
    #[error("no tasks")]
    NoTasks,
    #[error("rate {successes}/{trials} is not a proportion")]
    InvalidRate { successes: u32, trials: u32 },
}

/// `successes` out of `trials`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: u32,
    pub trials: u32,
}

impl Rate {
    pub fn new(successes: u32, trials: u32) -> Result<Self, MetricsError> {
        if trials == 0 || successes > trials {
            return Err(MetricsError::InvalidRate { successes, trials });
        }
        Ok(Self { successes, trials })
    }

    pub fn value(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

/// Per-policy success rates in a fixed policy order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessRateVector {
    pub entries: Vec<(String, Rate)>,
}

impl SuccessRateVector {
    pub fn new(entries: Vec<(String, Rate)>) -> Result<Self, MetricsError> {
        let mut seen = std::collections::HashSet::new();
        for (label, _) in &entries {
            if !seen.insert(label.as_str()) {
                return Err(MetricsError::PolicySetMismatch(format!("duplicate policy {label}")));
            }
        }
        Ok(Self { entries })
    }

    /// Rates out of a common denominator, labelled `p0, p1, ...`.
    pub fn from_counts(successes: &[u32], trials: u32) -> Result<Self, MetricsError> {
        let entries = successes
            .iter()
            .enumerate()
            .map(|(i, &k)| Ok((format!("p{i}"), Rate::new(k, trials)?)))
            .collect::<Result<Vec<_>, MetricsError>>()?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, policy: &str) -> Option<Rate> {
        self.entries.iter().find(|(p, _)| p == policy).map(|(_, r)| *r)
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, r)| r.value()).collect()
    }

    /// Values of `other` in the policy order of `self`.
    fn aligned(&self, other: &SuccessRateVector) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
        if self.len() != other.len() {
            return Err(MetricsError::PolicySetMismatch(format!("{} vs {} policies", self.len(), other.len())));
        }
        let mut b = Vec::with_capacity(self.len());
        for (policy, _) in &self.entries {
            let rate = other.get(policy).ok_or_else(|| MetricsError::PolicySetMismatch(format!("{policy} missing")))?;
            b.push(rate.value());
        }
        Ok((self.values(), b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub successes: u32,
    pub valid: u32,
    pub rate: f64,
    pub wilson_ci_95: (f64, f64),
}

/// Wilson score interval for `successes` of `n`.
pub fn wilson(successes: u32, n: u32, z: f64) -> Result<(f64, f64), MetricsError> {
    if n == 0 {
        return Err(MetricsError::NoValidEpisodes);
    }
    if successes > n {
        return Err(MetricsError::InvalidRate { successes, trials: n });
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = (center - half).max(0.0).min(p);
    let hi = (center + half).min(1.0).max(p);
    Ok((lo, hi))
}

/// Success rate over valid episodes with its 95% Wilson interval.
pub fn success_rate(episodes: &[EpisodeRecord]) -> Result<SuccessRate, MetricsError> {
    let valid = episodes.iter().filter(|e| e.valid).count() as u32;
    let successes = episodes.iter().filter(|e| e.is_success()).count() as u32;
    let ci = wilson(successes, valid, Z_95)?;
    Ok(SuccessRate { successes, valid, rate: successes as f64 / valid as f64, wilson_ci_95: ci })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFew { min: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean maximum rank violation of `cand` against `reference`, on plain
/// slices in matching order. Magnitudes come from `reference`.
pub fn mmrv_values(reference: &[f64], cand: &[f64]) -> Result<f64, MetricsError> {
    if reference.len() != cand.len() {
        return Err(MetricsError::LengthMismatch { left: reference.len(), right: cand.len() });
    }
    let n = reference.len();
    if n < 2 {
        return Err(MetricsError::TooFew { min: 2, got: n });
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut worst = 0.0f64;
        for j in 0..n {
            let flipped = (cand[i] < cand[j]) != (reference[i] < reference[j]);
            if flipped {
                worst = worst.max((reference[i] - reference[j]).abs());
            }
        }
        total += worst;
    }
    Ok(total / n as f64)
}

pub fn mmrv(reference: &SuccessRateVector, cand: &SuccessRateVector) -> Result<f64, MetricsError> {
    let (a, b) = reference.aligned(cand)?;
    mmrv_values(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConsistency {
    pub pearson: f64,
    pub mmrv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMetrics {
    pub per_task: BTreeMap<String, TaskConsistency>,
    pub average_pearson: f64,
    pub average_mmrv: f64,
}

/// Pearson and MMRV per task plus their unweighted means.
pub fn aggregate_consistency(
    tables: &BTreeMap<String, (SuccessRateVector, SuccessRateVector)>,
) -> Result<ConsistencyMetrics, MetricsError> {
    if tables.is_empty() {
        return Err(MetricsError::NoTasks);
    }
    let mut per_task = BTreeMap::new();
    for (task, (reference, cand)) in tables {
        let (a, b) = reference.aligned(cand)?;
        let r = match pearson(&a, &b) {
            // Two constant, identical vectors agree perfectly.
            Err(MetricsError::DegenerateVariance) if a == b => 1.0,
            other => other?,
        };
        per_task.insert(task.clone(), TaskConsistency { pearson: r, mmrv: mmrv_values(&a, &b)? });
    }
    let n = per_task.len() as f64;
    let average_pearson = per_task.values().map(|t| t.pearson).sum::<f64>() / n;
    let average_mmrv = per_task.values().map(|t| t.mmrv).sum::<f64>() / n;
    Ok(ConsistencyMetrics { per_task, average_pearson, average_mmrv })
}

/// Consistency of a candidate table against a reference table over the
/// tasks both contain.
pub fn compare_tables(reference: &RateTable, cand: &RateTable) -> Result<ConsistencyMetrics, MetricsError> {
    let mut tables = BTreeMap::new();
    for (task, r) in &reference.tasks {
        let c = cand
            .task(task)
            .ok_or_else(|| MetricsError::PolicySetMismatch(format!("candidate table lacks task {task}")))?;
        tables.insert(task.clone(), (r.clone(), c.clone()));
    }
    if tables.len() != cand.tasks.len() {
        return Err(MetricsError::PolicySetMismatch("task sets differ".into()));
    }
    aggregate_consistency(&tables)
}

/// Valid evaluation steps per minute over `window`. Only eval-phase steps
/// of valid episodes that started inside the window count.
pub fn throughput(episodes: &[EpisodeRecord], window: Window) -> Result<f64, MetricsError> {
    if window.duration_s().is_nan() || window.duration_s() <= 0.0 {
        return Err(MetricsError::EmptyWindow);
    }
    let steps: usize = episodes
        .iter()
        .filter(|e| e.valid && window.contains(e.started_at))
        .map(|e| e.step_log.iter().filter(|s| s.phase == StepPhase::Eval).count())
        .sum();
    Ok(steps as f64 / (window.duration_s() / 60.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanTime {
    pub auto_minutes: f64,
    pub manual_minutes: f64,
    pub reduction_fraction: f64,
}

pub fn human_time_saved(interventions: u32, minutes_per_intervention: f64, manual_eval_minutes: f64) -> HumanTime {
    let auto_minutes = interventions as f64 * minutes_per_intervention;
    let reduction_fraction = if manual_eval_minutes > 0.0 { 1.0 - auto_minutes / manual_eval_minutes } else { 0.0 };
    HumanTime { auto_minutes, manual_minutes: manual_eval_minutes, reduction_fraction }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionError {
    pub mse: f64,
    pub normalized_mse: f64,
}

/// Mean squared error over every action component. The normalized variant
/// divides each dimension by `scale` first; without one, by the reference's
/// per-dimension standard deviation (1 where it is zero).
pub fn action_mse(predicted: &[Action], reference: &[Action], scale: Option<&Action>) -> Result<ActionError, MetricsError> {
    if predicted.len() != reference.len() {
        return Err(MetricsError::LengthMismatch { left: predicted.len(), right: reference.len() });
    }
    if predicted.is_empty() {
        return Err(MetricsError::TooFew { min: 1, got: 0 });
    }
    let scale = match scale {
        Some(s) => *s,
        None => reference_std(reference),
    };
    let count = (predicted.len() * 7) as f64;
    let (mut sum, mut norm_sum) = (0.0, 0.0);
    for (p, r) in predicted.iter().zip(reference) {
        for d in 0..7 {
            let e = p[d] - r[d];
            sum += e * e;
            let s = if scale[d] == 0.0 { 1.0 } else { scale[d] };
            norm_sum += (e / s) * (e / s);
        }
    }
    Ok(ActionError { mse: sum / count, normalized_mse: norm_sum / count })
}

fn reference_std(reference: &[Action]) -> Action {
    let n = reference.len() as f64;
    let mut out = [0.0; 7];
    for (d, o) in out.iter_mut().enumerate() {
        let mean = reference.iter().map(|a| a[d]).sum::<f64>() / n;
        let var = reference.iter().map(|a| (a[d] - mean).powi(2)).sum::<f64>() / n;
        *o = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub accuracy: f64,
    pub deployable: bool,
}

pub const CLASSIFIER_GATE: f64 = 0.95;

/// Exact-match accuracy; deployable only strictly above `threshold`.
pub fn classifier_gate<T: PartialEq>(predictions: &[T], labels: &[T], threshold: f64) -> Result<GateResult, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { left: predictions.len(), right: labels.len() });
    }
    if predictions.is_empty() {
        return Err(MetricsError::TooFew { min: 1, got: 0 });
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / predictions.len() as f64;
    Ok(GateResult { accuracy, deployable: accuracy > threshold })
}
