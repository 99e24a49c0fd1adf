//! Workspace boundary, joint-effort monitoring and the human-intervention
//! channel (ticket store plus at-least-once webhook delivery).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, watch};
use tokio_util::sync::CancellationToken;

use crate::model::{CellId, InterventionReason, InterventionTicket, JobId, TicketId};

/// Header carrying the ticket id on every webhook delivery attempt.
pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceBounds {
    pub min_xyz: [f64; 3],
    pub max_xyz: [f64; 3],
    pub effort_limit: [f64; 6],
}

impl Default for WorkspaceBounds {
    fn default() -> Self {
        Self {
            min_xyz: [0.15, -0.20, 0.0],
            max_xyz: [0.45, 0.20, 0.25],
            effort_limit: [2.0; 6],
        }
    }
}

impl WorkspaceBounds {
    pub fn validate(&self) -> Result<(), String> {
        for i in 0..3 {
            if !(self.min_xyz[i].is_finite() && self.max_xyz[i].is_finite() && self.min_xyz[i] < self.max_xyz[i]) {
                return Err(format!("workspace_bounds: min_xyz[{i}] must be below max_xyz[{i}]"));
            }
        }
        if let Some(j) = self.effort_limit.iter().position(|l| !(*l > 0.0)) {
            return Err(format!("workspace_bounds: effort_limit[{j}] must be positive"));
        }
        Ok(())
    }
}

/// Componentwise clamp; the flag is set iff any component moved.
pub fn clamp_to_workspace(pose: [f64; 3], bounds: &WorkspaceBounds) -> ([f64; 3], bool) {
    let mut out = pose;
    let mut clamped = false;
    for i in 0..3 {
        let c = pose[i].clamp(bounds.min_xyz[i], bounds.max_xyz[i]);
        if c != pose[i] {
            clamped = true;
        }
        out[i] = c;
    }
    (out, clamped)
}

/// Joint indices whose effort magnitude strictly exceeds its limit.
pub fn check_efforts(efforts: &[f64; 6], bounds: &WorkspaceBounds) -> Vec<usize> {
    efforts
        .iter()
        .zip(bounds.effort_limit.iter())
        .enumerate()
        .filter(|(_, (e, limit))| e.abs() > **limit)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NotificationConfig {
    pub webhook_url: String,
    /// Delays between retries; the last entry repeats.
    #[serde(default = "NotificationConfig::default_backoff")]
    pub retry_backoff_ms: Vec<u64>,
    /// How long a receiver should remember idempotency keys.
    #[serde(default = "NotificationConfig::default_window")]
    pub idempotency_window_s: u64,
    /// Base URL used to build `resume_url` in payloads.
    #[serde(default)]
    pub resume_url_base: Option<String>,
    #[serde(default = "NotificationConfig::default_timeout")]
    pub request_timeout_ms: u64,
}

impl NotificationConfig {
    fn default_backoff() -> Vec<u64> {
        vec![500, 2_000, 10_000]
    }
    fn default_window() -> u64 {
        86_400
    }
    fn default_timeout() -> u64 {
        5_000
    }

    pub fn new(webhook_url: impl Into<String>) -> Self {
        Self {
            webhook_url: webhook_url.into(),
            retry_backoff_ms: Self::default_backoff(),
            idempotency_window_s: Self::default_window(),
            resume_url_base: None,
            request_timeout_ms: Self::default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.retry_backoff_ms.is_empty() {
            return Err("notifications.retry_backoff_ms: at least one entry required".into());
        }
        if !self.webhook_url.starts_with("http://") && !self.webhook_url.starts_with("https://") {
            return Err(format!("notifications.webhook_url: not an http(s) URL: {}", self.webhook_url));
        }
        Ok(())
    }

    fn backoff(&self, retry: usize) -> Duration {
        let idx = retry.min(self.retry_backoff_ms.len().saturating_sub(1));
        Duration::from_millis(self.retry_backoff_ms.get(idx).copied().unwrap_or(1_000))
    }
}

/// Body of an intervention webhook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotificationPayload {
    pub ticket_id: TicketId,
    pub cell_id: CellId,
    pub reason: InterventionReason,
    pub job_id: Option<JobId>,
    pub timestamp: f64,
    pub resume_url: String,
}

#[derive(Debug, thiserror::Error)]
pub enum SafetyError {
    /// The ticket is persisted and delivery continues in the background.
    #[error("notification webhook unreachable for ticket {}", ticket.ticket_id)]
    NotifierUnreachable { ticket: InterventionTicket },
    #[error("unknown ticket {0}")]
    UnknownTicket(TicketId),
    #[error("ticket {0} already resolved")]
    AlreadyResolved(TicketId),
    #[error("cell {0} has no unresolved ticket")]
    NoUnresolvedTicket(CellId),
}

impl SafetyError {
    /// The ticket carried by a raise that still persisted one.
    pub fn into_ticket(self) -> Option<InterventionTicket> {
        match self {
            SafetyError::NotifierUnreachable { ticket } => Some(ticket),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitOutcome {
    Resolved,
    Canceled,
}

#[derive(Debug, Default)]
struct TicketStore {
    tickets: BTreeMap<TicketId, InterventionTicket>,
    unresolved_by_cell: HashMap<CellId, TicketId>,
    next: u64,
}

struct Notifier {
    config: NotificationConfig,
    http: reqwest::Client,
}

impl Notifier {
    async fn deliver(&self, payload: &NotificationPayload) -> bool {
        let result = self
            .http
            .post(&self.config.webhook_url)
            .header(IDEMPOTENCY_HEADER, payload.ticket_id.as_str())
            .timeout(Duration::from_millis(self.config.request_timeout_ms))
            .json(payload)
            .send()
            .await;
        match result {
            Ok(resp) => resp.status().is_success(),
            Err(err) => {
                tracing::debug!(%err, "webhook delivery failed");
                false
            }
        }
    }
}

/// Ticket store with per-cell deduplication and the notification channel.
/// Cheap to clone; clones share state.
#[derive(Clone)]
pub struct SafetyMonitor {
    store: Arc<Mutex<TicketStore>>,
    notifier: Option<Arc<Notifier>>,
    raised: broadcast::Sender<InterventionTicket>,
    resolutions: Arc<watch::Sender<u64>>,
}

impl SafetyMonitor {
    /// Without a notification config tickets are only logged.
    pub fn new(notifications: Option<NotificationConfig>) -> Self {
        let (raised, _) = broadcast::channel(64);
        let (resolutions, _) = watch::channel(0);
        Self {
            store: Arc::new(Mutex::new(TicketStore::default())),
            notifier: notifications.map(|config| {
                Arc::new(Notifier { config, http: reqwest::Client::new() })
            }),
            raised,
            resolutions: Arc::new(resolutions),
        }
    }

    /// Stream of newly raised tickets (deduplicated raises are not repeated).
    pub fn subscribe(&self) -> broadcast::Receiver<InterventionTicket> {
        self.raised.subscribe()
    }

    pub fn tickets(&self) -> Vec<InterventionTicket> {
        self.store.lock().tickets.values().cloned().collect()
    }

    pub fn ticket(&self, id: &TicketId) -> Option<InterventionTicket> {
        self.store.lock().tickets.get(id).cloned()
    }

    pub fn unresolved_for(&self, cell: &CellId) -> Option<InterventionTicket> {
        let store = self.store.lock();
        store.unresolved_by_cell.get(cell).and_then(|id| store.tickets.get(id)).cloned()
    }

    /// Persist a ticket for `cell_id` (or return the unresolved one it
    /// already has) and notify the on-call operator.
    pub async fn raise_intervention(
        &self,
        cell_id: &CellId,
        reason: InterventionReason,
        job_id: Option<&JobId>,
        now: f64,
    ) -> Result<InterventionTicket, SafetyError> {
        let ticket = {
            let mut store = self.store.lock();
            if let Some(existing) = store.unresolved_by_cell.get(cell_id) {
                return Ok(store.tickets[existing].clone());
            }
            store.next += 1;
            let ticket = InterventionTicket {
                ticket_id: TicketId(format!("ticket-{}-{:04}", cell_id, store.next)),
                cell_id: cell_id.clone(),
                job_id: job_id.cloned(),
                reason,
                raised_at: now,
                resolved_at: None,
                notification_delivery_count: 0,
                notification_acknowledged: false,
            };
            store.unresolved_by_cell.insert(cell_id.clone(), ticket.ticket_id.clone());
            store.tickets.insert(ticket.ticket_id.clone(), ticket.clone());
            ticket
        };
        tracing::warn!(ticket = %ticket.ticket_id, cell = %cell_id, ?reason, "intervention requested");
        let _ = self.raised.send(ticket.clone());

        let Some(notifier) = self.notifier.clone() else {
            return Ok(self.record_attempt(&ticket.ticket_id, true));
        };
        let payload = NotificationPayload {
            ticket_id: ticket.ticket_id.clone(),
            cell_id: cell_id.clone(),
            reason,
            job_id: job_id.cloned(),
            timestamp: now,
            resume_url: format!(
                "{}/api/cells/{}/resume",
                notifier.config.resume_url_base.as_deref().unwrap_or("").trim_end_matches('/'),
                cell_id
            ),
        };
        let delivered = notifier.deliver(&payload).await;
        let snapshot = self.record_attempt(&ticket.ticket_id, delivered);
        if delivered {
            return Ok(snapshot);
        }

        let monitor = self.clone();
        tokio::spawn(async move {
            let mut retry = 0usize;
            loop {
                tokio::time::sleep(notifier.config.backoff(retry)).await;
                retry += 1;
                if monitor.ticket(&payload.ticket_id).is_none_or(|t| t.is_resolved()) {
                    break;
                }
                let ok = notifier.deliver(&payload).await;
                monitor.record_attempt(&payload.ticket_id, ok);
                if ok {
                    break;
                }
            }
        });
        Err(SafetyError::NotifierUnreachable { ticket: snapshot })
    }

    fn record_attempt(&self, id: &TicketId, acknowledged: bool) -> InterventionTicket {
        let mut store = self.store.lock();
        let ticket = store.tickets.get_mut(id).expect("ticket exists");
        ticket.notification_delivery_count += 1;
        ticket.notification_acknowledged |= acknowledged;
        ticket.clone()
    }

    pub fn resolve_intervention(&self, id: &TicketId, now: f64) -> Result<InterventionTicket, SafetyError> {
        let resolved = {
            let mut store = self.store.lock();
            let ticket = store.tickets.get_mut(id).ok_or_else(|| SafetyError::UnknownTicket(id.clone()))?;
            if ticket.is_resolved() {
                return Err(SafetyError::AlreadyResolved(id.clone()));
            }
            ticket.resolved_at = Some(now.max(ticket.raised_at));
            let ticket = ticket.clone();
            store.unresolved_by_cell.remove(&ticket.cell_id);
            ticket
        };
        self.resolutions.send_modify(|gen| *gen += 1);
        Ok(resolved)
    }

    /// Resolve whatever ticket is open on `cell`.
    pub fn resolve_cell(&self, cell: &CellId, now: f64) -> Result<InterventionTicket, SafetyError> {
        let id = self
            .unresolved_for(cell)
            .map(|t| t.ticket_id)
            .ok_or_else(|| SafetyError::NoUnresolvedTicket(cell.clone()))?;
        self.resolve_intervention(&id, now)
    }

    /// Park until the ticket is resolved or `cancel` fires.
    pub async fn wait_resolved(&self, id: &TicketId, cancel: &CancellationToken) -> WaitOutcome {
        let mut rx = self.resolutions.subscribe();
        loop {
            if self.ticket(id).is_none_or(|t| t.is_resolved()) {
                return WaitOutcome::Resolved;
            }
            tokio::select! {
                _ = cancel.cancelled() => return WaitOutcome::Canceled,
                changed = rx.changed() => {
                    if changed.is_err() {
                        return WaitOutcome::Canceled;
                    }
                }
            }
        }
    }
}

/// Receiver-side deduplication of webhook deliveries by idempotency key.
#[derive(Debug, Clone)]
pub struct IdempotentReceiver {
    window_s: f64,
    seen: HashMap<String, f64>,
}

impl IdempotentReceiver {
    pub fn new(window_s: u64) -> Self {
        Self { window_s: window_s as f64, seen: HashMap::new() }
    }

    /// True the first time `key` is seen within the window.
    pub fn accept(&mut self, key: &str, now: f64) -> bool {
        let window = self.window_s;
        self.seen.retain(|_, t| now - *t < window);
        if self.seen.contains_key(key) {
            return false;
        }
        self.seen.insert(key.to_owned(), now);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bounds() -> WorkspaceBounds {
        WorkspaceBounds {
            min_xyz: [0.0, -1.0, 0.0],
            max_xyz: [1.0, 1.0, 0.5],
            effort_limit: [2.0; 6],
        }
    }

    #[test]
    fn pose_inside_is_untouched() {
        assert_eq!(clamp_to_workspace([0.5, 0.0, 0.2], &bounds()), ([0.5, 0.0, 0.2], false));
    }

    #[test]
    fn x_above_max_is_clamped() {
        assert_eq!(clamp_to_workspace([1.3, 0.0, 0.2], &bounds()), ([1.0, 0.0, 0.2], true));
    }

    #[test]
    fn all_below_min_lands_on_min() {
        assert_eq!(clamp_to_workspace([-1.0, -2.0, -0.1], &bounds()), ([0.0, -1.0, 0.0], true));
    }

    #[test]
    fn efforts_use_strict_inequality() {
        let b = bounds();
        assert!(check_efforts(&[0.1; 6], &b).is_empty());
        assert_eq!(check_efforts(&[0.0, 0.0, 0.0, 3.0, 0.0, 0.0], &b), vec![3]);
        assert!(check_efforts(&[2.0, -2.0, 2.0, 2.0, 2.0, 2.0], &b).is_empty());
        assert_eq!(check_efforts(&[0.0, -2.5, 0.0, 0.0, 0.0, 0.0], &b), vec![1]);
    }

    #[test]
    fn receiver_dedups_within_window() {
        let mut rx = IdempotentReceiver::new(60);
        assert!(rx.accept("t1", 0.0));
        assert!(!rx.accept("t1", 30.0));
        assert!(rx.accept("t2", 30.0));
        assert!(rx.accept("t1", 61.0));
    }

    #[tokio::test]
    async fn second_raise_returns_same_ticket() {
        let monitor = SafetyMonitor::new(None);
        let cell = CellId::from("drawer");
        let a = monitor.raise_intervention(&cell, InterventionReason::ResetExhausted, None, 1.0).await.unwrap();
        let b = monitor.raise_intervention(&cell, InterventionReason::MotorRebootExhausted, None, 2.0).await.unwrap();
        assert_eq!(a.ticket_id, b.ticket_id);
        assert_eq!(b.reason, InterventionReason::ResetExhausted);
        assert_eq!(monitor.tickets().len(), 1);
    }

    #[tokio::test]
    async fn resolve_twice_is_rejected() {
        let monitor = SafetyMonitor::new(None);
        let cell = CellId::from("sink");
        let t = monitor.raise_intervention(&cell, InterventionReason::ResetExhausted, None, 5.0).await.unwrap();
        let r = monitor.resolve_intervention(&t.ticket_id, 9.0).unwrap();
        assert_eq!(r.resolved_at, Some(9.0));
        assert!(matches!(monitor.resolve_intervention(&t.ticket_id, 10.0), Err(SafetyError::AlreadyResolved(_))));
        assert!(matches!(
            monitor.resolve_intervention(&TicketId::from("nope"), 10.0),
            Err(SafetyError::UnknownTicket(_))
        ));
        assert!(monitor.unresolved_for(&cell).is_none());
    }

    #[tokio::test]
    async fn waiter_wakes_on_resolution() {
        let monitor = SafetyMonitor::new(None);
        let cell = CellId::from("cloth");
        let t = monitor.raise_intervention(&cell, InterventionReason::InvalidStateDetected, None, 0.0).await.unwrap();
        let cancel = CancellationToken::new();
        let waiter = {
            let monitor = monitor.clone();
            let id = t.ticket_id.clone();
            tokio::spawn(async move { monitor.wait_resolved(&id, &cancel).await })
        };
        tokio::time::sleep(Duration::from_millis(20)).await;
        monitor.resolve_cell(&cell, 1.0).unwrap();
        assert_eq!(waiter.await.unwrap(), WaitOutcome::Resolved);
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0) {
            let b = bounds();
            let (once, _) = clamp_to_workspace([x, y, z], &b);
            let (twice, moved) = clamp_to_workspace(once, &b);
            prop_assert_eq!(once, twice);
            prop_assert!(!moved);
        }

        #[test]
        fn at_most_one_open_ticket_per_cell(ops in proptest::collection::vec((0usize..3, any::<bool>()), 1..40)) {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            rt.block_on(async {
                let monitor = SafetyMonitor::new(None);
                let cells: Vec<CellId> = ["a", "b", "c"].iter().map(|c| CellId::from(*c)).collect();
                for (i, (cell, raise)) in ops.iter().enumerate() {
                    if *raise {
                        monitor.raise_intervention(&cells[*cell], InterventionReason::ResetExhausted, None, i as f64).await.unwrap();
                    } else {
                        let _ = monitor.resolve_cell(&cells[*cell], i as f64);
                    }
                    for c in &cells {
                        let open = monitor.tickets().iter().filter(|t| &t.cell_id == c && !t.is_resolved()).count();
                        assert!(open <= 1);
                    }
                }
            });
        }
    }
}
