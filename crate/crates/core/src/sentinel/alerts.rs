//! Alert records, sinks and the green documentation ledger.

use std::collections::VecDeque;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Component, FallbackKind, IssueCode, IssueEvent, Severity};
use crate::clock::Timestamp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertRoute {
    Sink,
    /// Manual-red mode: staff review the issue from the dashboard queue.
    DashboardQueue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: u64,
    pub issue_id: u64,
    pub code: IssueCode,
    pub severity: Severity,
    pub urgent: bool,
    /// Detection time of the issue; kept unchanged through retries.
    pub created_at: Timestamp,
    pub tick: u32,
    pub participants: Vec<String>,
    pub message: String,
    pub route: AlertRoute,
}

impl Alert {
    pub fn for_issue(alert_id: u64, issue: &IssueEvent, route: AlertRoute) -> Option<Self> {
        issue.severity.alerts().then(|| Alert {
            alert_id,
            issue_id: issue.issue_id,
            code: issue.code.clone(),
            severity: issue.severity,
            urgent: issue.severity == Severity::Red,
            created_at: issue.timestamp,
            tick: issue.tick,
            participants: issue.participants.clone(),
            message: issue.message.clone(),
            route,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub entry_id: u64,
    pub issue_id: u64,
    pub code: IssueCode,
    pub severity: Severity,
    pub detected_at: Timestamp,
    pub resolved_at: Option<Timestamp>,
    pub acknowledged: bool,
    pub participants: Vec<String>,
    pub participant_count: usize,
    pub decision_point_count: usize,
    pub fallback: Option<FallbackKind>,
    pub note: String,
    pub component: Component,
}

impl LedgerEntry {
    pub fn for_issue(entry_id: u64, issue: &IssueEvent) -> Self {
        LedgerEntry {
            entry_id,
            issue_id: issue.issue_id,
            code: issue.code.clone(),
            severity: issue.severity,
            detected_at: issue.timestamp,
            resolved_at: None,
            acknowledged: false,
            participants: issue.participants.clone(),
            participant_count: issue.participants.len(),
            decision_point_count: issue.decision_points.len(),
            fallback: issue.fallback_executed,
            note: issue.message.clone(),
            component: issue.component,
        }
    }
}

pub trait AlertSink: Send {
    fn deliver(&mut self, alert: &Alert) -> Result<()>;
}

/// Writes one JSON file per alert.
pub struct FileSink {
    dir: PathBuf,
}

impl FileSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }
}

impl AlertSink for FileSink {
    fn deliver(&mut self, alert: &Alert) -> Result<()> {
        let name = format!("alert-{:06}-{}.json", alert.alert_id, alert.code);
        fs::write(self.dir.join(name), serde_json::to_vec_pretty(alert)?)?;
        Ok(())
    }
}

/// Collects alerts in memory; the handle can be cloned and inspected.
#[derive(Clone, Default)]
pub struct MemorySink {
    pub delivered: Arc<Mutex<Vec<Alert>>>,
    pub down: Arc<Mutex<bool>>,
}

impl MemorySink {
    pub fn set_down(&self, down: bool) {
        *self.down.lock().expect("sink flag") = down;
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.delivered.lock().expect("sink store").clone()
    }
}

impl AlertSink for MemorySink {
    fn deliver(&mut self, alert: &Alert) -> Result<()> {
        if *self.down.lock().expect("sink flag") {
            return Err(Error::ComponentUnavailable("memory sink is down".into()));
        }
        self.delivered.lock().expect("sink store").push(alert.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DispatchOutcome {
    Delivered,
    Queued,
    /// The sink failed; this alert is the first one buffered since the
    /// last successful delivery.
    Buffered,
    BufferedAgain,
}

/// Delivers alerts in order, buffering everything behind a failure.
pub struct Dispatcher {
    sink: Box<dyn AlertSink>,
    pending: VecDeque<Alert>,
    dashboard: Vec<Alert>,
}

impl Dispatcher {
    pub fn new(sink: Box<dyn AlertSink>) -> Self {
        Self {
            sink,
            pending: VecDeque::new(),
            dashboard: Vec::new(),
        }
    }

    pub fn dispatch(&mut self, alert: Alert) -> DispatchOutcome {
        if alert.route == AlertRoute::DashboardQueue {
            self.dashboard.push(alert);
            return DispatchOutcome::Queued;
        }
        let was_empty = self.pending.is_empty();
        self.pending.push_back(alert);
        if was_empty && self.flush() == 0 {
            return DispatchOutcome::Buffered;
        }
        if self.pending.is_empty() {
            DispatchOutcome::Delivered
        } else if was_empty {
            DispatchOutcome::Buffered
        } else {
            DispatchOutcome::BufferedAgain
        }
    }

    /// Retries buffered alerts; returns how many were delivered.
    pub fn flush(&mut self) -> usize {
        let mut delivered = 0;
        while let Some(alert) = self.pending.front() {
            if self.sink.deliver(alert).is_err() {
                break;
            }
            self.pending.pop_front();
            delivered += 1;
        }
        delivered
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn dashboard_queue(&self) -> &[Alert] {
        &self.dashboard
    }
}
