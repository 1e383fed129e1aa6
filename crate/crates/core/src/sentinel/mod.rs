//! Monitoring: issue classification, dosage and probability checks, the
//! memory watchdog, alerts, the documentation ledger and consistency audits.

pub mod alerts;
pub mod audit;
pub mod codes;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use codes::{severity_of, IssueCode, Severity};

use crate::clock::Timestamp;
use crate::decision::{ProfileKind, RhoParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// The decision service.
    Rl,
    /// The backend controller.
    Backend,
    /// External data sources behind the controller.
    External,
    /// The decision service's database.
    Store,
    App,
    Monitor,
    Operator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FallbackKind {
    /// Oralytics: the app kept using its most recent schedule.
    CachedSchedule,
    /// Oralytics: a probability-0.5 schedule replaced personalization.
    NonPersonalizedSchedule,
    /// Data point stored but kept out of updates.
    DataExclusion,
    /// The controller assigned treatment with probability 0.5.
    ControllerHalf,
    /// The update failed and the previous policy stayed in force.
    PreviousPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DecisionPointRef {
    pub participant_id: String,
    pub decision_t: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueEvent {
    pub issue_id: u64,
    pub code: IssueCode,
    pub severity: Severity,
    pub profile: ProfileKind,
    pub participants: Vec<String>,
    pub decision_points: Vec<DecisionPointRef>,
    pub tick: u32,
    pub timestamp: Timestamp,
    pub message: String,
    pub fallback_executed: Option<FallbackKind>,
    pub component: Component,
    /// Injection ids of the faults that caused this issue, if any.
    pub fault_refs: Vec<u64>,
}

/// Something a component observed, before classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawKind {
    FetchFailed,
    FetchUnparseable,
    FetchMalformed,
    FetchEmpty,
    FetchDuplicate,
    RlUnavailable,
    ContextReadFailed,
    SaveFailed,
    UpdateFailed,
    MemoryThreshold,
    BlankSchedule,
    RosterMismatch,
    ActionNotFound,
    DosageNone,
    DosageAll,
    PopulationNone,
    PopulationAll,
    ProbabilityOutOfBounds,
    VarianceClamped,
    DuplicateRegistration,
    InvalidStartDate,
    InvalidEndDate,
    AuthTokenMalformed,
    AuthTokenMissing,
    AuthTokenInvalid,
    AuditDiscrepancy,
    AlertBuffered,
    Restart,
    Control,
    Roster,
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub kind: RawKind,
    pub participant: Option<String>,
    pub decision_t: Option<u32>,
    pub detail: String,
    pub fallback: Option<FallbackKind>,
    pub fault_ref: Option<u64>,
}

impl RawEvent {
    pub fn new(kind: RawKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            participant: None,
            decision_t: None,
            detail: detail.into(),
            fallback: None,
            fault_ref: None,
        }
    }

    pub fn participant(mut self, p: impl Into<String>) -> Self {
        self.participant = Some(p.into());
        self
    }

    pub fn at(mut self, decision_t: u32) -> Self {
        self.decision_t = Some(decision_t);
        self
    }

    pub fn fallback(mut self, f: FallbackKind) -> Self {
        self.fallback = Some(f);
        self
    }

    pub fn fault(mut self, id: Option<u64>) -> Self {
        self.fault_ref = id;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub code: IssueCode,
    pub severity: Severity,
    pub component: Component,
}

/// Deterministic (code, severity, component) for a raw event.
pub fn classify(profile: ProfileKind, kind: &RawKind) -> Classification {
    use ProfileKind::{Miwaves as M, Oralytics as O};
    use RawKind::*;
    let (code, component) = match (kind, profile) {
        (FetchFailed, O) => ("Y1", Component::External),
        (FetchFailed, M) => ("316", Component::Backend),
        (FetchUnparseable, O) => ("Y2", Component::External),
        (FetchUnparseable, M) => ("320", Component::Backend),
        (FetchMalformed, O) => ("Y3", Component::External),
        (FetchMalformed, M) => ("202", Component::Backend),
        (FetchEmpty, O) => ("Y4", Component::External),
        (FetchEmpty, M) => ("317", Component::Backend),
        (FetchDuplicate, O) => ("Y3", Component::External),
        (FetchDuplicate, M) => ("318", Component::Backend),
        (RlUnavailable, O) => ("Y1", Component::Rl),
        (RlUnavailable, M) => ("207", Component::Rl),
        (ContextReadFailed, O) => ("Y5", Component::Store),
        (ContextReadFailed, M) => ("206", Component::Store),
        (SaveFailed, O) => ("R3", Component::Store),
        (SaveFailed, M) => ("321", Component::Store),
        (UpdateFailed, O) => ("Y6", Component::Rl),
        (UpdateFailed, M) => ("402", Component::Rl),
        (MemoryThreshold, _) => ("MEM", Component::Rl),
        (BlankSchedule, _) => ("G-BLANK", Component::App),
        (RosterMismatch, _) => ("RD", Component::Backend),
        (ActionNotFound, M) => ("319", Component::Rl),
        (DosageNone, O) => ("R1", Component::Monitor),
        (DosageAll, O) => ("R2", Component::Monitor),
        (DosageAll, M) => ("R3", Component::Monitor),
        (DosageNone, M) => ("R4", Component::Monitor),
        (PopulationNone, M) => ("R1", Component::Monitor),
        (PopulationAll, M) => ("R2", Component::Monitor),
        (ProbabilityOutOfBounds, _) => ("R5", Component::Rl),
        (VarianceClamped, _) => ("NUM", Component::Rl),
        (DuplicateRegistration, M) => ("108", Component::Rl),
        (InvalidStartDate, M) => ("101", Component::Rl),
        (InvalidEndDate, M) => ("102", Component::Rl),
        (AuthTokenMalformed, M) => ("0", Component::Rl),
        (AuthTokenMissing, M) => ("1", Component::Rl),
        (AuthTokenInvalid, M) => ("2", Component::Rl),
        (AuditDiscrepancy, _) => ("G-AUDIT", Component::Monitor),
        (AlertBuffered, _) => ("G-ALERTBUF", Component::Monitor),
        (Restart, _) => ("G-RESTART", Component::Operator),
        (Control, _) => ("G-CONTROL", Component::Operator),
        (Roster, _) => ("G-REGISTER", Component::Backend),
        _ => ("UNK", Component::Monitor),
    };
    Classification {
        code: IssueCode::new(code),
        severity: severity_of(profile, code),
        component,
    }
}

/// Groups one tick's raw events into issues: one event per code, listing
/// every participant and decision point affected.
pub fn group_events(
    profile: ProfileKind,
    raws: &[RawEvent],
    tick: u32,
    timestamp: Timestamp,
    mut next_id: impl FnMut() -> u64,
) -> Vec<IssueEvent> {
    let mut by_code: BTreeMap<IssueCode, Vec<(&RawEvent, Classification)>> = BTreeMap::new();
    for raw in raws {
        let cls = classify(profile, &raw.kind);
        by_code.entry(cls.code.clone()).or_default().push((raw, cls));
    }
    let mut out = Vec::with_capacity(by_code.len());
    for (code, items) in by_code {
        let first = &items[0];
        let participants: BTreeSet<String> = items.iter().filter_map(|(r, _)| r.participant.clone()).collect();
        let decision_points: BTreeSet<DecisionPointRef> = items
            .iter()
            .filter_map(|(r, _)| {
                Some(DecisionPointRef {
                    participant_id: r.participant.clone()?,
                    decision_t: r.decision_t?,
                })
            })
            .collect();
        let fault_refs: BTreeSet<u64> = items.iter().filter_map(|(r, _)| r.fault_ref).collect();
        let mut details: Vec<&str> = items.iter().map(|(r, _)| r.detail.as_str()).collect();
        details.dedup();
        let message = if details.len() > 3 {
            format!("{} (+{} more)", details[..3].join("; "), details.len() - 3)
        } else {
            details.join("; ")
        };
        out.push(IssueEvent {
            issue_id: next_id(),
            severity: first.1.severity,
            component: first.1.component,
            code,
            profile,
            participants: participants.into_iter().collect(),
            decision_points: decision_points.into_iter().collect(),
            tick,
            timestamp,
            message,
            fallback_executed: items.iter().find_map(|(r, _)| r.fallback),
            fault_refs: fault_refs.into_iter().collect(),
        });
    }
    out
}

/// Number of decision points in a 7-day dosage window.
pub const DOSAGE_WINDOW: usize = 14;

/// Strictly more than 80% of `n`, in exact integer arithmetic.
pub fn more_than_80_percent(count: usize, n: usize) -> bool {
    count * 5 > n * 4
}

/// Dosage rule for one participant's last 14 actions, if any fires.
pub fn dosage_rule(profile: ProfileKind, actions: &[u8]) -> Option<RawKind> {
    if actions.len() < DOSAGE_WINDOW {
        return None;
    }
    let window = &actions[actions.len() - DOSAGE_WINDOW..];
    let ones = window.iter().filter(|a| **a == 1).count();
    let zeros = DOSAGE_WINDOW - ones;
    match profile {
        ProfileKind::Oralytics if zeros == DOSAGE_WINDOW => Some(RawKind::DosageNone),
        ProfileKind::Oralytics if ones == DOSAGE_WINDOW => Some(RawKind::DosageAll),
        ProfileKind::Miwaves if more_than_80_percent(ones, DOSAGE_WINDOW) => Some(RawKind::DosageAll),
        ProfileKind::Miwaves if more_than_80_percent(zeros, DOSAGE_WINDOW) => Some(RawKind::DosageNone),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DosageFinding {
    pub code: IssueCode,
    pub participant: Option<String>,
}

/// Per-participant dosage scan over action histories (oldest first).
/// Participants with fewer than 14 decision points are skipped.
pub fn scan_dosage(profile: ProfileKind, histories: &BTreeMap<String, Vec<u8>>) -> Vec<DosageFinding> {
    histories
        .iter()
        .filter_map(|(pid, actions)| {
            dosage_rule(profile, actions).map(|kind| DosageFinding {
                code: classify(profile, &kind).code,
                participant: Some(pid.clone()),
            })
        })
        .collect()
}

/// MiWaves population rule at one decision point.
pub fn population_rule(actions: &[u8], min_active: usize) -> Option<RawKind> {
    let n = actions.len();
    if n == 0 || n < min_active {
        return None;
    }
    let ones = actions.iter().filter(|a| **a == 1).count();
    if more_than_80_percent(ones, n) {
        Some(RawKind::PopulationAll)
    } else if more_than_80_percent(n - ones, n) {
        Some(RawKind::PopulationNone)
    } else {
        None
    }
}

/// True when a probability violates the clipping bounds (boundaries pass).
pub fn check_probability_bounds(prob: f64, rho: &RhoParams) -> bool {
    !(prob >= rho.l_min && prob <= rho.l_max)
}

/// Edge-triggered threshold monitor for host memory usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryWatchdog {
    pub threshold: f64,
    above: bool,
}

impl MemoryWatchdog {
    pub fn new(threshold: f64) -> Self {
        Self { threshold, above: false }
    }

    /// Returns true once per upward crossing.
    pub fn sample(&mut self, usage: f64) -> bool {
        let over = usage > self.threshold;
        let fire = over && !self.above;
        self.above = over;
        fire
    }
}

/// Fires a dosage rule once when it starts holding for a participant and
/// re-arms when it stops.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DosageTracker {
    active: BTreeSet<(String, String)>,
}

impl DosageTracker {
    pub fn observe(&mut self, key: &str, finding: Option<&IssueCode>) -> bool {
        let existing: Vec<(String, String)> = self.active.iter().filter(|(k, _)| k == key).cloned().collect();
        match finding {
            Some(code) => {
                let entry = (key.to_string(), code.0.clone());
                let fresh = !self.active.contains(&entry);
                for e in existing.into_iter().filter(|e| *e != entry) {
                    self.active.remove(&e);
                }
                self.active.insert(entry);
                fresh
            }
            None => {
                for e in existing {
                    self.active.remove(&e);
                }
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(ones: usize) -> Vec<u8> {
        let mut v = vec![1; ones];
        v.extend(vec![0; DOSAGE_WINDOW - ones]);
        v
    }

    #[test]
    fn miwaves_threshold_is_strict() {
        assert_eq!(dosage_rule(ProfileKind::Miwaves, &series(12)), Some(RawKind::DosageAll));
        assert_eq!(dosage_rule(ProfileKind::Miwaves, &series(11)), None);
        assert_eq!(dosage_rule(ProfileKind::Miwaves, &series(2)), Some(RawKind::DosageNone));
        assert_eq!(dosage_rule(ProfileKind::Miwaves, &series(3)), None);
    }

    #[test]
    fn oralytics_requires_uniform_window() {
        assert_eq!(dosage_rule(ProfileKind::Oralytics, &series(14)), Some(RawKind::DosageAll));
        assert_eq!(dosage_rule(ProfileKind::Oralytics, &series(0)), Some(RawKind::DosageNone));
        assert_eq!(dosage_rule(ProfileKind::Oralytics, &series(13)), None);
        assert_eq!(dosage_rule(ProfileKind::Oralytics, &series(1)), None);
        assert_eq!(dosage_rule(ProfileKind::Oralytics, &[1; 13]), None);
    }

    #[test]
    fn only_last_window_counts() {
        let mut v = vec![0; 30];
        v.extend(vec![1; 14]);
        assert_eq!(dosage_rule(ProfileKind::Oralytics, &v), Some(RawKind::DosageAll));
    }

    #[test]
    fn population_rule_needs_minimum() {
        assert_eq!(population_rule(&[1, 1, 1, 1], 5), None);
        assert_eq!(population_rule(&[1, 1, 1, 1, 1], 5), Some(RawKind::PopulationAll));
        assert_eq!(population_rule(&[1, 1, 1, 1, 0], 5), None);
        assert_eq!(population_rule(&[0; 10], 5), Some(RawKind::PopulationNone));
    }

    #[test]
    fn probability_bounds_inclusive() {
        let rho = RhoParams::default();
        assert!(!check_probability_bounds(0.8, &rho));
        assert!(!check_probability_bounds(0.2, &rho));
        assert!(!check_probability_bounds(0.5, &rho));
        assert!(check_probability_bounds(0.85, &rho));
        assert!(check_probability_bounds(0.19, &rho));
        assert!(check_probability_bounds(f64::NAN, &rho));
    }

    #[test]
    fn watchdog_is_edge_triggered() {
        let mut w = MemoryWatchdog::new(0.9);
        assert!(!w.sample(0.89));
        assert!(w.sample(0.91));
        for _ in 0..5 {
            assert!(!w.sample(0.95));
        }
        assert!(!w.sample(0.5));
        assert!(w.sample(0.93));
    }

    #[test]
    fn classify_examples() {
        let c = classify(ProfileKind::Oralytics, &RawKind::SaveFailed);
        assert_eq!((c.code.as_str(), c.severity), ("R3", Severity::Red));
        let c = classify(ProfileKind::Oralytics, &RawKind::FetchFailed);
        assert_eq!((c.code.as_str(), c.severity), ("Y1", Severity::Yellow));
        let c = classify(ProfileKind::Miwaves, &RawKind::AuthTokenMissing);
        assert_eq!((c.code.as_str(), c.severity), ("1", Severity::Yellow));
        let c = classify(ProfileKind::Oralytics, &RawKind::Other("???".into()));
        assert_eq!((c.code.as_str(), c.severity), ("UNK", Severity::Yellow));
    }

    #[test]
    fn grouping_merges_per_code() {
        let ts = Timestamp::parse("2024-01-01 08:00:00").unwrap();
        let raws = vec![
            RawEvent::new(RawKind::FetchFailed, "a").participant("P001").at(3).fault(Some(1)),
            RawEvent::new(RawKind::FetchFailed, "b").participant("P002").at(3).fault(Some(2)),
            RawEvent::new(RawKind::SaveFailed, "c").participant("P002").at(4),
        ];
        let mut id = 0;
        let events = group_events(ProfileKind::Oralytics, &raws, 7, ts, || {
            id += 1;
            id
        });
        assert_eq!(events.len(), 2);
        let y1 = events.iter().find(|e| e.code.as_str() == "Y1").unwrap();
        assert_eq!(y1.participants, vec!["P001", "P002"]);
        assert_eq!(y1.fault_refs, vec![1, 2]);
        assert_eq!(y1.decision_points.len(), 2);
    }

    #[test]
    fn dosage_tracker_edges() {
        let mut t = DosageTracker::default();
        let r3 = IssueCode::new("R3");
        assert!(t.observe("P1", Some(&r3)));
        assert!(!t.observe("P1", Some(&r3)));
        assert!(!t.observe("P1", None));
        assert!(t.observe("P1", Some(&r3)));
    }
}
