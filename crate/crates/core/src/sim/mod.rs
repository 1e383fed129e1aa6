//! Backend controller, decision service and environment, advanced one
//! decision slot at a time.
//!
//! A [`Simulation`] is a plain value: cloning it is a snapshot, and the
//! same config, seed and command sequence always produce the same event
//! log. Everything a run writer needs to persist is left in the outbox and
//! the store journal after each [`Simulation::step`].

pub mod config;
pub mod env;
mod miwaves;
mod oralytics;
pub mod records;

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::Serialize;

pub use config::RunConfig;
pub use records::{CommandKind, ControlCommand, DecisionRecord, DecisionSource, EventBody, EventRecord};

use crate::clock::{SimClock, Slot, Timestamp};
use crate::decision::{JointPosteriorState, PosteriorState, ProfileKind, TrialProfile};
use crate::error::{Error, Result};
use crate::faults::{Boundary, FaultEntry, FaultKind, FaultPlan, FaultSource, Interaction, SlotRef};
use crate::schedule::TreatmentSchedule;
use crate::sentinel::alerts::{Alert, AlertRoute, LedgerEntry};
use crate::sentinel::audit::{consistency_audit, Check};
use crate::sentinel::{
    classify, dosage_rule, group_events, Component, DosageTracker, IssueCode, IssueEvent, MemoryWatchdog, RawEvent,
    RawKind, Severity, DOSAGE_WINDOW,
};
use crate::store::schema::{DECISION_RECORDS, INJECTIONS};
use crate::store::Store;
use env::{participant_rng, EnvModel, Stream};

/// Outcome of one [`Simulation::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Advanced,
    Paused,
    Finished,
}

/// Controller-side view of a participant plus the simulated person.
#[derive(Debug, Clone)]
pub struct Participant {
    pub id: String,
    pub index: u32,
    pub entry_day: u32,
    /// Last trial day (inclusive).
    pub last_day: u32,
    pub removed_at: Option<u32>,
    pub removal_reason: Option<String>,
    /// Removal not yet acknowledged by the decision service.
    pub notify_pending: bool,
    pub minute_offset: i64,
    /// Executed actions by decision index.
    pub actions: Vec<u8>,
    pub log: Vec<DecisionRecord>,
    // Oralytics
    /// Truncated quality the decision service received, by decision index.
    pub quality: BTreeMap<u32, f64>,
    pub rewards: BTreeMap<u32, f64>,
    /// App-open flags the decision service received, by day in trial.
    pub app_opened: BTreeMap<u32, u8>,
    pub outcomes: BTreeMap<u32, env::BrushingOutcome>,
    pub app_truth: BTreeMap<u32, u8>,
    pub pending_fetch: Vec<u32>,
    pub cache: Option<TreatmentSchedule>,
    /// Trial day the cached schedule was delivered.
    pub cache_day: Option<u32>,
    // MiWaves, as recorded by the decision service
    pub app_use: BTreeMap<u32, bool>,
    /// Last reported [quantity, frequency]; empty before the first report.
    pub last_cannabis: Vec<f64>,
    pub rl_points: Vec<RlPoint>,
    pub engagement: BTreeMap<u32, env::EngagementOutcome>,
    env: EnvModel,
    decision_rng: ChaCha8Rng,
    controller_rng: ChaCha8Rng,
}

/// A MiWaves observation the decision service holds for the next update.
#[derive(Debug, Clone, PartialEq)]
pub struct RlPoint {
    pub decision_t: u32,
    pub state: crate::decision::MiwavesState,
    pub action: u8,
    pub prob: f64,
    pub reward: f64,
}

impl Participant {
    pub fn active_on(&self, day: u32) -> bool {
        self.removed_at.is_none() && self.entry_day <= day && day <= self.last_day
    }

    pub fn enrolled_on(&self, day: u32) -> bool {
        self.entry_day <= day && day <= self.last_day
    }

    pub fn decision_t(&self, day: u32, slot: Slot) -> u32 {
        2 * (day - self.entry_day) + slot.index()
    }

    pub fn day_in_trial(&self, day: u32) -> u32 {
        day - self.entry_day
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Oralytics(PosteriorState),
    Miwaves(JointPosteriorState),
}

impl Policy {
    pub fn policy_idx(&self) -> u32 {
        match self {
            Policy::Oralytics(p) => p.policy_idx,
            Policy::Miwaves(p) => p.policy_idx,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy_idx: u32,
    pub updated_at: Timestamp,
    pub tick: Option<u32>,
    pub observations: usize,
    pub participants: usize,
    /// Mean of the advantage coefficients (population level for MiWaves).
    pub advantage_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RlService {
    pub up: bool,
    /// Registered, not-removed participants in registration order.
    pub roster: Vec<String>,
    pub policy: Policy,
    pub history: Vec<PolicySummary>,
    pub update_requested: bool,
    /// Oralytics points already written to the Update Data table.
    pub used_points: BTreeSet<(String, u32)>,
}

#[derive(Debug, Clone, Default)]
pub struct Outbox {
    pub events: Vec<EventRecord>,
    pub alerts: Vec<Alert>,
    pub ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, Default)]
struct Ids {
    issue: u64,
    alert: u64,
    entry: u64,
    injection: u64,
    schedule: u64,
    rid: u64,
    seq: u64,
    weights: u64,
    hp_request: u64,
}

fn bump(counter: &mut u64) -> u64 {
    *counter += 1;
    *counter
}

#[derive(Debug, Clone, Serialize)]
pub struct Status {
    pub profile: ProfileKind,
    pub tick: u32,
    pub day: u32,
    pub slot: Slot,
    pub timestamp: Timestamp,
    pub paused: bool,
    pub finished: bool,
    pub rl_up: bool,
    pub policy_idx: u32,
    pub active_participants: usize,
    pub decisions: usize,
    pub open_red: usize,
    pub open_yellow: usize,
    pub memory_usage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleSummary {
    pub schedule_id: u64,
    pub start_t: u32,
    pub personalized: bool,
    pub current_context_until: u32,
    pub modified_context_until: u32,
    pub horizon: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParticipantSummary {
    pub participant_id: String,
    pub entry_day: u32,
    pub last_day: u32,
    pub active: bool,
    pub removed: bool,
    pub decisions: usize,
    pub last_actions: Vec<u8>,
    pub dosage_fraction: Option<f64>,
    pub dosage_code: Option<IssueCode>,
    pub on_fallback: bool,
    pub recent_probs: Vec<f64>,
    pub schedule: Option<ScheduleSummary>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: RunConfig,
    profile: TrialProfile,
    plan: FaultPlan,
    clock: SimClock,
    participants: BTreeMap<String, Participant>,
    order: Vec<String>,
    rl: RlService,
    store: Store,
    excluded: BTreeMap<(String, u32), IssueCode>,
    issues: Vec<IssueEvent>,
    ledger: Vec<LedgerEntry>,
    alerts: Vec<Alert>,
    raws: Vec<RawEvent>,
    dosage: DosageTracker,
    watchdog: MemoryWatchdog,
    commands: Vec<(u64, ControlCommand)>,
    outbox: Outbox,
    ids: Ids,
    audited: BTreeSet<(Check, String, String, u32)>,
    throttle: (u32, u32),
    memory_injections: BTreeMap<usize, u64>,
    pending_desync: BTreeMap<String, u64>,
    update_pending: bool,
    memory_usage: f64,
    paused: bool,
    finished: bool,
    final_tick: u32,
    decisions_total: usize,
}

/// Raw event for a failed data fetch, if the fault is one.
fn fetch_failure(kind: FaultKind) -> Option<RawKind> {
    Some(match kind {
        FaultKind::EndpointFail => RawKind::FetchFailed,
        FaultKind::ResponseUnparseable => RawKind::FetchUnparseable,
        FaultKind::MalformedData => RawKind::FetchMalformed,
        FaultKind::DuplicateData => RawKind::FetchDuplicate,
        FaultKind::EmptyData | FaultKind::TimezoneSkip => RawKind::FetchEmpty,
        _ => return None,
    })
}

pub fn participant_id(index: u32) -> String {
    format!("P{:03}", index + 1)
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.resolve_fault_plan()?;
        Self::with_plan(cfg, plan)
    }

    pub fn with_plan(cfg: RunConfig, plan: FaultPlan) -> Result<Self> {
        cfg.validate()?;
        plan.validate()?;
        let profile = cfg.trial_profile();
        let clock = SimClock::new(cfg.start_date);
        let start = clock.now();
        let mut participants = BTreeMap::new();
        let mut order = Vec::new();
        for i in 0..cfg.participants {
            let id = participant_id(i);
            let p = Self::make_participant(&cfg, &profile, &id, i, i / cfg.entries_per_day);
            order.push(id.clone());
            participants.insert(id, p);
        }
        let policy = match cfg.profile {
            ProfileKind::Oralytics => Policy::Oralytics(PosteriorState::prior(&profile.prior, start)),
            ProfileKind::Miwaves => Policy::Miwaves(JointPosteriorState::prior(
                &profile.prior,
                &[],
                profile.random_effects_cov.as_ref().expect("miwaves profile has Σ_u"),
                start,
            )?),
        };
        let last_day = participants.values().map(|p| p.last_day).max().unwrap_or(0);
        // Oralytics fetches the final evening's data the following morning.
        let final_tick = match cfg.profile {
            ProfileKind::Oralytics => 2 * (last_day + 1),
            ProfileKind::Miwaves => 2 * last_day + 1,
        };
        let mut sim = Simulation {
            watchdog: MemoryWatchdog::new(cfg.thresholds.memory),
            store: Store::new(cfg.profile),
            cfg,
            rl: RlService {
                up: true,
                roster: Vec::new(),
                policy,
                history: Vec::new(),
                update_requested: false,
                used_points: BTreeSet::new(),
            },
            profile,
            plan,
            clock,
            participants,
            order,
            excluded: BTreeMap::new(),
            issues: Vec::new(),
            ledger: Vec::new(),
            alerts: Vec::new(),
            raws: Vec::new(),
            dosage: DosageTracker::default(),
            commands: Vec::new(),
            outbox: Outbox::default(),
            ids: Ids::default(),
            audited: BTreeSet::new(),
            throttle: (u32::MAX, 0),
            memory_injections: BTreeMap::new(),
            pending_desync: BTreeMap::new(),
            update_pending: false,
            memory_usage: 0.0,
            paused: false,
            finished: false,
            final_tick,
            decisions_total: 0,
        };
        sim.record_initial_policy()?;
        Ok(sim)
    }

    fn make_participant(cfg: &RunConfig, profile: &TrialProfile, id: &str, index: u32, entry_day: u32) -> Participant {
        let mut traits = participant_rng(cfg.seed, id, Stream::Controller);
        let minute_offset = traits.random_range(0..60);
        Participant {
            id: id.to_string(),
            index,
            entry_day,
            last_day: entry_day + profile.trial_length_days - 1,
            removed_at: None,
            removal_reason: None,
            notify_pending: false,
            minute_offset,
            actions: Vec::new(),
            log: Vec::new(),
            quality: BTreeMap::new(),
            rewards: BTreeMap::new(),
            app_opened: BTreeMap::new(),
            outcomes: BTreeMap::new(),
            app_truth: BTreeMap::new(),
            pending_fetch: Vec::new(),
            cache: None,
            cache_day: None,
            app_use: BTreeMap::new(),
            last_cannabis: Vec::new(),
            rl_points: Vec::new(),
            engagement: BTreeMap::new(),
            env: EnvModel::new(&cfg.env, cfg.seed, id),
            decision_rng: participant_rng(cfg.seed, id, Stream::Decision),
            controller_rng: traits,
        }
    }

    // ----- accessors -----

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn trial_profile(&self) -> &TrialProfile {
        &self.profile
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Store {
        &mut self.store
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn tick(&self) -> u32 {
        self.clock.tick()
    }

    pub fn final_tick(&self) -> u32 {
        self.final_tick
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn issues(&self) -> &[IssueEvent] {
        &self.issues
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn participants(&self) -> impl Iterator<Item = &Participant> {
        self.order.iter().map(|id| &self.participants[id])
    }

    pub fn participant(&self, id: &str) -> Option<&Participant> {
        self.participants.get(id)
    }

    pub fn rl(&self) -> &RlService {
        &self.rl
    }

    pub fn policies(&self) -> &[PolicySummary] {
        &self.rl.history
    }

    pub fn decisions_total(&self) -> usize {
        self.decisions_total
    }

    /// Decision points kept out of updates, with the code that excluded them.
    pub fn exclusions(&self) -> &BTreeMap<(String, u32), IssueCode> {
        &self.excluded
    }

    pub fn drain_outbox(&mut self) -> Outbox {
        std::mem::take(&mut self.outbox)
    }

    pub fn status(&self) -> Status {
        let day = self.clock.current_day;
        let open = |sev: Severity| {
            self.ledger
                .iter()
                .filter(|e| e.severity == sev && e.resolved_at.is_none())
                .count()
        };
        Status {
            profile: self.cfg.profile,
            tick: self.tick(),
            day,
            slot: self.clock.current_slot,
            timestamp: self.clock.now(),
            paused: self.paused,
            finished: self.finished,
            rl_up: self.rl.up,
            policy_idx: self.rl.policy.policy_idx(),
            active_participants: self.participants.values().filter(|p| p.active_on(day)).count(),
            decisions: self.decisions_total,
            open_red: open(Severity::Red),
            open_yellow: open(Severity::Yellow),
            memory_usage: self.memory_usage,
        }
    }

    pub fn participant_summaries(&self) -> Vec<ParticipantSummary> {
        let day = self.clock.current_day;
        self.participants()
            .map(|p| {
                let n = p.actions.len();
                let last: Vec<u8> = p.actions[n.saturating_sub(DOSAGE_WINDOW)..].to_vec();
                let dosage_fraction =
                    (n >= DOSAGE_WINDOW).then(|| last.iter().filter(|a| **a == 1).count() as f64 / DOSAGE_WINDOW as f64);
                let dosage_code = dosage_rule(self.cfg.profile, &p.actions).map(|k| classify(self.cfg.profile, &k).code);
                let schedule = p.cache.as_ref().map(|s| ScheduleSummary {
                    schedule_id: s.schedule_id,
                    start_t: s.start_t,
                    personalized: s.personalized,
                    current_context_until: s.start_t + crate::schedule::CURRENT_ZONE_LEN - 1,
                    modified_context_until: s.start_t + crate::schedule::MODIFIED_ZONE_END,
                    horizon: s.start_t + s.entries.len() as u32,
                });
                ParticipantSummary {
                    participant_id: p.id.clone(),
                    entry_day: p.entry_day,
                    last_day: p.last_day,
                    active: p.active_on(day),
                    removed: p.removed_at.is_some(),
                    decisions: p.log.len(),
                    last_actions: last,
                    dosage_fraction,
                    dosage_code,
                    on_fallback: p.log.last().is_some_and(|d| {
                        matches!(d.source, DecisionSource::Fallback | DecisionSource::CachedSchedule | DecisionSource::NonPersonalized)
                    }),
                    recent_probs: p.log.iter().rev().take(DOSAGE_WINDOW).rev().map(|d| d.prob).collect(),
                    schedule,
                }
            })
            .collect()
    }

    // ----- running -----

    /// Advances one decision slot.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.finished {
            return Ok(StepOutcome::Finished);
        }
        self.apply_commands();
        if self.paused {
            self.commit_issues();
            return Ok(StepOutcome::Paused);
        }
        let (day, slot) = (self.clock.current_day, self.clock.current_slot);
        self.emit(EventBody::TickStarted { day, slot });
        self.sample_memory();
        match self.cfg.profile {
            ProfileKind::Oralytics => self.oralytics_tick()?,
            ProfileKind::Miwaves => self.miwaves_tick()?,
        }
        if slot == Slot::Evening {
            let settled = match self.cfg.profile {
                // Data for today's points arrives tomorrow morning, later if
                // a fetch was skipped.
                ProfileKind::Oralytics => self
                    .participants
                    .values()
                    .flat_map(|p| p.pending_fetch.iter().map(|t| 2 * p.entry_day + t))
                    .fold(2 * day, u32::min),
                ProfileKind::Miwaves => 2 * day + 2,
            };
            self.audit(settled);
        }
        if self.tick() >= self.final_tick {
            self.audit(u32::MAX);
            self.commit_issues();
            self.finished = true;
            let (decisions, issues) = (self.decisions_total, self.issues.len());
            self.emit(EventBody::Finished { decisions, issues });
            return Ok(StepOutcome::Finished);
        }
        self.commit_issues();
        self.clock.advance();
        Ok(StepOutcome::Advanced)
    }

    /// Steps until the trial ends, ignoring pauses.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.finished {
            if self.step()? == StepOutcome::Paused {
                self.paused = false;
            }
        }
        Ok(())
    }

    // ----- commands and live faults -----

    /// Queues an operator command for the next tick; returns its ledger id.
    pub fn submit(&mut self, cmd: ControlCommand) -> Result<u64> {
        if cmd.kind.needs_target() {
            let target = cmd
                .target
                .as_deref()
                .ok_or_else(|| Error::rejected(format!("{} needs a target issue id", cmd.kind)))?;
            let id: u64 = target
                .trim()
                .parse()
                .map_err(|_| Error::rejected(format!("target `{target}` is not an issue id")))?;
            if !self.issues.iter().any(|i| i.issue_id == id) {
                return Err(Error::NotFound(format!("issue {id}")));
            }
        }
        let message = match &cmd.target {
            Some(t) => format!("{} {t}", cmd.kind),
            None => cmd.kind.to_string(),
        };
        let issue = IssueEvent {
            issue_id: bump(&mut self.ids.issue),
            code: IssueCode::new("G-CONTROL"),
            severity: Severity::Green,
            profile: self.cfg.profile,
            participants: Vec::new(),
            decision_points: Vec::new(),
            tick: self.tick(),
            timestamp: self.clock.now(),
            message,
            fallback_executed: None,
            component: Component::Operator,
            fault_refs: Vec::new(),
        };
        let entry_id = self.record_issue(issue, Some(cmd.note.clone()));
        self.emit(EventBody::Command {
            entry_id,
            command: cmd.clone(),
            applied: false,
        });
        self.commands.push((entry_id, cmd));
        Ok(entry_id)
    }

    fn apply_commands(&mut self) {
        let now = self.clock.now();
        for (entry_id, cmd) in std::mem::take(&mut self.commands) {
            let target: Option<u64> = cmd.target.as_deref().and_then(|t| t.trim().parse().ok());
            match cmd.kind {
                CommandKind::AckIssue | CommandKind::ResolveIssue => {
                    if let Some(entry) = self.ledger.iter_mut().find(|e| Some(e.issue_id) == target) {
                        entry.acknowledged = true;
                        if cmd.kind == CommandKind::ResolveIssue {
                            entry.resolved_at = Some(now);
                        }
                        let entry = entry.clone();
                        self.outbox.ledger.push(entry.clone());
                        self.emit(EventBody::Ledger(entry));
                    }
                }
                CommandKind::RestartRl => {
                    self.rl.up = true;
                    self.raise(RawEvent::new(RawKind::Restart, "decision service restarted by operator"));
                }
                CommandKind::RestartDb => {
                    self.raise(RawEvent::new(RawKind::Restart, "database connection re-established by operator"));
                }
                CommandKind::Pause => self.paused = true,
                CommandKind::Resume => self.paused = false,
                CommandKind::TriggerUpdate => self.rl.update_requested = true,
            }
            self.emit(EventBody::Command {
                entry_id,
                command: cmd,
                applied: true,
            });
        }
    }

    /// Adds a fault to the live plan. Entries without a window fire for the
    /// next slot only.
    pub fn inject(&mut self, mut entry: FaultEntry) -> Result<()> {
        let next = self.tick() + 1;
        if entry.from.is_none() {
            let at = SlotRef::at(next / 2, Slot::from_index(next % 2));
            entry.from = Some(at);
            entry.to = Some(at);
        }
        if entry.start_tick() < next {
            return Err(Error::rejected("live faults must start after the current slot"));
        }
        self.plan.entries.push(entry.clone());
        self.plan.validate()?;
        self.emit(EventBody::FaultPlanAmended {
            kind: entry.kind,
            participant: entry.participant.clone(),
            from_tick: entry.start_tick(),
            to_tick: entry.end_tick(),
        });
        Ok(())
    }

    /// Called by the run writer when the alert sink refused an alert.
    pub fn note_alert_buffered(&mut self, alert_id: u64) {
        self.raise(RawEvent::new(
            RawKind::AlertBuffered,
            format!("alert {alert_id} buffered for retry"),
        ));
    }

    // ----- shared plumbing -----

    fn emit(&mut self, body: EventBody) {
        let rec = EventRecord {
            v: records::EVENT_SCHEMA_VERSION,
            seq: bump(&mut self.ids.seq),
            tick: self.tick(),
            ts: self.clock.now(),
            body,
        };
        self.outbox.events.push(rec);
    }

    fn raise(&mut self, raw: RawEvent) {
        self.raws.push(raw);
    }

    fn commit_issues(&mut self) {
        if self.raws.is_empty() {
            return;
        }
        let raws = std::mem::take(&mut self.raws);
        let mut next = self.ids.issue;
        let events = group_events(self.cfg.profile, &raws, self.tick(), self.clock.now(), || {
            next += 1;
            next
        });
        self.ids.issue = next;
        for issue in events {
            self.record_issue(issue, None);
        }
    }

    /// Stores an issue with its alert and ledger entry; returns the entry id.
    fn record_issue(&mut self, issue: IssueEvent, note: Option<String>) -> u64 {
        self.emit(EventBody::Issue(issue.clone()));
        let manual = !self.cfg.automated_red
            && issue.severity == Severity::Red
            && issue.component == Component::Monitor;
        let route = if manual { AlertRoute::DashboardQueue } else { AlertRoute::Sink };
        let alert_id = self.ids.alert + 1;
        if let Some(alert) = Alert::for_issue(alert_id, &issue, route) {
            self.ids.alert = alert_id;
            self.alerts.push(alert.clone());
            self.outbox.alerts.push(alert.clone());
            self.emit(EventBody::Alert(alert));
        }
        let mut entry = LedgerEntry::for_issue(bump(&mut self.ids.entry), &issue);
        if let Some(note) = note {
            entry.note = note;
        }
        let id = entry.entry_id;
        self.ledger.push(entry.clone());
        self.outbox.ledger.push(entry.clone());
        self.emit(EventBody::Ledger(entry));
        self.issues.push(issue);
        id
    }

    /// Asks the fault plan about one boundary crossing. Hits are logged in
    /// the injection table.
    fn probe(&mut self, boundary: Boundary, participant: Option<&str>, ordinal: u32) -> Option<(FaultKind, u64)> {
        let it = Interaction {
            boundary,
            tick: self.tick(),
            participant,
            ordinal,
        };
        let hit = self.plan.decide(&it, self.cfg.seed)?;
        let source = match hit.source {
            FaultSource::Plan(i) => format!("plan:{i}"),
            FaultSource::Random => "random".to_string(),
        };
        let id = self.log_injection(hit.kind, boundary, participant, &source, format!("ordinal {ordinal}"));
        Some((hit.kind, id))
    }

    fn log_injection(
        &mut self,
        kind: FaultKind,
        boundary: Boundary,
        participant: Option<&str>,
        source: &str,
        detail: String,
    ) -> u64 {
        let id = bump(&mut self.ids.injection);
        let row = self
            .store
            .row(INJECTIONS)
            .expect("sidecar table")
            .set("injection_id", id)
            .set("tick", self.tick())
            .set("kind", kind.as_str())
            .set("boundary", format!("{boundary:?}"))
            .set("participant_id", participant)
            .set("source", source)
            .set("detail", detail);
        self.store.append(row).expect("injection row conforms");
        self.emit(EventBody::FaultInjected {
            injection_id: id,
            kind,
            participant: participant.map(str::to_string),
            source: source.to_string(),
        });
        id
    }

    fn sample_memory(&mut self) {
        let (usage, source) = self.plan.memory_usage(self.tick());
        self.memory_usage = usage;
        let fault = source.map(|idx| match self.memory_injections.get(&idx) {
            Some(id) => *id,
            None => {
                let id = self.log_injection(
                    FaultKind::OomPressure,
                    Boundary::Memory,
                    None,
                    &format!("plan:{idx}"),
                    format!("usage {usage:.3}"),
                );
                self.memory_injections.insert(idx, id);
                id
            }
        });
        if self.watchdog.sample(usage) {
            self.raise(
                RawEvent::new(
                    RawKind::MemoryThreshold,
                    format!("memory usage {usage:.2} above threshold {:.2}", self.watchdog.threshold),
                )
                .fault(fault),
            );
        }
    }

    /// Injection id of the pressure entry behind the current usage level.
    fn memory_fault(&self) -> Option<u64> {
        self.plan
            .memory_usage(self.tick())
            .1
            .and_then(|idx| self.memory_injections.get(&idx).copied())
    }

    fn active_ids(&self) -> Vec<String> {
        let day = self.clock.current_day;
        self.order
            .iter()
            .filter(|id| self.participants[*id].active_on(day))
            .cloned()
            .collect()
    }

    /// Decision-service roster entries enrolled today, in its own order.
    fn rl_active(&self) -> Vec<String> {
        let day = self.clock.current_day;
        self.rl
            .roster
            .iter()
            .filter(|id| self.participants[*id].enrolled_on(day))
            .cloned()
            .collect()
    }

    fn decision_time(&self, pid: &str, day: u32, slot: Slot) -> Timestamp {
        let p = &self.participants[pid];
        self.clock.slot_time(day, slot, p.minute_offset)
    }

    fn date_of(&self, day: u32) -> NaiveDate {
        self.clock.date(day)
    }

    fn sigma_u(&self) -> DMatrix<f64> {
        self.profile
            .random_effects_cov
            .clone()
            .expect("miwaves profile has Σ_u")
    }

    fn exclude(&mut self, pid: &str, decision_t: u32, code: &IssueCode, reason: &str, fault: Option<u64>) -> Result<()> {
        self.excluded.insert((pid.to_string(), decision_t), code.clone());
        let row = self
            .store
            .row(crate::store::schema::DATA_EXCLUSIONS)?
            .set("participant_id", pid)
            .set("decision_t", decision_t)
            .set("tick", self.tick())
            .set("code", code.as_str())
            .set("reason", reason)
            .set("injection_id", fault);
        self.store.append(row)?;
        Ok(())
    }

    /// Persists an executed decision and runs the per-decision checks.
    fn record_decision(&mut self, rec: DecisionRecord) -> Result<()> {
        let row = self
            .store
            .row(DECISION_RECORDS)?
            .set("participant_id", &rec.participant_id)
            .set("decision_t", rec.decision_t)
            .set("tick", rec.tick)
            .set("day_in_trial", rec.day_in_trial)
            .set("decision_time", rec.decision_time)
            .set("prob", rec.prob)
            .set("seed", rec.seed)
            .set("action", rec.action)
            .set("policy_idx", rec.policy_idx)
            .set("schedule_id", rec.schedule_id)
            .set("rid", rec.rid)
            .set("provenance", rec.source.as_str())
            .set("state", rec.state.clone());
        self.store.append(row)?;
        if rec.source.is_policy() && crate::sentinel::check_probability_bounds(rec.prob, &self.profile.rho) {
            self.raise(
                RawEvent::new(RawKind::ProbabilityOutOfBounds, format!("probability {} outside bounds", rec.prob))
                    .participant(rec.participant_id.clone())
                    .at(rec.decision_t),
            );
        }
        let pid = rec.participant_id.clone();
        let t = rec.decision_t;
        self.decisions_total += 1;
        self.emit(EventBody::Decision(rec.clone()));
        let p = self.participants.get_mut(&pid).expect("known participant");
        debug_assert_eq!(p.actions.len() as u32, t, "decisions are recorded in order");
        p.actions.push(rec.action);
        p.log.push(rec);
        let finding = dosage_rule(self.cfg.profile, &p.actions);
        let code = finding.as_ref().map(|k| classify(self.cfg.profile, k).code);
        if self.dosage.observe(&pid, code.as_ref()) {
            let kind = finding.expect("finding behind a code");
            self.raise(
                RawEvent::new(kind, format!("dosage rule over the last {DOSAGE_WINDOW} decision points"))
                    .participant(pid)
                    .at(t),
            );
        }
        Ok(())
    }

    fn audit(&mut self, settled_before: u32) {
        let found = consistency_audit(&self.store, settled_before);
        let mut fresh = 0;
        for d in found {
            if self.audited.insert(d.key()) {
                fresh += 1;
                self.raise(d.to_raw());
            }
        }
        self.emit(EventBody::Audit { discrepancies: fresh });
    }

    // ----- roster -----

    /// Registrations, removals and removal notifications due this morning.
    fn roster_morning(&mut self) -> Result<()> {
        let day = self.clock.current_day;
        let tick = self.tick();
        // re-send notifications that did not get through
        let pending: Vec<String> = self
            .order
            .iter()
            .filter(|id| self.participants[*id].notify_pending)
            .cloned()
            .collect();
        for pid in pending {
            self.notify_removal(&pid);
        }
        let entering: Vec<String> = self
            .order
            .iter()
            .filter(|id| self.participants[*id].entry_day == day)
            .cloned()
            .collect();
        for pid in entering {
            self.register(&pid)?;
        }
        let scheduled: Vec<(String, String)> = self
            .cfg
            .removals
            .iter()
            .filter(|r| r.day == day)
            .map(|r| (r.participant.clone(), r.reason.clone()))
            .collect();
        for (pid, reason) in scheduled {
            if self.remove(&pid, &reason)? {
                self.notify_removal(&pid);
            }
        }
        for (pid, idx) in self.plan.roster_removals(tick) {
            if self.remove(&pid, "failed verification")? {
                let id = self.log_injection(
                    FaultKind::RosterDesync,
                    Boundary::RosterNotify,
                    Some(&pid),
                    &format!("plan:{idx}"),
                    "removal not communicated".into(),
                );
                self.participants.get_mut(&pid).expect("known").notify_pending = true;
                self.pending_desync.insert(pid, id);
            }
        }
        Ok(())
    }

    fn register(&mut self, pid: &str) -> Result<()> {
        let entry_day = self.participants[pid].entry_day;
        self.rl.roster.push(pid.to_string());
        self.emit(EventBody::Registered {
            participant: pid.to_string(),
            entry_day,
        });
        self.raise(RawEvent::new(RawKind::Roster, format!("{pid} registered")).participant(pid));
        match self.cfg.profile {
            ProfileKind::Oralytics => self.write_participant_info(pid),
            ProfileKind::Miwaves => self.write_user_rows(pid),
        }
    }

    /// Controller-side removal. Returns false when nothing changed.
    fn remove(&mut self, pid: &str, reason: &str) -> Result<bool> {
        let tick = self.tick();
        let day = self.clock.current_day;
        let Some(p) = self.participants.get_mut(pid) else {
            return Err(Error::NotFound(format!("participant {pid}")));
        };
        if p.removed_at.is_some() || !p.enrolled_on(day) {
            return Ok(false);
        }
        p.removed_at = Some(tick);
        p.removal_reason = Some(reason.to_string());
        self.emit(EventBody::Removed {
            participant: pid.to_string(),
            reason: reason.to_string(),
            notified: false,
        });
        self.raise(RawEvent::new(RawKind::Roster, format!("{pid} removed: {reason}")).participant(pid));
        match self.cfg.profile {
            ProfileKind::Oralytics => self.write_participant_info(pid)?,
            ProfileKind::Miwaves => self.write_user_status(pid)?,
        }
        Ok(true)
    }

    fn notify_removal(&mut self, pid: &str) {
        if self.pending_desync.contains_key(pid) && self.plan_desync_active(pid) {
            return;
        }
        if let Some((kind, id)) = self.probe(Boundary::RosterNotify, Some(pid), 0) {
            debug_assert_eq!(kind, FaultKind::RosterDesync);
            self.participants.get_mut(pid).expect("known").notify_pending = true;
            self.pending_desync.insert(pid.to_string(), id);
            return;
        }
        self.rl.roster.retain(|r| r != pid);
        self.participants.get_mut(pid).expect("known").notify_pending = false;
        self.pending_desync.remove(pid);
        self.emit(EventBody::RemovalNotified {
            participant: pid.to_string(),
        });
    }

    /// True while an explicit desync entry for `pid` still covers this tick.
    fn plan_desync_active(&self, pid: &str) -> bool {
        let tick = self.tick();
        self.plan
            .entries
            .iter()
            .any(|e| e.kind == FaultKind::RosterDesync && e.participant.as_deref() == Some(pid) && e.covers(tick))
    }

    /// Injection behind an unreconciled removal, for attributing RD issues.
    fn desync_fault(&self, pid: &str) -> Option<u64> {
        self.pending_desync.get(pid).copied()
    }

    fn record_initial_policy(&mut self) -> Result<()> {
        match self.rl.policy.clone() {
            Policy::Oralytics(p) => self.write_oralytics_policy(&p, 0),
            Policy::Miwaves(p) => self.write_miwaves_policy(&p, 0, BTreeMap::new()),
        }
    }

    /// Throttle check for a data fetch; returns the injection id when the
    /// request is silently ignored.
    fn throttled(&mut self, pid: &str) -> Option<u64> {
        let day = self.clock.current_day;
        if self.throttle.0 != day {
            self.throttle = (day, 0);
        }
        self.throttle.1 += 1;
        let (cap, idx) = self.plan.throttle_cap(self.tick(), Some(pid))?;
        if self.throttle.1 <= cap {
            return None;
        }
        Some(self.log_injection(
            FaultKind::RequestThrottle,
            Boundary::DataFetch,
            Some(pid),
            &format!("plan:{idx}"),
            format!("request {} over daily cap {cap}", self.throttle.1),
        ))
    }
}
