//! Records the simulator emits: decisions, control commands and the
//! line-delimited event log.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clock::{Slot, Timestamp};
use crate::error::{Error, Result};
use crate::faults::FaultKind;
use crate::sentinel::alerts::{Alert, LedgerEntry};
use crate::sentinel::audit::provenance;
use crate::sentinel::IssueEvent;

/// Version of the event-log line schema.
pub const EVENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecisionSource {
    /// Oralytics: today's personalized schedule.
    Schedule,
    /// Oralytics: an older schedule kept in the app cache.
    CachedSchedule,
    /// Oralytics: today's probability-0.5 schedule.
    NonPersonalized,
    /// Controller-side assignment with probability 0.5.
    Fallback,
    /// MiWaves: live decision-service assignment.
    Rl,
    /// MiWaves: an assignment computed for a different participant.
    Misrouted,
}

impl DecisionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionSource::Schedule => provenance::SCHEDULE,
            DecisionSource::CachedSchedule => provenance::CACHED_SCHEDULE,
            DecisionSource::NonPersonalized => provenance::NON_PERSONALIZED,
            DecisionSource::Fallback => provenance::FALLBACK,
            DecisionSource::Rl => provenance::RL,
            DecisionSource::Misrouted => provenance::MISROUTED,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            DecisionSource::Schedule,
            DecisionSource::CachedSchedule,
            DecisionSource::NonPersonalized,
            DecisionSource::Fallback,
            DecisionSource::Rl,
            DecisionSource::Misrouted,
        ]
        .into_iter()
        .find(|d| d.as_str() == s)
    }

    /// Probabilities from these sources come from a policy and must respect
    /// the clipping bounds.
    pub fn is_policy(self) -> bool {
        matches!(
            self,
            DecisionSource::Schedule | DecisionSource::CachedSchedule | DecisionSource::Rl | DecisionSource::Misrouted
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub participant_id: String,
    pub decision_t: u32,
    pub tick: u32,
    pub day_in_trial: u32,
    pub decision_time: Timestamp,
    pub state: Vec<f64>,
    pub prob: f64,
    pub seed: u32,
    pub action: u8,
    pub policy_idx: Option<u32>,
    pub schedule_id: Option<u64>,
    pub rid: Option<u64>,
    pub source: DecisionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandKind {
    AckIssue,
    ResolveIssue,
    RestartRl,
    RestartDb,
    Pause,
    Resume,
    TriggerUpdate,
}

impl CommandKind {
    pub const ALL: [CommandKind; 7] = [
        CommandKind::AckIssue,
        CommandKind::ResolveIssue,
        CommandKind::RestartRl,
        CommandKind::RestartDb,
        CommandKind::Pause,
        CommandKind::Resume,
        CommandKind::TriggerUpdate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::AckIssue => "ACK_ISSUE",
            CommandKind::ResolveIssue => "RESOLVE_ISSUE",
            CommandKind::RestartRl => "RESTART_RL",
            CommandKind::RestartDb => "RESTART_DB",
            CommandKind::Pause => "PAUSE",
            CommandKind::Resume => "RESUME",
            CommandKind::TriggerUpdate => "TRIGGER_UPDATE",
        }
    }

    pub fn needs_target(self) -> bool {
        matches!(self, CommandKind::AckIssue | CommandKind::ResolveIssue)
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CommandKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_ascii_uppercase().replace('-', "_");
        CommandKind::ALL
            .into_iter()
            .find(|k| k.as_str() == wanted)
            .ok_or_else(|| Error::rejected(format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub kind: CommandKind,
    /// Issue id for ACK_ISSUE / RESOLVE_ISSUE.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub note: String,
}

impl ControlCommand {
    pub fn new(kind: CommandKind) -> Self {
        Self {
            kind,
            target: None,
            note: String::new(),
        }
    }

    pub fn target(mut self, t: impl Into<String>) -> Self {
        self.target = Some(t.into());
        self
    }

    pub fn note(mut self, n: impl Into<String>) -> Self {
        self.note = n.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventBody {
    TickStarted {
        day: u32,
        slot: Slot,
    },
    Registered {
        participant: String,
        entry_day: u32,
    },
    Removed {
        participant: String,
        reason: String,
        notified: bool,
    },
    RemovalNotified {
        participant: String,
    },
    FaultInjected {
        injection_id: u64,
        kind: FaultKind,
        participant: Option<String>,
        source: String,
    },
    ScheduleBuilt {
        schedule_id: u64,
        participant: String,
        policy_idx: u32,
        personalized: bool,
        start_t: u32,
        entries: usize,
    },
    ScheduleDelivered {
        schedule_id: u64,
        participant: String,
        accepted: bool,
    },
    Decision(DecisionRecord),
    Outcome {
        participant: String,
        decision_t: u32,
        reward: Option<f64>,
        excluded: Option<String>,
    },
    PolicyUpdated {
        policy_idx: u32,
        observations: usize,
        participants: usize,
    },
    UpdateFailed {
        reason: String,
    },
    Issue(IssueEvent),
    Alert(Alert),
    Ledger(LedgerEntry),
    Command {
        entry_id: u64,
        command: ControlCommand,
        applied: bool,
    },
    FaultPlanAmended {
        kind: FaultKind,
        participant: Option<String>,
        from_tick: u32,
        to_tick: u32,
    },
    Audit {
        discrepancies: usize,
    },
    Finished {
        decisions: usize,
        issues: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub v: u32,
    pub seq: u64,
    pub tick: u32,
    pub ts: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}
