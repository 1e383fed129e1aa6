//! Deterministic fault injection at the boundaries between the controller,
//! decision service, store and external data sources.
//!
//! Whether a fault fires is a pure function of the plan, the master seed and
//! the interaction being attempted, so a plan expands to the same injected
//! multiset on every run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clock::Slot;
use crate::decision::ProfileKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    EndpointFail,
    ResponseUnparseable,
    MalformedData,
    EmptyData,
    DuplicateData,
    RlCrash,
    DbConnLoss,
    DbSaveError,
    OomPressure,
    BlankSchedule,
    RosterDesync,
    TimezoneSkip,
    RequestThrottle,
}

impl FaultKind {
    pub const ALL: [FaultKind; 13] = [
        FaultKind::EndpointFail,
        FaultKind::ResponseUnparseable,
        FaultKind::MalformedData,
        FaultKind::EmptyData,
        FaultKind::DuplicateData,
        FaultKind::RlCrash,
        FaultKind::DbConnLoss,
        FaultKind::DbSaveError,
        FaultKind::OomPressure,
        FaultKind::BlankSchedule,
        FaultKind::RosterDesync,
        FaultKind::TimezoneSkip,
        FaultKind::RequestThrottle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::EndpointFail => "ENDPOINT_FAIL",
            FaultKind::ResponseUnparseable => "RESPONSE_UNPARSEABLE",
            FaultKind::MalformedData => "MALFORMED_DATA",
            FaultKind::EmptyData => "EMPTY_DATA",
            FaultKind::DuplicateData => "DUPLICATE_DATA",
            FaultKind::RlCrash => "RL_CRASH",
            FaultKind::DbConnLoss => "DB_CONN_LOSS",
            FaultKind::DbSaveError => "DB_SAVE_ERROR",
            FaultKind::OomPressure => "OOM_PRESSURE",
            FaultKind::BlankSchedule => "BLANK_SCHEDULE",
            FaultKind::RosterDesync => "ROSTER_DESYNC",
            FaultKind::TimezoneSkip => "TIMEZONE_SKIP",
            FaultKind::RequestThrottle => "REQUEST_THROTTLE",
        }
    }

    pub fn boundary(self) -> Boundary {
        match self {
            FaultKind::EndpointFail
            | FaultKind::ResponseUnparseable
            | FaultKind::MalformedData
            | FaultKind::EmptyData
            | FaultKind::DuplicateData
            | FaultKind::TimezoneSkip
            | FaultKind::RequestThrottle => Boundary::DataFetch,
            FaultKind::RlCrash => Boundary::RlRequest,
            FaultKind::DbConnLoss => Boundary::StoreRead,
            FaultKind::DbSaveError => Boundary::StoreWrite,
            FaultKind::OomPressure => Boundary::Memory,
            FaultKind::BlankSchedule => Boundary::ScheduleDelivery,
            FaultKind::RosterDesync => Boundary::RosterNotify,
        }
    }

    /// Kinds the random layer may draw. Memory pressure is a ramp rather than
    /// a per-interaction event and throttling needs a request cap, so both
    /// are only available as explicit plan entries.
    pub fn randomizable(self) -> bool {
        !matches!(self, FaultKind::OomPressure | FaultKind::RequestThrottle)
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_ascii_uppercase().replace('-', "_");
        FaultKind::ALL
            .into_iter()
            .find(|k| k.as_str() == wanted)
            .ok_or_else(|| Error::rejected(format!("unknown fault kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Decision service pulling participant outcome data through the controller.
    DataFetch,
    /// Controller calling the decision service.
    RlRequest,
    /// Decision service reading context from its own database.
    StoreRead,
    /// Decision service persisting executed-decision rows.
    StoreWrite,
    Memory,
    /// Controller pushing a schedule to the participant's app.
    ScheduleDelivery,
    /// Controller telling the decision service about a roster removal.
    RosterNotify,
}

impl Boundary {
    pub fn component(self) -> &'static str {
        match self {
            Boundary::DataFetch => "backend",
            Boundary::RlRequest | Boundary::Memory => "rl",
            Boundary::StoreRead | Boundary::StoreWrite => "db",
            Boundary::ScheduleDelivery => "app",
            Boundary::RosterNotify => "backend",
        }
    }
}

/// A (day, slot) position; an omitted slot means the start of the day for
/// window starts and the end of the day for window ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRef {
    pub day: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<Slot>,
}

impl SlotRef {
    pub fn day(day: u32) -> Self {
        Self { day, slot: None }
    }

    pub fn at(day: u32, slot: Slot) -> Self {
        Self { day, slot: Some(slot) }
    }

    fn start_tick(&self) -> u32 {
        self.day * 2 + self.slot.map_or(0, Slot::index)
    }

    fn end_tick(&self) -> u32 {
        self.day * 2 + self.slot.map_or(1, Slot::index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultParams {
    /// OOM_PRESSURE: usage reached at the end of the ramp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak: Option<f64>,
    /// OOM_PRESSURE: ticks from window start to peak.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_ticks: Option<u32>,
    /// REQUEST_THROTTLE: requests per day served before the rest are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<u32>,
}

fn one() -> f64 {
    1.0
}

fn is_one(p: &f64) -> bool {
    *p == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEntry {
    pub kind: FaultKind,
    /// Restricts the entry to one participant; omitted means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant: Option<String>,
    /// Restricts the entry to one component name (`rl`, `db`, `backend`, `app`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<SlotRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<SlotRef>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub probability: f64,
    #[serde(default, skip_serializing_if = "is_default_params")]
    pub params: FaultParams,
}

fn is_default_params(p: &FaultParams) -> bool {
    *p == FaultParams::default()
}

impl FaultEntry {
    pub fn new(kind: FaultKind) -> Self {
        Self {
            kind,
            participant: None,
            component: None,
            from: None,
            to: None,
            probability: 1.0,
            params: FaultParams::default(),
        }
    }

    pub fn for_participant(mut self, participant: impl Into<String>) -> Self {
        self.participant = Some(participant.into());
        self
    }

    pub fn during(mut self, from: SlotRef, to: SlotRef) -> Self {
        self.from = Some(from);
        self.to = Some(to);
        self
    }

    pub fn on_day(self, day: u32) -> Self {
        self.during(SlotRef::day(day), SlotRef::day(day))
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.probability = p;
        self
    }

    pub fn with_params(mut self, params: FaultParams) -> Self {
        self.params = params;
        self
    }

    pub fn start_tick(&self) -> u32 {
        self.from.map_or(0, |f| f.start_tick())
    }

    pub fn end_tick(&self) -> u32 {
        self.to.map_or(u32::MAX, |t| t.end_tick())
    }

    pub fn covers(&self, tick: u32) -> bool {
        tick >= self.start_tick() && tick <= self.end_tick()
    }

    fn targets(&self, boundary: Boundary, participant: Option<&str>) -> bool {
        if let Some(want) = &self.participant {
            if participant != Some(want.as_str()) {
                return false;
            }
        }
        match &self.component {
            Some(c) => c == boundary.component(),
            None => true,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let ctx = |m: &str| Error::config(format!("fault entry {index} ({}): {m}", self.kind));
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(ctx("probability must be in [0, 1]"));
        }
        if self.start_tick() > self.end_tick() {
            return Err(ctx("window ends before it starts"));
        }
        if self.kind == FaultKind::RosterDesync && self.participant.is_none() {
            return Err(ctx("ROSTER_DESYNC needs the participant whose removal goes unreported"));
        }
        if let Some(peak) = self.params.peak {
            if !(peak.is_finite() && peak >= 0.0) {
                return Err(ctx("peak must be a non-negative number"));
            }
        }
        if self.params.ramp_ticks == Some(0) {
            return Err(ctx("ramp_ticks must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomLayer {
    /// Per-interaction probability that some fault fires.
    pub rate: f64,
    /// Kinds to draw from; empty means every randomizable kind.
    #[serde(default)]
    pub kinds: Vec<FaultKind>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub entries: Vec<FaultEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomLayer>,
}

/// One attempted crossing of a boundary.
#[derive(Debug, Clone, Copy)]
pub struct Interaction<'a> {
    pub boundary: Boundary,
    pub tick: u32,
    pub participant: Option<&'a str>,
    /// Distinguishes repeated crossings within a tick (e.g. per decision point).
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultSource {
    Plan(usize),
    Random,
}

impl fmt::Display for FaultSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultSource::Plan(i) => write!(f, "plan[{i}]"),
            FaultSource::Random => f.write_str("random"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultHit {
    pub kind: FaultKind,
    pub source: FaultSource,
}

pub const DEFAULT_MEMORY_BASELINE: f64 = 0.45;
const DEFAULT_PEAK: f64 = 1.0;
const DEFAULT_RAMP_TICKS: u32 = 3;
pub const DEFAULT_THROTTLE_CAP: u32 = 25;

impl FaultPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            e.validate(i)?;
        }
        if let Some(r) = &self.random {
            if !(0.0..=1.0).contains(&r.rate) {
                return Err(Error::config("random fault rate must be in [0, 1]"));
            }
            if let Some(k) = r.kinds.iter().find(|k| !k.randomizable()) {
                return Err(Error::config(format!("{k} cannot be drawn by the random layer")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let plan: FaultPlan = toml::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let plan: FaultPlan = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Loads `.json` files as JSON and everything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    /// Resolves the built-in incident plan by name or loads a file path.
    pub fn resolve(spec: &str, profile: ProfileKind) -> Result<Self> {
        if INCIDENT_REPLAY_NAMES.contains(&spec) {
            Ok(incident_replay(profile))
        } else {
            Self::load(Path::new(spec))
        }
    }

    /// First matching fault for an interaction. Throttling and memory
    /// pressure are answered by [`throttle_cap`](Self::throttle_cap) and
    /// [`memory_usage`](Self::memory_usage) instead.
    pub fn decide(&self, interaction: &Interaction<'_>, seed: u64) -> Option<FaultHit> {
        for (i, e) in self.entries.iter().enumerate() {
            if matches!(e.kind, FaultKind::RequestThrottle | FaultKind::OomPressure) {
                continue;
            }
            if e.kind.boundary() != interaction.boundary
                || !e.covers(interaction.tick)
                || !e.targets(interaction.boundary, interaction.participant)
            {
                continue;
            }
            if e.probability >= 1.0 || uniform(seed, i as u64, interaction) < e.probability {
                return Some(FaultHit {
                    kind: e.kind,
                    source: FaultSource::Plan(i),
                });
            }
        }
        let layer = self.random.as_ref()?;
        if layer.rate <= 0.0 {
            return None;
        }
        let eligible: Vec<FaultKind> = if layer.kinds.is_empty() {
            FaultKind::ALL.into_iter().filter(|k| k.randomizable()).collect()
        } else {
            layer.kinds.clone()
        };
        let eligible: Vec<FaultKind> = eligible
            .into_iter()
            .filter(|k| k.boundary() == interaction.boundary)
            .collect();
        if eligible.is_empty() || uniform(seed, RANDOM_STREAM, interaction) >= layer.rate {
            return None;
        }
        let pick = (mix(seed ^ RANDOM_PICK, interaction) % eligible.len() as u64) as usize;
        Some(FaultHit {
            kind: eligible[pick],
            source: FaultSource::Random,
        })
    }

    /// Daily request cap in force for a data fetch, if any throttle entry
    /// covers it.
    pub fn throttle_cap(&self, tick: u32, participant: Option<&str>) -> Option<(u32, usize)> {
        self.entries.iter().enumerate().find_map(|(i, e)| {
            (e.kind == FaultKind::RequestThrottle && e.covers(tick) && e.targets(Boundary::DataFetch, participant))
                .then(|| (e.params.cap.unwrap_or(DEFAULT_THROTTLE_CAP), i))
        })
    }

    /// Memory usage fraction of the decision-service host at `tick`.
    ///
    /// Each pressure entry ramps linearly from the baseline at its window
    /// start to its peak over `ramp_ticks`, holds until the window ends and
    /// then drops back. Overlapping entries take the maximum.
    pub fn memory_usage(&self, tick: u32) -> (f64, Option<usize>) {
        let mut usage = DEFAULT_MEMORY_BASELINE;
        let mut source = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.kind != FaultKind::OomPressure || !e.covers(tick) {
                continue;
            }
            let peak = e.params.peak.unwrap_or(DEFAULT_PEAK);
            let ramp = e.params.ramp_ticks.unwrap_or(DEFAULT_RAMP_TICKS);
            let progress = f64::from(tick - e.start_tick() + 1) / f64::from(ramp);
            let u = DEFAULT_MEMORY_BASELINE + (peak - DEFAULT_MEMORY_BASELINE) * progress.min(1.0);
            if u > usage {
                usage = u;
                source = Some(i);
            }
        }
        (usage, source)
    }

    /// Explicit ROSTER_DESYNC entries starting at `tick`: the named
    /// participant fails verification and is removed without notice.
    pub fn roster_removals(&self, tick: u32) -> Vec<(String, usize)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == FaultKind::RosterDesync && e.start_tick() == tick)
            .filter_map(|(i, e)| e.participant.clone().map(|p| (p, i)))
            .collect()
    }

    pub fn kinds(&self) -> Vec<FaultKind> {
        let mut kinds: Vec<FaultKind> = self.entries.iter().map(|e| e.kind).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }
}

const RANDOM_STREAM: u64 = 0x5241_4e44;
const RANDOM_PICK: u64 = 0x7069_636b;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn mix(stream: u64, it: &Interaction<'_>) -> u64 {
    let mut h = splitmix(stream);
    h = splitmix(h ^ it.boundary as u64);
    h = splitmix(h ^ u64::from(it.tick));
    h = splitmix(h ^ it.participant.map_or(0, fnv1a));
    splitmix(h ^ u64::from(it.ordinal))
}

fn uniform(seed: u64, stream: u64, it: &Interaction<'_>) -> f64 {
    let h = mix(splitmix(seed) ^ stream.wrapping_mul(0x2545_f491_4f6c_dd1d), it);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub const INCIDENT_REPLAY: &str = "incident-replay";
/// Names that select the built-in incident plan; the second is kept for
/// existing scripts.
pub const INCIDENT_REPLAY_NAMES: [&str; 2] = [INCIDENT_REPLAY, "paper-replay"];

/// Built-in plan that re-enacts the incident classes reported for each trial
/// on a 20-participant run with two entries per day.
pub fn incident_replay(profile: ProfileKind) -> FaultPlan {
    use FaultKind::*;
    let e = FaultEntry::new;
    let p = |n: u32| format!("P{n:03}");
    let entries = match profile {
        ProfileKind::Oralytics => vec![
            e(RosterDesync).for_participant(p(2)).on_day(1),
            e(DbConnLoss).on_day(12),
            e(EndpointFail).for_participant(p(7)).on_day(18),
            e(ResponseUnparseable).for_participant(p(8)).on_day(19),
            e(RequestThrottle).during(SlotRef::day(20), SlotRef::day(22)).with_params(FaultParams {
                cap: Some(DEFAULT_THROTTLE_CAP),
                ..FaultParams::default()
            }),
            e(EmptyData).for_participant(p(9)).on_day(21),
            e(DuplicateData).for_participant(p(10)).on_day(22),
            e(TimezoneSkip).for_participant(p(11)).during(SlotRef::day(23), SlotRef::day(24)),
            e(MalformedData).for_participant(p(5)).on_day(25),
            e(DbSaveError).for_participant(p(12)).on_day(26),
            e(RlCrash).on_day(30),
            e(BlankSchedule).for_participant(p(3)).on_day(33),
            e(DbConnLoss).on_day(40),
            e(RlCrash).on_day(45),
            e(OomPressure)
                .during(SlotRef::at(48, Slot::Morning), SlotRef::at(49, Slot::Morning))
                .with_params(FaultParams {
                    peak: Some(1.05),
                    ramp_ticks: Some(3),
                    cap: None,
                }),
            e(DbConnLoss).on_day(55),
        ],
        ProfileKind::Miwaves => vec![
            e(RosterDesync).for_participant(p(2)).on_day(1),
            e(EndpointFail).for_participant(p(7)).on_day(6),
            e(ResponseUnparseable).for_participant(p(8)).on_day(7),
            e(DbConnLoss).for_participant(p(4)).on_day(8),
            e(RequestThrottle).on_day(9).with_params(FaultParams {
                cap: Some(12),
                ..FaultParams::default()
            }),
            e(OomPressure)
                .during(SlotRef::at(10, Slot::Morning), SlotRef::at(10, Slot::Evening))
                .with_params(FaultParams {
                    peak: Some(1.05),
                    ramp_ticks: Some(2),
                    cap: None,
                }),
            e(EmptyData).for_participant(p(9)).on_day(12),
            e(DuplicateData).for_participant(p(10)).on_day(13),
            e(TimezoneSkip).for_participant(p(11)).on_day(14),
            e(MalformedData).for_participant(p(5)).on_day(15),
            e(DbSaveError).for_participant(p(12)).on_day(16),
            e(RlCrash).on_day(18),
            e(TimezoneSkip).for_participant(p(13)).on_day(20),
        ],
    };
    FaultPlan {
        name: Some(INCIDENT_REPLAY.to_string()),
        entries,
        random: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fetch(tick: u32, participant: &str, ordinal: u32) -> Interaction<'_> {
        Interaction {
            boundary: Boundary::DataFetch,
            tick,
            participant: Some(participant),
            ordinal,
        }
    }

    #[test]
    fn no_matching_entry_is_identity() {
        let plan = FaultPlan {
            entries: vec![FaultEntry::new(FaultKind::EndpointFail).for_participant("P001").on_day(3)],
            ..FaultPlan::default()
        };
        assert!(plan.decide(&fetch(6, "P002", 0), 1).is_none());
        assert!(plan.decide(&fetch(4, "P001", 0), 1).is_none());
        let hit = plan.decide(&fetch(7, "P001", 0), 1).unwrap();
        assert_eq!(hit.kind, FaultKind::EndpointFail);
        assert_eq!(hit.source, FaultSource::Plan(0));
    }

    #[test]
    fn decisions_are_deterministic_and_seed_dependent() {
        let plan = FaultPlan {
            random: Some(RandomLayer {
                rate: 0.3,
                kinds: vec![],
            }),
            ..FaultPlan::default()
        };
        let draw = |seed| {
            (0..2000u32)
                .map(|i| plan.decide(&fetch(i / 40, "P003", i % 40), seed).map(|h| h.kind))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
        let hits = draw(11).iter().filter(|h| h.is_some()).count();
        assert!((500..700).contains(&hits), "{hits}");
    }

    #[test]
    fn memory_ramp_and_baseline() {
        let plan = FaultPlan {
            entries: vec![FaultEntry::new(FaultKind::OomPressure)
                .during(SlotRef::at(2, Slot::Morning), SlotRef::at(3, Slot::Evening))
                .with_params(FaultParams {
                    peak: Some(0.92),
                    ramp_ticks: Some(2),
                    cap: None,
                })],
            ..FaultPlan::default()
        };
        assert_eq!(plan.memory_usage(3).0, DEFAULT_MEMORY_BASELINE);
        assert!(plan.memory_usage(4).0 < 0.92);
        assert!((plan.memory_usage(5).0 - 0.92).abs() < 1e-12);
        assert!((plan.memory_usage(7).0 - 0.92).abs() < 1e-12);
        assert_eq!(plan.memory_usage(8).0, DEFAULT_MEMORY_BASELINE);
        assert_eq!(FaultPlan::empty().memory_usage(100).0, DEFAULT_MEMORY_BASELINE);
    }

    #[test]
    fn plan_file_roundtrip() {
        let text = r#"
            name = "drill"
            [[entries]]
            kind = "RL_CRASH"
            from = { day = 3 }
            to = { day = 3, slot = "MORNING" }

            [[entries]]
            kind = "REQUEST_THROTTLE"
            params = { cap = 10 }

            [random]
            rate = 0.1
            kinds = ["ENDPOINT_FAIL", "EMPTY_DATA"]
        "#;
        let plan = FaultPlan::from_toml_str(text).unwrap();
        assert_eq!(plan.entries.len(), 2);
        assert_eq!(plan.entries[0].end_tick(), 6);
        assert_eq!(plan.throttle_cap(99, None), Some((10, 1)));
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(FaultPlan::from_json_str(&json).unwrap(), plan);
    }

    #[test]
    fn invalid_plans_rejected() {
        assert!(FaultPlan::from_toml_str("[[entries]]\nkind = \"ROSTER_DESYNC\"\n").is_err());
        assert!(FaultPlan::from_toml_str("[[entries]]\nkind = \"NOPE\"\n").is_err());
        assert!(FaultPlan::from_toml_str("[random]\nrate = 0.1\nkinds = [\"OOM_PRESSURE\"]\n").is_err());
        assert!(FaultPlan::from_toml_str("[[entries]]\nkind = \"RL_CRASH\"\nprobability = 2.0\n").is_err());
    }

    #[test]
    fn incident_replay_covers_kinds() {
        let oral = incident_replay(ProfileKind::Oralytics);
        assert_eq!(oral.kinds(), FaultKind::ALL.to_vec().into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect::<Vec<_>>());
        let mw = incident_replay(ProfileKind::Miwaves);
        assert_eq!(mw.kinds().len(), 12);
        assert!(!mw.kinds().contains(&FaultKind::BlankSchedule));
        oral.validate().unwrap();
        mw.validate().unwrap();
        for name in INCIDENT_REPLAY_NAMES {
            assert_eq!(FaultPlan::resolve(name, ProfileKind::Miwaves).unwrap(), mw);
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("rl-crash".parse::<FaultKind>().unwrap(), FaultKind::RlCrash);
        assert!("bogus".parse::<FaultKind>().is_err());
    }
}
