//! Cross-table consistency audit.
//!
//! The controller's decision records are the reference: every executed
//! decision must have its trial-table rows, the rows must agree on
//! probability, action and seed, and excluded points must stay out of
//! update data. A decision point with no data row is only acceptable when
//! an exclusion explains why no data existed; save failures never explain
//! a gap, so each dropped row is reported.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{codes::Severity, Component, RawEvent, RawKind};
use crate::decision::ProfileKind;
use crate::store::schema::*;
use crate::store::{RowView, Store};

/// Provenance labels used in the decision record sidecar.
pub mod provenance {
    pub const SCHEDULE: &str = "SCHEDULE";
    pub const CACHED_SCHEDULE: &str = "CACHED_SCHEDULE";
    pub const NON_PERSONALIZED: &str = "NON_PERSONALIZED";
    pub const FALLBACK: &str = "FALLBACK";
    pub const RL: &str = "RL";
    pub const MISROUTED: &str = "MISROUTED";
}

/// Exclusion codes that record a failed write rather than missing data.
pub fn is_save_failure(profile: ProfileKind, code: &str) -> bool {
    match profile {
        ProfileKind::Oralytics => code == "R3",
        ProfileKind::Miwaves => code == "321",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    MissingRow,
    DuplicateRow,
    ValueMismatch,
    ExcludedInUpdate,
    DuplicateUpdateRow,
    DanglingReference,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Discrepancy {
    pub check: Check,
    pub table: String,
    pub participant_id: String,
    pub decision_t: u32,
    pub detail: String,
    pub component: Component,
}

impl Discrepancy {
    pub fn to_raw(&self) -> RawEvent {
        RawEvent::new(
            RawKind::AuditDiscrepancy,
            format!("{:?} in {}: {}", self.check, self.table, self.detail),
        )
        .participant(self.participant_id.clone())
        .at(self.decision_t)
    }

    pub fn key(&self) -> (Check, String, String, u32) {
        (self.check.clone(), self.table.clone(), self.participant_id.clone(), self.decision_t)
    }
}

pub const AUDIT_SEVERITY: Severity = Severity::Green;

type Key = (String, u32);

struct Decision<'a> {
    row: RowView<'a>,
}

impl Decision<'_> {
    fn prob(&self) -> f64 {
        self.row.f64("prob").unwrap_or(f64::NAN)
    }
    fn action(&self) -> Option<i64> {
        self.row.i64("action")
    }
    fn seed(&self) -> Option<i64> {
        self.row.i64("seed")
    }
    fn provenance(&self) -> &str {
        self.row.text("provenance").unwrap_or("")
    }
}

fn key_of(row: &RowView<'_>, pid: &str, t: &str) -> Option<Key> {
    Some((row.text(pid)?.to_string(), u32::try_from(row.i64(t)?).ok()?))
}

struct Ctx<'a> {
    profile: ProfileKind,
    out: Vec<Discrepancy>,
    decisions: BTreeMap<Key, Decision<'a>>,
    exclusions: BTreeMap<Key, Vec<&'a str>>,
    settled_before: u32,
}

impl Ctx<'_> {
    fn push(&mut self, check: Check, table: &str, key: &Key, detail: String, component: Component) {
        self.out.push(Discrepancy {
            check,
            table: table.to_string(),
            participant_id: key.0.clone(),
            decision_t: key.1,
            detail,
            component,
        });
    }

    /// True when an exclusion documents that the point never had data.
    /// Oralytics writes a selection row with null outcomes for failed
    /// fetches, so only MiWaves has legitimate gaps.
    fn explained_gap(&self, key: &Key) -> bool {
        self.profile == ProfileKind::Miwaves
            && self
                .exclusions
                .get(key)
                .is_some_and(|codes| codes.iter().any(|c| !is_save_failure(self.profile, c)))
    }

    /// Decision points whose data may legitimately still be in flight are
    /// not checked for missing rows yet.
    fn settled_keys(&self) -> Vec<Key> {
        self.decisions
            .iter()
            .filter(|(_, d)| d.row.i64("tick").is_some_and(|t| t < i64::from(self.settled_before)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn excluded(&self, key: &Key) -> bool {
        self.exclusions.contains_key(key)
    }
}

fn compare(ctx: &mut Ctx<'_>, table: &str, key: &Key, row: &RowView<'_>, cols: (&str, &str, &str)) {
    let Some(d) = ctx.decisions.get(key) else {
        return;
    };
    let (prob, action, seed) = (d.prob(), d.action(), d.seed());
    let mut diffs = Vec::new();
    if row.f64(cols.0).map(f64::to_bits) != Some(prob.to_bits()) {
        diffs.push(format!("{} {:?} vs {prob}", cols.0, row.f64(cols.0)));
    }
    if row.i64(cols.1) != action {
        diffs.push(format!("{} {:?} vs {action:?}", cols.1, row.i64(cols.1)));
    }
    if row.i64(cols.2) != seed {
        diffs.push(format!("{} {:?} vs {seed:?}", cols.2, row.i64(cols.2)));
    }
    if !diffs.is_empty() {
        ctx.push(Check::ValueMismatch, table, key, diffs.join(", "), Component::Store);
    }
}

/// Runs every cross-table check; returns discrepancies in canonical order.
///
/// Only decisions taken before tick `settled_before` are checked for
/// missing rows; pass `u32::MAX` once the trial is over.
pub fn consistency_audit(store: &Store, settled_before: u32) -> Vec<Discrepancy> {
    let profile = store.profile();
    let mut ctx = Ctx {
        profile,
        out: Vec::new(),
        decisions: BTreeMap::new(),
        exclusions: BTreeMap::new(),
        settled_before,
    };
    if let Ok(t) = store.table(DECISION_RECORDS) {
        for row in t.rows() {
            if let Some(k) = key_of(&row, "participant_id", "decision_t") {
                ctx.decisions.insert(k, Decision { row });
            }
        }
    }
    if let Ok(t) = store.table(DATA_EXCLUSIONS) {
        for row in t.rows() {
            if let (Some(k), Some(code)) = (key_of(&row, "participant_id", "decision_t"), row.text("code")) {
                ctx.exclusions.entry(k).or_default().push(code);
            }
        }
    }
    match profile {
        ProfileKind::Oralytics => audit_oralytics(store, &mut ctx),
        ProfileKind::Miwaves => audit_miwaves(store, &mut ctx),
    }
    let mut out = ctx.out;
    out.sort();
    out.dedup();
    out
}

fn audit_oralytics(store: &Store, ctx: &mut Ctx<'_>) {
    let selection = store.table(TREATMENT_SELECTION).expect("oralytics table");
    let mut seen: HashMap<Key, usize> = HashMap::new();
    for row in selection.rows() {
        let Some(k) = key_of(&row, "participant_id", "participant_decision_t") else {
            continue;
        };
        *seen.entry(k.clone()).or_default() += 1;
        if !ctx.decisions.contains_key(&k) {
            ctx.push(
                Check::DanglingReference,
                TREATMENT_SELECTION,
                &k,
                "row has no executed decision".into(),
                Component::Store,
            );
            continue;
        }
        compare(ctx, TREATMENT_SELECTION, &k, &row, ("prob", "action", "random_seed"));
    }
    let keys = ctx.settled_keys();
    for k in &keys {
        match seen.get(k).copied().unwrap_or(0) {
            0 if !ctx.explained_gap(k) => ctx.push(
                Check::MissingRow,
                TREATMENT_SELECTION,
                k,
                "executed decision has no row".into(),
                Component::Store,
            ),
            0 | 1 => {}
            n => ctx.push(Check::DuplicateRow, TREATMENT_SELECTION, k, format!("{n} rows"), Component::Store),
        }
    }

    // Schedule-sourced decisions must agree with the schedule they came from.
    let mut planned: HashMap<(i64, Key), RowView<'_>> = HashMap::new();
    for row in store.table(PARTICIPANT_DATA).expect("oralytics table").rows() {
        if let (Some(sid), Some(k)) = (row.i64("schedule_id"), key_of(&row, "participant_id", "participant_decision_t")) {
            planned.insert((sid, k), row);
        }
    }
    for k in &keys {
        let d = &ctx.decisions[k];
        let Some(sid) = d.row.i64("schedule_id") else {
            continue;
        };
        match planned.get(&(sid, k.clone())) {
            Some(row) => {
                let row = *row;
                compare(ctx, PARTICIPANT_DATA, k, &row, ("prob", "action", "random_seed"));
            }
            None => ctx.push(
                Check::DanglingReference,
                PARTICIPANT_DATA,
                k,
                format!("schedule {sid} has no entry for this decision point"),
                Component::Store,
            ),
        }
    }

    let mut in_update: HashSet<Key> = HashSet::new();
    for row in store.table(UPDATE_DATA).expect("oralytics table").rows() {
        let Some(k) = key_of(&row, "participant_id", "participant_decision_t") else {
            continue;
        };
        if !in_update.insert(k.clone()) {
            ctx.push(Check::DuplicateUpdateRow, UPDATE_DATA, &k, "point used twice".into(), Component::Rl);
        }
        if ctx.excluded(&k) {
            ctx.push(
                Check::ExcludedInUpdate,
                UPDATE_DATA,
                &k,
                "excluded point present in update data".into(),
                Component::Rl,
            );
        } else if let Some(d) = ctx.decisions.get(&k) {
            if row.i64("action") != d.action() || row.f64("prob").map(f64::to_bits) != Some(d.prob().to_bits()) {
                ctx.push(
                    Check::ValueMismatch,
                    UPDATE_DATA,
                    &k,
                    "action or prob differs from the executed decision".into(),
                    Component::Rl,
                );
            }
        }
    }
}

fn audit_miwaves(store: &Store, ctx: &mut Ctx<'_>) {
    let selections: HashMap<i64, RowView<'_>> = store
        .table(RL_ACTION_SELECTION)
        .expect("miwaves table")
        .rows()
        .filter_map(|r| Some((r.i64("rid")?, r)))
        .collect();
    let mut history: HashMap<i64, Vec<RowView<'_>>> = HashMap::new();
    for row in store.table(USER_ACTION_HISTORY).expect("miwaves table").rows() {
        if let Some(i) = row.i64("index") {
            history.entry(i).or_default().push(row);
        }
    }
    let keys = ctx.settled_keys();
    for k in &keys {
        let d = &ctx.decisions[k];
        if d.provenance() != provenance::RL {
            continue;
        }
        let Some(rid) = d.row.i64("rid") else {
            continue;
        };
        match selections.get(&rid) {
            Some(row) => {
                let row = *row;
                compare(ctx, RL_ACTION_SELECTION, k, &row, ("act_prob", "action", "seed"));
            }
            None => ctx.push(
                Check::MissingRow,
                RL_ACTION_SELECTION,
                k,
                format!("rid {rid} has no action selection row"),
                Component::Store,
            ),
        }
        match history.get(&rid).map(Vec::as_slice) {
            None | Some([]) if !ctx.explained_gap(k) => ctx.push(
                Check::MissingRow,
                USER_ACTION_HISTORY,
                k,
                format!("rid {rid} has no action history row"),
                Component::Store,
            ),
            None | Some([]) => {}
            Some([row]) => {
                let row = *row;
                compare(ctx, USER_ACTION_HISTORY, k, &row, ("act_prob", "action", "seed"));
            }
            Some(rows) => ctx.push(
                Check::DuplicateRow,
                USER_ACTION_HISTORY,
                k,
                format!("{} rows for rid {rid}", rows.len()),
                Component::Store,
            ),
        }
    }
    for row in store.table(RL_ACTION_SELECTION).expect("miwaves table").rows() {
        if row.bool("row_complete") == Some(true) && row.value("reward").is_null() {
            if let Some(k) = key_of(&row, "user_id", "user_decision_idx") {
                ctx.push(
                    Check::ValueMismatch,
                    RL_ACTION_SELECTION,
                    &k,
                    "row_complete set without a reward".into(),
                    Component::Store,
                );
            }
        }
    }
    let mut flagged: HashSet<Key> = HashSet::new();
    for row in store.table(UPDATE_BATCHES).expect("miwaves table").rows() {
        let Some(k) = key_of(&row, "user_id", "decision_idx") else {
            continue;
        };
        if ctx.excluded(&k) && flagged.insert(k.clone()) {
            ctx.push(
                Check::ExcludedInUpdate,
                UPDATE_BATCHES,
                &k,
                format!("excluded point used by policy {}", row.i64("policy_id").unwrap_or(-1)),
                Component::Rl,
            );
        }
    }
}
