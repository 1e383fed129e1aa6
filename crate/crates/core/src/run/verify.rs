//! Recomputes every stored probability and action from the stored policy
//! rows, states and seeds.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{read_config, read_manifest, TABLES_DIR};
use crate::decision::context::{feature_map_miwaves, MiwavesState};
use crate::decision::posterior::advantage_of_block;
use crate::decision::smooth::smooth_probability;
use crate::decision::{draw_action, ProfileKind, RhoParams};
use crate::error::Result;
use crate::schedule::{FIXED_PROB, MODIFIED_ZONE_END};
use crate::sentinel::audit::provenance;
use crate::store::codec::{joint_from_row, posterior_from_row, StoredJointPolicy};
use crate::store::schema::{
    DECISION_RECORDS, PARTICIPANT_DATA, POSTERIOR_WEIGHTS, RL_ACTION_SELECTION, RL_WEIGHTS, SCHEDULE_PROVENANCE,
    TREATMENT_SELECTION, USER_ACTION_HISTORY,
};
use crate::store::{RowView, Store};

/// Probabilities must reproduce to this absolute tolerance.
pub const PROB_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub table: String,
    pub row: usize,
    pub participant_id: String,
    pub decision_t: i64,
    pub field: String,
    pub stored: String,
    pub expected: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked_probs: usize,
    pub checked_actions: usize,
    pub mismatches: Vec<Mismatch>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Verifies the tables of a run directory.
pub fn verify_run(dir: &Path) -> Result<VerifyReport> {
    read_manifest(dir)?;
    let cfg = read_config(dir)?;
    let store = Store::load_dir(cfg.profile, &dir.join(TABLES_DIR))?;
    verify_store(&store, &cfg.trial_profile().rho)
}

pub fn verify_store(store: &Store, rho: &RhoParams) -> Result<VerifyReport> {
    let mut v = Verifier {
        rho,
        report: VerifyReport::default(),
    };
    match store.profile() {
        ProfileKind::Oralytics => v.oralytics(store)?,
        ProfileKind::Miwaves => v.miwaves(store)?,
    }
    Ok(v.report)
}

/// Indices of the columns a decision row is checked through.
struct Cols {
    participant: &'static str,
    decision_t: &'static str,
    prob: &'static str,
    seed: &'static str,
}

const DECISION_COLS: Cols = Cols {
    participant: "participant_id",
    decision_t: "participant_decision_t",
    prob: "prob",
    seed: "random_seed",
};

const SIDECAR_COLS: Cols = Cols {
    participant: "participant_id",
    decision_t: "decision_t",
    prob: "prob",
    seed: "seed",
};

const HISTORY_COLS: Cols = Cols {
    participant: "user_id",
    decision_t: "decision_idx",
    prob: "act_prob",
    seed: "seed",
};

const SELECTION_COLS: Cols = Cols {
    participant: "user_id",
    decision_t: "user_decision_idx",
    prob: "act_prob",
    seed: "seed",
};

struct Verifier<'a> {
    rho: &'a RhoParams,
    report: VerifyReport,
}

type Expected = std::result::Result<f64, (&'static str, String)>;

/// Table, row index, row and column names of the row being checked.
type Site<'s, 'r> = (&'s str, usize, &'s RowView<'r>, &'s Cols);

impl Verifier<'_> {
    fn mismatch(&mut self, (table, idx, row, cols): Site<'_, '_>, field: &str, stored: String, expected: String) {
        self.report.mismatches.push(Mismatch {
            table: table.to_string(),
            row: idx,
            participant_id: row.text(cols.participant).unwrap_or_default().to_string(),
            decision_t: row.i64(cols.decision_t).unwrap_or(-1),
            field: field.to_string(),
            stored,
            expected,
        });
    }

    /// Compares the stored probability with `expected`, then the stored
    /// action with the one the expected probability and the stored seed give.
    fn check(&mut self, table: &str, idx: usize, row: &RowView<'_>, cols: &Cols, expected: Expected) {
        let expected = match expected {
            Ok(p) => p,
            Err((field, why)) => {
                let stored = row.value(field).to_json().to_string();
                self.mismatch((table, idx, row, cols), field, stored, why);
                return;
            }
        };
        let stored = row.f64(cols.prob).unwrap_or(f64::NAN);
        self.report.checked_probs += 1;
        // a NaN on either side is a mismatch
        let within = (stored - expected).abs() <= PROB_TOLERANCE;
        if !within {
            self.mismatch((table, idx, row, cols), cols.prob, format!("{stored:.17}"), format!("{expected:.17}"));
        }
        let seed = row.i64(cols.seed).and_then(|s| u32::try_from(s).ok());
        let want = seed.and_then(|s| draw_action(expected, s).ok());
        let got = row.i64("action");
        self.report.checked_actions += 1;
        if want.map(i64::from) != got {
            let show = |v: Option<i64>| v.map_or("null".to_string(), |a| a.to_string());
            self.mismatch((table, idx, row, cols), "action", show(got), show(want.map(i64::from)));
        }
    }

    fn oralytics(&mut self, store: &Store) -> Result<()> {
        let mut policies: BTreeMap<i64, (DVector<f64>, DMatrix<f64>)> = BTreeMap::new();
        for row in store.table(POSTERIOR_WEIGHTS)?.rows() {
            let state = posterior_from_row(&row)?;
            policies.insert(i64::from(state.policy_idx), state.advantage_block());
        }
        let mut schedules: BTreeMap<i64, (bool, i64)> = BTreeMap::new();
        for row in store.table(SCHEDULE_PROVENANCE)?.rows() {
            if let (Some(id), Some(p), Some(start)) = (row.i64("schedule_id"), row.bool("personalized"), row.i64("start_t")) {
                schedules.insert(id, (p, start));
            }
        }
        let rho = self.rho;
        let expect = |row: &RowView<'_>, cols: &Cols, state: Option<Vec<f64>>| -> Expected {
            let Some(sid) = row.i64("schedule_id") else {
                return Ok(FIXED_PROB);
            };
            let &(personalized, start_t) = schedules
                .get(&sid)
                .ok_or(("schedule_id", format!("no provenance for schedule {sid}")))?;
            let t = row.i64(cols.decision_t).ok_or((cols.decision_t, "missing".to_string()))?;
            let offset = t - start_t;
            if offset < 0 {
                return Err((cols.decision_t, format!("before schedule start {start_t}")));
            }
            if !personalized || offset > i64::from(MODIFIED_ZONE_END) {
                return Ok(FIXED_PROB);
            }
            let idx = row.i64("policy_idx").ok_or(("policy_idx", "missing".to_string()))?;
            let (mu, sigma) = policies
                .get(&idx)
                .ok_or(("policy_idx", format!("no posterior row for policy {idx}")))?;
            let s = state.ok_or(("state", "missing state".to_string()))?;
            if s.len() != mu.len() {
                return Err(("state", format!("state has {} values", s.len())));
            }
            smooth_probability(mu, sigma, &DVector::from_vec(s), rho)
                .map(|o| o.prob)
                .map_err(|e| ("prob", e.to_string()))
        };
        let row_state = |row: &RowView<'_>| -> Option<Vec<f64>> {
            (0..crate::decision::profile::ORALYTICS_STATE_DIM)
                .map(|i| row.f64(&format!("state.{i}")))
                .collect()
        };
        let mut results = Vec::new();
        for table in [PARTICIPANT_DATA, TREATMENT_SELECTION] {
            for (i, row) in store.table(table)?.rows().enumerate() {
                results.push((table, i, row, &DECISION_COLS, expect(&row, &DECISION_COLS, row_state(&row))));
            }
        }
        for (i, row) in store.table(DECISION_RECORDS)?.rows().enumerate() {
            let state = row.floats("state").map(<[f64]>::to_vec);
            results.push((DECISION_RECORDS, i, row, &SIDECAR_COLS, expect(&row, &SIDECAR_COLS, state)));
        }
        for (table, i, row, cols, expected) in results {
            self.check(table, i, &row, cols, expected);
        }
        Ok(())
    }

    fn miwaves(&mut self, store: &Store) -> Result<()> {
        let mut policies: BTreeMap<i64, StoredJointPolicy> = BTreeMap::new();
        for row in store.table(RL_WEIGHTS)?.rows() {
            let p = joint_from_row(&row)?;
            policies.insert(i64::from(p.policy_id), p);
        }
        let rho = self.rho;
        let expect = |row: &RowView<'_>, cols: &Cols, state: Option<Vec<f64>>| -> Expected {
            let user = row.text(cols.participant).ok_or((cols.participant, "missing".to_string()))?;
            let id = row.i64("policy_id").ok_or(("policy_id", "missing".to_string()))?;
            let policy = policies
                .get(&id)
                .ok_or(("policy_id", format!("no RL Weights row for policy {id}")))?;
            let s = state
                .and_then(|s| MiwavesState::from_slice(&s).ok())
                .ok_or(("state_vector", "unreadable state".to_string()))?;
            let (mu, sigma) = policy.marginal_for(user);
            let (mu_b, sigma_b) = advantage_of_block(&mu, &sigma);
            let features = DVector::from_row_slice(&feature_map_miwaves(&s));
            smooth_probability(&mu_b, &sigma_b, &features, rho)
                .map(|o| o.prob)
                .map_err(|e| ("act_prob", e.to_string()))
        };
        // rid -> the probability the service should have drawn with
        let mut by_rid: BTreeMap<i64, Expected> = BTreeMap::new();
        let mut results = Vec::new();
        for (i, row) in store.table(RL_ACTION_SELECTION)?.rows().enumerate() {
            let exp = expect(&row, &SELECTION_COLS, row.floats("state_vector").map(<[f64]>::to_vec));
            if let Some(rid) = row.i64("rid") {
                by_rid.insert(rid, exp.clone());
            }
            results.push((RL_ACTION_SELECTION, i, row, &SELECTION_COLS, exp));
        }
        let missing_rid = |rid: Option<i64>| -> Expected {
            Err(("rid", format!("no RL Action Selection row for rid {rid:?}")))
        };
        for (i, row) in store.table(USER_ACTION_HISTORY)?.rows().enumerate() {
            let rid = row.i64("index");
            let exp = rid.and_then(|r| by_rid.get(&r).cloned()).unwrap_or_else(|| missing_rid(rid));
            results.push((USER_ACTION_HISTORY, i, row, &HISTORY_COLS, exp));
        }
        for (i, row) in store.table(DECISION_RECORDS)?.rows().enumerate() {
            let exp = if row.text("provenance") == Some(provenance::FALLBACK) {
                Ok(FIXED_PROB)
            } else {
                let rid = row.i64("rid");
                rid.and_then(|r| by_rid.get(&r).cloned()).unwrap_or_else(|| missing_rid(rid))
            };
            results.push((DECISION_RECORDS, i, row, &SIDECAR_COLS, exp));
        }
        for (table, i, row, cols, expected) in results {
            self.check(table, i, &row, cols, expected);
        }
        Ok(())
    }
}
