//! Table definitions. Names and column names of the trial tables follow the
//! published schemas byte for byte; the sidecar tables hold controller-side
//! records the audits and replay need.

use std::sync::OnceLock;

use crate::decision::profile::{ORALYTICS_PARAM_DIM, ORALYTICS_STATE_DIM};
use crate::decision::ProfileKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Int,
    Float,
    Text,
    Bool,
    /// `%Y-%m-%d %H:%M:%S` string.
    Timestamp,
    IntArray,
    FloatArray,
    TextArray,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub ty: ColumnType,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TableMode {
    AppendOnly,
    /// Upsert on the listed key columns.
    Keyed(Vec<&'static str>),
    /// Holds at most one row.
    Singleton,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub name: &'static str,
    /// File stem inside the run directory's `tables/`.
    pub file: &'static str,
    pub columns: Vec<Column>,
    pub mode: TableMode,
    /// False for the sidecar tables.
    pub appendix: bool,
}

impl TableSchema {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

pub const PARTICIPANT_INFO: &str = "Participant Info Table";
pub const POSTERIOR_WEIGHTS: &str = "Posterior Weights Table";
pub const PARTICIPANT_DATA: &str = "Participant Data Table";
pub const TREATMENT_SELECTION: &str = "Treatment Selection Data Table";
pub const UPDATE_DATA: &str = "Update Data Table";

pub const USERS: &str = "Users Table";
pub const USER_STATUS: &str = "User Status Table";
pub const ALGORITHM_STATUS: &str = "Algorithm Status Table";
pub const HYPERPARAMETER_REQUESTS: &str = "RL Hyperparameter Update Request Table";
pub const RL_WEIGHTS: &str = "RL Weights Table";
pub const RL_ACTION_SELECTION: &str = "RL Action Selection Table";
pub const USER_ACTION_HISTORY: &str = "User Action History Table";

pub const DECISION_RECORDS: &str = "decision_records";
pub const DATA_EXCLUSIONS: &str = "data_exclusions";
pub const SCHEDULE_PROVENANCE: &str = "schedule_provenance";
pub const UPDATE_BATCHES: &str = "update_batches";
pub const INJECTIONS: &str = "injections";

struct Cols(Vec<Column>);

impl Cols {
    fn new() -> Self {
        Cols(Vec::new())
    }

    fn add(mut self, name: impl Into<String>, ty: ColumnType) -> Self {
        self.0.push(Column {
            name: name.into(),
            ty,
            nullable: false,
        });
        self
    }

    fn opt(mut self, name: impl Into<String>, ty: ColumnType) -> Self {
        self.0.push(Column {
            name: name.into(),
            ty,
            nullable: true,
        });
        self
    }

    fn state(mut self) -> Self {
        for i in 0..ORALYTICS_STATE_DIM {
            self = self.add(format!("state.{i}"), ColumnType::Float);
        }
        self
    }
}

use ColumnType::*;

fn identity(c: Cols) -> Cols {
    c.add("participant_id", Text)
        .add("participant_start_day", Text)
        .add("participant_end_day", Text)
}

fn decision_columns(c: Cols) -> Cols {
    identity(c)
        .add("timestamp", Timestamp)
        .opt("schedule_id", Int)
        .add("participant_decision_t", Int)
        .add("decision_time", Timestamp)
        .add("day_in_trial", Int)
        .opt("policy_idx", Int)
        .add("random_seed", Int)
        .add("action", Int)
        .add("prob", Float)
        .state()
}

fn table(name: &'static str, file: &'static str, cols: Cols, mode: TableMode, appendix: bool) -> TableSchema {
    TableSchema {
        name,
        file,
        columns: cols.0,
        mode,
        appendix,
    }
}

fn oralytics_tables() -> Vec<TableSchema> {
    let info = Cols::new()
        .add("participant_id", Text)
        .add("participant_start_day", Text)
        .add("participant_end_day", Text)
        .add("morning_time_weekday", Text)
        .add("evening_time_weekday", Text)
        .add("morning_time_weekend", Text)
        .add("evening_time_weekend", Text)
        .add("participant_entry_decision_t", Int)
        .add("participant_last_decision_t", Int)
        .add("currently_in_trial", Int)
        .add("participant_day_in_trial", Int)
        .add("participant_opened_app", Int)
        .opt("most_recent_schedule_id", Int);

    let mut weights = Cols::new().add("policy_idx", Int).add("timestamp", Timestamp);
    for i in 0..ORALYTICS_PARAM_DIM {
        weights = weights.add(format!("posterior_mu.{i}"), Float);
    }
    for i in 0..ORALYTICS_PARAM_DIM {
        for j in 0..ORALYTICS_PARAM_DIM {
            weights = weights.add(format!("posterior_var.{i}.{j}"), Float);
        }
    }

    let selection = decision_columns(Cols::new())
        .opt("brushing_duration", Float)
        .opt("pressure_duration", Float)
        .opt("quality", Float)
        .opt("raw_quality", Float)
        .opt("reward", Float)
        .opt("cost_term", Float)
        .opt("B_condition", Int)
        .opt("A1_condition", Int)
        .opt("A2_condition", Int)
        .opt("actual_b_bar", Float);

    let update = identity(Cols::new())
        .add("timestamp", Timestamp)
        .add("participant_decision_t", Int)
        .add("decision_time", Timestamp)
        .add("first_policy_idx", Int)
        .add("action", Int)
        .add("prob", Float)
        .add("reward", Float)
        .add("quality", Float)
        .state();

    let provenance = Cols::new()
        .add("schedule_id", Int)
        .add("participant_id", Text)
        .add("created_at", Timestamp)
        .add("policy_idx", Int)
        .add("personalized", Bool)
        .add("start_t", Int)
        .add("entries", Int);

    vec![
        table(PARTICIPANT_INFO, "participant_info", info, TableMode::Keyed(vec!["participant_id"]), true),
        table(POSTERIOR_WEIGHTS, "posterior_weights", weights, TableMode::AppendOnly, true),
        table(PARTICIPANT_DATA, "participant_data", decision_columns(Cols::new()), TableMode::AppendOnly, true),
        table(TREATMENT_SELECTION, "treatment_selection_data", selection, TableMode::AppendOnly, true),
        table(UPDATE_DATA, "update_data", update, TableMode::AppendOnly, true),
        table(SCHEDULE_PROVENANCE, "schedule_provenance", provenance, TableMode::AppendOnly, false),
    ]
}

fn miwaves_tables() -> Vec<TableSchema> {
    let users = Cols::new()
        .add("user_id", Text)
        .add("consent_start_date", Timestamp)
        .add("consent_end_date", Timestamp)
        .add("rl_start_date", Timestamp)
        .add("rl_end_date", Timestamp);
    let status = Cols::new()
        .add("user_id", Text)
        .add("trial_phase", Text)
        .add("morning_notif_time_start", IntArray)
        .add("evening_notif_time_start", IntArray)
        .add("current_decision_index", Int)
        .add("current_time_of_day", Int)
        .add("trial_day", Int);
    let alg = Cols::new()
        .add("policy_id", Int)
        .add("update_time", Timestamp)
        .add("update_day_in_trial", Int)
        .add("current_decision_time", Int)
        .add("current_day_in_trial", Int);
    let hp = Cols::new()
        .add("id", Int)
        .add("backup_location", Text)
        .add("request_timestamp", Timestamp)
        .add("request_status", Text)
        .add("request_message", Text)
        .opt("request_error_code", Int)
        .opt("completed_timestamp", Timestamp);
    let weights = Cols::new()
        .add("id", Int)
        .add("policy_id", Int)
        .add("update_timestamp", Timestamp)
        .add("post_mean_array", FloatArray)
        .add("post_var_array", FloatArray)
        .add("post_tpop_mean_array", FloatArray)
        .add("post_tpop_var_array", FloatArray)
        .add("noise_var", Float)
        .add("random_eff_cov_array", FloatArray)
        .add("code_commit_id", Text)
        .add("data_pickle_file_path", Text)
        .add("user_list", TextArray)
        .opt("hp_update_id", Int);
    let action = Cols::new()
        .add("user_id", Text)
        .add("user_decision_idx", Int)
        .add("morning_notification_time", IntArray)
        .add("evening_notification_time", IntArray)
        .add("day_in_trial", Int)
        .add("action", Int)
        .add("policy_id", Int)
        .add("seed", Int)
        .opt("prior_ema_completion_time", Text)
        .add("action_selection_timestamp", Timestamp)
        .opt("message_sent_notification_ts", Text)
        .opt("message_click_notification_ts", Text)
        .add("act_prob", Float)
        .add("cannabis_use", FloatArray)
        .add("state_vector", FloatArray)
        .opt("reward", Float)
        .add("row_complete", Bool)
        .add("rid", Int);
    let history = Cols::new()
        .add("index", Int)
        .add("user_id", Text)
        .add("decision_idx", Int)
        .add("finished_ema", Bool)
        .opt("activity_question_response", Text)
        .add("app_use_flag", Bool)
        .add("cannabis_use", FloatArray)
        .add("reward", Float)
        .add("state", IntArray)
        .add("action", Int)
        .add("seed", Int)
        .add("act_prob", Float)
        .add("policy_id", Int)
        .add("timestamp", Timestamp);
    let batches = Cols::new()
        .add("policy_id", Int)
        .add("user_id", Text)
        .add("decision_idx", Int);

    vec![
        table(USERS, "users", users, TableMode::Keyed(vec!["user_id"]), true),
        table(USER_STATUS, "user_status", status, TableMode::Keyed(vec!["user_id"]), true),
        table(ALGORITHM_STATUS, "algorithm_status", alg, TableMode::Singleton, true),
        table(HYPERPARAMETER_REQUESTS, "rl_hyperparameter_update_request", hp, TableMode::AppendOnly, true),
        table(RL_WEIGHTS, "rl_weights", weights, TableMode::AppendOnly, true),
        table(RL_ACTION_SELECTION, "rl_action_selection", action, TableMode::Keyed(vec!["rid"]), true),
        table(USER_ACTION_HISTORY, "user_action_history", history, TableMode::AppendOnly, true),
        table(UPDATE_BATCHES, "update_batches", batches, TableMode::AppendOnly, false),
    ]
}

fn shared_sidecars() -> Vec<TableSchema> {
    let decisions = Cols::new()
        .add("participant_id", Text)
        .add("decision_t", Int)
        .add("tick", Int)
        .add("day_in_trial", Int)
        .add("decision_time", Timestamp)
        .add("prob", Float)
        .add("seed", Int)
        .add("action", Int)
        .opt("policy_idx", Int)
        .opt("schedule_id", Int)
        .opt("rid", Int)
        .add("provenance", Text)
        .add("state", FloatArray);
    let exclusions = Cols::new()
        .add("participant_id", Text)
        .add("decision_t", Int)
        .add("tick", Int)
        .add("code", Text)
        .add("reason", Text)
        .opt("injection_id", Int);
    let injections = Cols::new()
        .add("injection_id", Int)
        .add("tick", Int)
        .add("kind", Text)
        .add("boundary", Text)
        .opt("participant_id", Text)
        .add("source", Text)
        .add("detail", Text);
    vec![
        table(DECISION_RECORDS, "decision_records", decisions, TableMode::AppendOnly, false),
        table(DATA_EXCLUSIONS, "data_exclusions", exclusions, TableMode::AppendOnly, false),
        table(INJECTIONS, "injections", injections, TableMode::AppendOnly, false),
    ]
}

/// Every table a run of `profile` maintains, appendix tables first.
pub fn schemas(profile: ProfileKind) -> &'static [TableSchema] {
    static ORAL: OnceLock<Vec<TableSchema>> = OnceLock::new();
    static MIW: OnceLock<Vec<TableSchema>> = OnceLock::new();
    let build = |mut own: Vec<TableSchema>| {
        own.extend(shared_sidecars());
        own
    };
    match profile {
        ProfileKind::Oralytics => ORAL.get_or_init(|| build(oralytics_tables())),
        ProfileKind::Miwaves => MIW.get_or_init(|| build(miwaves_tables())),
    }
}

pub fn appendix_table_names(profile: ProfileKind) -> Vec<&'static str> {
    schemas(profile).iter().filter(|s| s.appendix).map(|s| s.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_counts() {
        assert_eq!(appendix_table_names(ProfileKind::Oralytics).len(), 5);
        assert_eq!(appendix_table_names(ProfileKind::Miwaves).len(), 7);
    }

    #[test]
    fn posterior_columns_are_flattened() {
        let s = schemas(ProfileKind::Oralytics).iter().find(|s| s.name == POSTERIOR_WEIGHTS).unwrap();
        assert_eq!(s.columns.len(), 2 + 15 + 225);
        assert_eq!(s.columns[2].name, "posterior_mu.0");
        assert_eq!(s.columns[17].name, "posterior_var.0.0");
        assert_eq!(s.columns.last().unwrap().name, "posterior_var.14.14");
    }

    #[test]
    fn selection_has_cost_columns() {
        let s = schemas(ProfileKind::Oralytics).iter().find(|s| s.name == TREATMENT_SELECTION).unwrap();
        for name in ["B_condition", "A1_condition", "A2_condition", "actual_b_bar", "random_seed", "state.4", "action"] {
            assert!(s.column_index(name).is_some(), "{name}");
        }
    }
}
