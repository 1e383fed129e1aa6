//! Conversions between posterior states and their stored rows.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::schema::{POSTERIOR_WEIGHTS, RL_WEIGHTS};
use super::{RowBuilder, RowView, Store};
use crate::clock::Timestamp;
use crate::decision::posterior::participant_blocks;
use crate::decision::profile::{MIWAVES_PARAM_DIM, ORALYTICS_PARAM_DIM};
use crate::decision::{JointPosteriorState, PosteriorState, PriorSpec};
use crate::error::{Error, Result};
use crate::linalg::{flatten_row_major, unflatten_row_major};

fn corrupt(table: &str, reason: impl Into<String>) -> Error {
    Error::SchemaViolation {
        table: table.to_string(),
        reason: reason.into(),
    }
}

pub fn posterior_weights_row(store: &Store, state: &PosteriorState) -> Result<RowBuilder> {
    let d = ORALYTICS_PARAM_DIM;
    let mut b = store
        .row(POSTERIOR_WEIGHTS)?
        .set("policy_idx", state.policy_idx)
        .set("timestamp", state.updated_at);
    for i in 0..d {
        b.put(&format!("posterior_mu.{i}"), state.mu[i]);
    }
    for i in 0..d {
        for j in 0..d {
            b.put(&format!("posterior_var.{i}.{j}"), state.sigma[(i, j)]);
        }
    }
    Ok(b)
}

pub fn posterior_from_row(row: &RowView<'_>) -> Result<PosteriorState> {
    let d = ORALYTICS_PARAM_DIM;
    let get = |col: String| row.f64(&col).ok_or_else(|| corrupt(POSTERIOR_WEIGHTS, format!("missing {col}")));
    let mut mu = DVector::zeros(d);
    let mut sigma = DMatrix::zeros(d, d);
    for i in 0..d {
        mu[i] = get(format!("posterior_mu.{i}"))?;
        for j in 0..d {
            sigma[(i, j)] = get(format!("posterior_var.{i}.{j}"))?;
        }
    }
    let policy_idx = row
        .i64("policy_idx")
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| corrupt(POSTERIOR_WEIGHTS, "bad policy_idx"))?;
    let updated_at = row
        .text("timestamp")
        .and_then(Timestamp::parse)
        .ok_or_else(|| corrupt(POSTERIOR_WEIGHTS, "bad timestamp"))?;
    Ok(PosteriorState {
        policy_idx,
        mu,
        sigma,
        updated_at,
    })
}

/// A MiWaves policy as stored in the RL Weights table: per-participant θ
/// blocks plus the population posterior used for unlisted participants.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredJointPolicy {
    pub policy_id: u32,
    pub blocks: BTreeMap<String, (DVector<f64>, DMatrix<f64>)>,
    pub tpop_mean: DVector<f64>,
    pub tpop_var: DMatrix<f64>,
    pub noise_var: f64,
    pub sigma_u: DMatrix<f64>,
}

impl StoredJointPolicy {
    /// Same rule as [`JointPosteriorState::marginal_for`].
    pub fn marginal_for(&self, participant: &str) -> (DVector<f64>, DMatrix<f64>) {
        match self.blocks.get(participant) {
            Some(block) => block.clone(),
            None => (self.tpop_mean.clone(), &self.tpop_var + &self.sigma_u),
        }
    }
}

pub struct RlWeightsInput<'a> {
    pub id: u64,
    pub state: &'a JointPosteriorState,
    pub prior: &'a PriorSpec,
    pub sigma_u: &'a DMatrix<f64>,
    pub noise_var: f64,
    pub hp_update_id: Option<u64>,
}

pub fn rl_weights_row(store: &Store, input: &RlWeightsInput<'_>) -> Result<RowBuilder> {
    let state = input.state;
    let (tpop_mean, tpop_var) = state
        .population
        .clone()
        .unwrap_or_else(|| (input.prior.mean.clone(), input.prior.cov.clone()));
    let mut var_blocks = Vec::with_capacity(state.participant_ids.len() * MIWAVES_PARAM_DIM * MIWAVES_PARAM_DIM);
    for (_, _, sigma) in participant_blocks(state) {
        var_blocks.extend(flatten_row_major(&sigma));
    }
    Ok(store
        .row(RL_WEIGHTS)?
        .set("id", input.id)
        .set("policy_id", state.policy_idx)
        .set("update_timestamp", state.updated_at)
        .set("post_mean_array", state.mu.as_slice().to_vec())
        .set("post_var_array", var_blocks)
        .set("post_tpop_mean_array", tpop_mean.as_slice().to_vec())
        .set("post_tpop_var_array", flatten_row_major(&tpop_var))
        .set("noise_var", input.noise_var)
        .set("random_eff_cov_array", flatten_row_major(input.sigma_u))
        .set("code_commit_id", env!("CARGO_PKG_VERSION"))
        .set("data_pickle_file_path", format!("tables/update_batches.jsonl#policy={}", state.policy_idx))
        .set("user_list", state.participant_ids.clone())
        .set("hp_update_id", input.hp_update_id))
}

pub fn joint_from_row(row: &RowView<'_>) -> Result<StoredJointPolicy> {
    let d = MIWAVES_PARAM_DIM;
    let t = RL_WEIGHTS;
    let floats = |c: &str| row.floats(c).ok_or_else(|| corrupt(t, format!("missing {c}")));
    let users = row
        .value("user_list")
        .as_text_slice()
        .ok_or_else(|| corrupt(t, "missing user_list"))?;
    let mean = floats("post_mean_array")?;
    let var = floats("post_var_array")?;
    if mean.len() != d * users.len() || var.len() != d * d * users.len() {
        return Err(corrupt(t, "array length does not match user_list"));
    }
    let mut blocks = BTreeMap::new();
    for (i, user) in users.iter().enumerate() {
        let mu = DVector::from_column_slice(&mean[i * d..(i + 1) * d]);
        let sigma = unflatten_row_major(&var[i * d * d..(i + 1) * d * d], d)?;
        blocks.insert(user.clone(), (mu, sigma));
    }
    let tpop_mean = floats("post_tpop_mean_array")?;
    if tpop_mean.len() != d {
        return Err(corrupt(t, "post_tpop_mean_array must have 24 entries"));
    }
    Ok(StoredJointPolicy {
        policy_id: row
            .i64("policy_id")
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| corrupt(t, "bad policy_id"))?,
        blocks,
        tpop_mean: DVector::from_column_slice(tpop_mean),
        tpop_var: unflatten_row_major(floats("post_tpop_var_array")?, d)?,
        noise_var: row.f64("noise_var").ok_or_else(|| corrupt(t, "missing noise_var"))?,
        sigma_u: unflatten_row_major(floats("random_eff_cov_array")?, d)?,
    })
}
