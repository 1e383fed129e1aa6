use serde::{Deserialize, Serialize};

use super::context::{normalize_a_bar, normalize_b_bar, MAX_QUALITY_SECS};
use super::profile::CostParams;
use crate::error::{Error, Result};

/// Cost indicator flags recorded next to every Oralytics reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConditionFlags {
    pub b_condition: bool,
    pub a1_condition: bool,
    pub a2_condition: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub quality: f64,
    pub raw_quality: f64,
    pub cost: f64,
    pub reward: f64,
    pub flags: ConditionFlags,
    /// Normalized b̄ that fed the B condition.
    pub actual_b_bar: f64,
}

/// Oralytics surrogate reward `min(Q, 180) − C(S, A)`.
///
/// `b_bar` (seconds) and `a_bar` (fraction of prompts) are the unnormalized
/// exponential averages; they are normalized before comparison against the
/// thresholds in `params`.
pub fn compute_reward_oralytics(
    raw_quality: f64,
    b_bar: f64,
    a_bar: f64,
    action: u8,
    params: &CostParams,
) -> Result<RewardRecord> {
    if !(raw_quality.is_finite() && raw_quality >= 0.0) {
        return Err(Error::rejected(format!("raw quality must be >= 0, got {raw_quality}")));
    }
    if action > 1 {
        return Err(Error::rejected(format!("action must be 0 or 1, got {action}")));
    }
    let quality = raw_quality.min(MAX_QUALITY_SECS);
    let b_norm = normalize_b_bar(b_bar);
    let a_norm = normalize_a_bar(a_bar);
    let flags = ConditionFlags {
        b_condition: b_norm > params.b_thresh,
        a1_condition: a_norm > params.a1_thresh,
        a2_condition: a_norm > params.a2_thresh,
    };
    let cost = if action == 1 {
        let first = if flags.b_condition && flags.a1_condition { params.xi1 } else { 0.0 };
        let second = if flags.a2_condition { params.xi2 } else { 0.0 };
        first + second
    } else {
        0.0
    };
    Ok(RewardRecord {
        quality,
        raw_quality,
        cost,
        reward: quality - cost,
        flags,
        actual_b_bar: b_norm,
    })
}

/// MiWaves engagement reward in {0, 1, 2, 3}.
pub fn compute_reward_miwaves(app_use: bool, finished_ema: bool, message_click: bool) -> f64 {
    f64::from(u8::from(app_use) + u8::from(finished_ema) + u8::from(message_click))
}
