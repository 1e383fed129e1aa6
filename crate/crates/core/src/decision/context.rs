//! Context construction and feature maps for both profiles.

use serde::{Deserialize, Serialize};

use super::profile::{MIWAVES_FEATURE_DIM, MIWAVES_PARAM_DIM, ORALYTICS_PARAM_DIM, ORALYTICS_STATE_DIM};
use crate::error::{Error, Result};

/// Discount used by both Oralytics exponential averages.
pub const ORALYTICS_GAMMA: f64 = 13.0 / 14.0;
/// Number of past decision points (7 days × 2) in the exponential averages.
pub const HISTORY_WINDOW: usize = 14;
/// Brushing quality is truncated at this many seconds.
pub const MAX_QUALITY_SECS: f64 = 180.0;

/// c_γ Σ_{j=1..14} γ^{j−1} v_j with c_γ = (1 − γ)/(1 − γ¹⁴); `values` is most-recent-first.
pub fn exp_average(values: &[f64], gamma: f64) -> Result<f64> {
    if values.len() != HISTORY_WINDOW {
        return Err(Error::rejected(format!(
            "exponential average needs exactly {HISTORY_WINDOW} values, got {}",
            values.len()
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::rejected(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let c_gamma = (1.0 - gamma) / (1.0 - gamma.powi(HISTORY_WINDOW as i32));
    let mut weight = 1.0;
    let mut acc = 0.0;
    for v in values {
        acc += weight * v;
        weight *= gamma;
    }
    Ok(c_gamma * acc)
}

/// b̄ ∈ [0, 180] seconds → [−1, 1].
pub fn normalize_b_bar(b_bar: f64) -> f64 {
    (2.0 * (b_bar / MAX_QUALITY_SECS) - 1.0).clamp(-1.0, 1.0)
}

/// ā ∈ [0, 1] → [−1, 1].
pub fn normalize_a_bar(a_bar: f64) -> f64 {
    (2.0 * a_bar - 1.0).clamp(-1.0, 1.0)
}

/// One past Oralytics decision point as seen by the algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    /// Truncated brushing quality in seconds.
    pub quality: f64,
    pub action: u8,
}

/// Oralytics context `[time_of_day, b̄_norm, ā_norm, opened_app, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OralyticsContext {
    pub time_of_day: u8,
    pub b_bar_norm: f64,
    pub a_bar_norm: f64,
    pub opened_app: u8,
}

impl OralyticsContext {
    pub fn to_array(&self) -> [f64; ORALYTICS_STATE_DIM] {
        [
            f64::from(self.time_of_day),
            self.b_bar_norm,
            self.a_bar_norm,
            f64::from(self.opened_app),
            1.0,
        ]
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != ORALYTICS_STATE_DIM {
            return Err(Error::rejected(format!("oralytics state must have 5 entries, got {}", values.len())));
        }
        let ctx = Self {
            time_of_day: binary(values[0], "time_of_day")?,
            b_bar_norm: values[1],
            a_bar_norm: values[2],
            opened_app: binary(values[3], "opened_app")?,
        };
        if values[4] != 1.0 {
            return Err(Error::rejected("oralytics intercept must be exactly 1"));
        }
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_of_day > 1 || self.opened_app > 1 {
            return Err(Error::rejected("binary context feature out of range"));
        }
        for v in [self.b_bar_norm, self.a_bar_norm] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::rejected(format!("normalized average {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

fn binary(v: f64, name: &str) -> Result<u8> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::rejected(format!("{name} must be 0 or 1, got {v}")))
    }
}

/// Unnormalized exponential averages (b̄ seconds, ā fraction) over a
/// most-recent-first history, zero-padding anything before trial entry.
pub fn oralytics_averages(history: &[HistoryPoint]) -> (f64, f64) {
    let mut q = [0.0; HISTORY_WINDOW];
    let mut a = [0.0; HISTORY_WINDOW];
    for (i, p) in history.iter().take(HISTORY_WINDOW).enumerate() {
        q[i] = p.quality.min(MAX_QUALITY_SECS);
        a[i] = f64::from(p.action);
    }
    let b_bar = exp_average(&q, ORALYTICS_GAMMA).expect("fixed-size window");
    let a_bar = exp_average(&a, ORALYTICS_GAMMA).expect("fixed-size window");
    (b_bar, a_bar)
}

pub fn build_context_oralytics(history: &[HistoryPoint], time_of_day: u8, opened_app_prior_day: u8) -> OralyticsContext {
    let (b_bar, a_bar) = oralytics_averages(history);
    OralyticsContext {
        time_of_day: time_of_day.min(1),
        b_bar_norm: normalize_b_bar(b_bar),
        a_bar_norm: normalize_a_bar(a_bar),
        opened_app: opened_app_prior_day.min(1),
    }
}

/// `[S, π·S, (A − π)·S]`.
pub fn feature_map_oralytics(context: &OralyticsContext, action: u8, pi: f64) -> [f64; ORALYTICS_PARAM_DIM] {
    let s = context.to_array();
    let centered = f64::from(action) - pi;
    let mut phi = [0.0; ORALYTICS_PARAM_DIM];
    for (i, v) in s.iter().enumerate() {
        phi[i] = *v;
        phi[ORALYTICS_STATE_DIM + i] = pi * v;
        phi[2 * ORALYTICS_STATE_DIM + i] = centered * v;
    }
    phi
}

/// MiWaves binary state (engagement, time of day, cannabis use).
///
/// `cannabis` is 1 for the favourable "not using" report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MiwavesState {
    pub engagement: u8,
    pub time_of_day: u8,
    pub cannabis: u8,
}

impl MiwavesState {
    pub fn new(engagement: u8, time_of_day: u8, cannabis: u8) -> Result<Self> {
        let state = Self {
            engagement,
            time_of_day,
            cannabis,
        };
        if engagement > 1 || time_of_day > 1 || cannabis > 1 {
            return Err(Error::rejected("miwaves state features must be binary"));
        }
        Ok(state)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [
            f64::from(self.engagement),
            f64::from(self.time_of_day),
            f64::from(self.cannabis),
        ]
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != 3 {
            return Err(Error::rejected("miwaves state must have 3 entries"));
        }
        Self::new(
            binary(values[0], "s1")?,
            binary(values[1], "s2")?,
            binary(values[2], "s3")?,
        )
    }
}

/// `[1, s1, s2, s3, s1s2, s2s3, s1s3, s1s2s3]`; the same map serves as g and f.
pub fn feature_map_miwaves(state: &MiwavesState) -> [f64; MIWAVES_FEATURE_DIM] {
    let [s1, s2, s3] = state.to_array();
    [1.0, s1, s2, s3, s1 * s2, s2 * s3, s1 * s3, s1 * s2 * s3]
}

/// Design row `[g(s), (A − π)·f(s), π·f(s)]` for the mixed model.
pub fn design_row_miwaves(state: &MiwavesState, action: u8, pi: f64) -> [f64; MIWAVES_PARAM_DIM] {
    let f = feature_map_miwaves(state);
    let centered = f64::from(action) - pi;
    let mut phi = [0.0; MIWAVES_PARAM_DIM];
    for (i, v) in f.iter().enumerate() {
        phi[i] = *v;
        phi[MIWAVES_FEATURE_DIM + i] = centered * v;
        phi[2 * MIWAVES_FEATURE_DIM + i] = pi * v;
    }
    phi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_average_zero_and_constant() {
        assert_eq!(exp_average(&[0.0; 14], ORALYTICS_GAMMA).unwrap(), 0.0);
        let q = 97.25;
        let v = exp_average(&[q; 14], ORALYTICS_GAMMA).unwrap();
        assert!((v - q).abs() < 1e-12);
    }

    #[test]
    fn exp_average_leading_spike_matches_direct_weight_sum() {
        // direct summation of the 14 weights, independent of the closed form
        let gamma = ORALYTICS_GAMMA;
        let mut total = 0.0;
        for j in 0..14 {
            total += gamma.powi(j);
        }
        let c_direct = 1.0 / total;
        let c_closed = (1.0 - gamma) / (1.0 - gamma.powi(14));
        assert!((c_direct - c_closed).abs() < 1e-15);

        let mut v = [0.0; 14];
        v[0] = 180.0;
        let got = exp_average(&v, gamma).unwrap();
        assert!((got - 180.0 * c_direct).abs() < 1e-12);
        // frozen: 180 · c_γ for γ = 13/14
        assert!((got - 19.913_033_902_350_946).abs() < 1e-9, "{got}");
    }

    #[test]
    fn exp_average_rejects_bad_input() {
        assert!(matches!(exp_average(&[1.0; 13], 0.5), Err(Error::RejectedInput(_))));
        assert!(exp_average(&[1.0; 14], 1.0).is_err());
        assert!(exp_average(&[1.0; 14], 0.0).is_err());
    }

    #[test]
    fn cold_start_context() {
        let ctx = build_context_oralytics(&[], 0, 0);
        assert_eq!(ctx.to_array(), [0.0, -1.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn saturated_history_hits_upper_endpoints() {
        let hist = vec![HistoryPoint { quality: 180.0, action: 1 }; 14];
        let ctx = build_context_oralytics(&hist, 1, 1);
        assert!((ctx.b_bar_norm - 1.0).abs() < 1e-12);
        assert!((ctx.a_bar_norm - 1.0).abs() < 1e-12);
        let arr = ctx.to_array();
        assert_eq!(arr[0], 1.0);
        assert_eq!(arr[4], 1.0);
    }

    #[test]
    fn quality_above_cap_is_truncated_in_average() {
        let hist = vec![HistoryPoint { quality: 400.0, action: 0 }; 14];
        let ctx = build_context_oralytics(&hist, 0, 0);
        assert!((ctx.b_bar_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oralytics_feature_map_blocks() {
        let intercept_only = OralyticsContext {
            time_of_day: 0,
            b_bar_norm: 0.0,
            a_bar_norm: 0.0,
            opened_app: 0,
        };
        let phi = feature_map_oralytics(&intercept_only, 1, 0.5);
        let expected = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5];
        assert_eq!(phi, expected);

        let ctx = OralyticsContext {
            time_of_day: 1,
            b_bar_norm: 0.3,
            a_bar_norm: -0.4,
            opened_app: 1,
        };
        let phi = feature_map_oralytics(&ctx, 0, 0.2);
        let s = ctx.to_array();
        for i in 0..5 {
            assert!((phi[10 + i] + 0.2 * s[i]).abs() < 1e-15);
        }
        // A = π makes the advantage block vanish
        let phi = feature_map_oralytics(&ctx, 1, 1.0);
        assert!(phi[10..15].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn miwaves_feature_map_products() {
        let f = |a, b, c| feature_map_miwaves(&MiwavesState::new(a, b, c).unwrap());
        assert_eq!(f(0, 0, 0), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(f(1, 1, 1), [1.0; 8]);
        assert_eq!(f(1, 0, 1), [1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn context_roundtrip_and_validation() {
        let ctx = OralyticsContext {
            time_of_day: 1,
            b_bar_norm: 0.25,
            a_bar_norm: -0.5,
            opened_app: 0,
        };
        assert_eq!(OralyticsContext::from_slice(&ctx.to_array()).unwrap(), ctx);
        assert!(OralyticsContext::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.5]).is_err());
        assert!(OralyticsContext::from_slice(&[2.0, 0.0, 0.0, 0.0, 1.0]).is_err());
        assert!(MiwavesState::new(2, 0, 0).is_err());
    }
}
