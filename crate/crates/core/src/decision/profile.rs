//! Trial profiles and the hyperparameters that parameterize each RL algorithm.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Oralytics feature dimension (time of day, b̄, ā, app engagement, intercept).
pub const ORALYTICS_STATE_DIM: usize = 5;
/// Oralytics reward-model dimension: baseline, π-weighted and advantage blocks.
pub const ORALYTICS_PARAM_DIM: usize = 3 * ORALYTICS_STATE_DIM;
/// MiWaves feature-map dimension.
pub const MIWAVES_FEATURE_DIM: usize = 8;
/// MiWaves per-participant parameter dimension θ_i = [α, β, γ].
pub const MIWAVES_PARAM_DIM: usize = 3 * MIWAVES_FEATURE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Oralytics,
    #[serde(alias = "MiWaves")]
    Miwaves,
}

impl ProfileKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileKind::Oralytics => "oralytics",
            ProfileKind::Miwaves => "miwaves",
        }
    }
}

impl std::fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateCadence {
    Weekly,
    Daily,
}

/// Generalized logistic ρ(x) = L_min + (L_max − L_min) / [1 + c·exp(−b·x)]^k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoParams {
    pub l_min: f64,
    pub l_max: f64,
    pub b: f64,
    pub c: f64,
    pub k: f64,
}

impl Default for RhoParams {
    fn default() -> Self {
        Self {
            l_min: 0.2,
            l_max: 0.8,
            b: 1.0,
            c: 1.0,
            k: 1.0,
        }
    }
}

impl RhoParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.l_min && self.l_min < self.l_max && self.l_max < 1.0) {
            return Err(Error::config(format!(
                "rho asymptotes must satisfy 0 < l_min < l_max < 1, got {} / {}",
                self.l_min, self.l_max
            )));
        }
        for (name, v) in [("b", self.b), ("c", self.c), ("k", self.k)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("rho parameter {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Parameters of the Oralytics prompt cost term.
///
/// The three thresholds are on the normalized [−1, 1] feature scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub xi1: f64,
    pub xi2: f64,
    pub b_thresh: f64,
    pub a1_thresh: f64,
    pub a2_thresh: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            xi1: 100.0,
            xi2: 100.0,
            b_thresh: 0.5,
            a1_thresh: 0.5,
            a2_thresh: 0.8,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.xi1, self.xi2, self.b_thresh, self.a1_thresh, self.a2_thresh];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("cost parameters must be finite"));
        }
        if self.xi1 < 0.0 || self.xi2 < 0.0 {
            return Err(Error::config("cost weights xi1/xi2 must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PriorSpec {
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim) * variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Everything that distinguishes the two trials' decision services.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialProfile {
    pub kind: ProfileKind,
    pub decision_points_per_day: u32,
    pub trial_length_days: u32,
    pub update_cadence: UpdateCadence,
    pub rho: RhoParams,
    /// Only used by Oralytics.
    pub cost: Option<CostParams>,
    pub prior: PriorSpec,
    pub noise_variance: f64,
    /// Σ_u; only used by MiWaves.
    pub random_effects_cov: Option<DMatrix<f64>>,
}

impl TrialProfile {
    pub fn oralytics() -> Self {
        Self {
            kind: ProfileKind::Oralytics,
            decision_points_per_day: 2,
            trial_length_days: 70,
            update_cadence: UpdateCadence::Weekly,
            rho: RhoParams::default(),
            cost: Some(CostParams::default()),
            prior: PriorSpec::isotropic(ORALYTICS_PARAM_DIM, 25.0),
            noise_variance: 40.0 * 40.0,
            random_effects_cov: None,
        }
    }

    pub fn miwaves() -> Self {
        Self {
            kind: ProfileKind::Miwaves,
            decision_points_per_day: 2,
            trial_length_days: 30,
            update_cadence: UpdateCadence::Daily,
            rho: RhoParams::default(),
            cost: None,
            prior: PriorSpec::isotropic(MIWAVES_PARAM_DIM, 25.0),
            noise_variance: 1.0,
            random_effects_cov: Some(DMatrix::identity(MIWAVES_PARAM_DIM, MIWAVES_PARAM_DIM)),
        }
    }

    pub fn for_kind(kind: ProfileKind) -> Self {
        match kind {
            ProfileKind::Oralytics => Self::oralytics(),
            ProfileKind::Miwaves => Self::miwaves(),
        }
    }

    /// Decision points per participant over the whole trial.
    pub fn horizon(&self) -> u32 {
        self.trial_length_days * self.decision_points_per_day
    }

    pub fn validate(&self) -> Result<()> {
        self.rho.validate()?;
        if !(self.noise_variance.is_finite() && self.noise_variance > 0.0) {
            return Err(Error::config("noise variance must be > 0"));
        }
        let expected_dim = match self.kind {
            ProfileKind::Oralytics => ORALYTICS_PARAM_DIM,
            ProfileKind::Miwaves => MIWAVES_PARAM_DIM,
        };
        if self.prior.dim() != expected_dim || self.prior.cov.shape() != (expected_dim, expected_dim) {
            return Err(Error::config(format!(
                "{} prior must have dimension {expected_dim}",
                self.kind
            )));
        }
        match self.kind {
            ProfileKind::Oralytics => {
                self.cost
                    .as_ref()
                    .ok_or_else(|| Error::config("oralytics profile needs cost parameters"))?
                    .validate()?;
            }
            ProfileKind::Miwaves => {
                let su = self
                    .random_effects_cov
                    .as_ref()
                    .ok_or_else(|| Error::config("miwaves profile needs a random-effects covariance"))?;
                if su.shape() != (expected_dim, expected_dim) {
                    return Err(Error::config("random-effects covariance has wrong shape"));
                }
                if !crate::linalg::is_symmetric(su, 1e-10) {
                    return Err(Error::config("random-effects covariance must be symmetric"));
                }
                let min_eig = crate::linalg::min_eigenvalue(su);
                if min_eig < -1e-10 {
                    return Err(Error::Numerical {
                        message: "random-effects covariance is not positive semidefinite".into(),
                        min_eigenvalue: min_eig,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizons_match_trial_designs() {
        assert_eq!(TrialProfile::oralytics().horizon(), 140);
        assert_eq!(TrialProfile::miwaves().horizon(), 60);
    }

    #[test]
    fn defaults_validate() {
        TrialProfile::oralytics().validate().unwrap();
        TrialProfile::miwaves().validate().unwrap();
    }

    #[test]
    fn bad_rho_rejected() {
        let mut p = TrialProfile::oralytics();
        p.rho.l_min = 0.9;
        assert!(p.validate().is_err());
        p.rho = RhoParams { k: 0.0, ..RhoParams::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn indefinite_random_effects_rejected() {
        let mut p = TrialProfile::miwaves();
        let mut su = DMatrix::identity(MIWAVES_PARAM_DIM, MIWAVES_PARAM_DIM);
        su[(3, 3)] = -1.0;
        p.random_effects_cov = Some(su);
        assert!(matches!(p.validate(), Err(Error::Numerical { .. })));
    }
}
