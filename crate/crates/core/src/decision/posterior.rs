//! Conjugate Gaussian posterior updates.
//!
//! Oralytics uses Bayesian linear regression over a single 15-dim parameter
//! vector. MiWaves uses a linear mixed model: each participant's 24-dim
//! parameter is θ_i = θ_pop + u_i, which induces the stacked prior
//! N(μ_stacked, Σ̃) with Σ_θ + Σ_u on the diagonal blocks and Σ_θ off it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::profile::{PriorSpec, MIWAVES_FEATURE_DIM, MIWAVES_PARAM_DIM, ORALYTICS_PARAM_DIM, ORALYTICS_STATE_DIM};
use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, spd_inverse, symmetrize};

/// One (feature row, reward) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub phi: Vec<f64>,
    pub reward: f64,
}

impl Observation {
    pub fn new(phi: impl Into<Vec<f64>>, reward: f64) -> Self {
        Self { phi: phi.into(), reward }
    }
}

/// Total order on observations so every update sums in the same sequence
/// regardless of how the batch was assembled.
fn canonical_cmp(a: &Observation, b: &Observation) -> Ordering {
    for (x, y) in a.phi.iter().zip(&b.phi) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            other => return other,
        }
    }
    a.phi.len().cmp(&b.phi.len()).then(a.reward.total_cmp(&b.reward))
}

fn canonical_order(batch: &[Observation]) -> Vec<&Observation> {
    let mut sorted: Vec<&Observation> = batch.iter().collect();
    sorted.sort_by(|a, b| canonical_cmp(a, b));
    sorted
}

/// Accumulates Σ φφᵀ and Σ φ r.
fn gram(batch: &[&Observation], dim: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for obs in batch {
        if obs.phi.len() != dim {
            return Err(Error::rejected(format!(
                "feature row has dimension {}, expected {dim}",
                obs.phi.len()
            )));
        }
        if !obs.reward.is_finite() || obs.phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::rejected("non-finite value in update batch"));
        }
        for i in 0..dim {
            let pi = obs.phi[i];
            if pi == 0.0 {
                continue;
            }
            b[i] += pi * obs.reward;
            for j in 0..dim {
                a[(i, j)] += pi * obs.phi[j];
            }
        }
    }
    Ok((a, b))
}

/// An indexed Oralytics policy. `policy_idx` 0 is the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub policy_idx: u32,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub updated_at: Timestamp,
}

impl PosteriorState {
    pub fn prior(spec: &PriorSpec, at: Timestamp) -> Self {
        Self {
            policy_idx: 0,
            mu: spec.mean.clone(),
            sigma: spec.cov.clone(),
            updated_at: at,
        }
    }

    /// Marginal of the advantage coefficients β (last block of five).
    pub fn advantage_block(&self) -> (DVector<f64>, DMatrix<f64>) {
        let start = 2 * ORALYTICS_STATE_DIM;
        let n = ORALYTICS_STATE_DIM;
        (
            self.mu.rows(start, n).into_owned(),
            self.sigma.view((start, start), (n, n)).into_owned(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !is_symmetric(&self.sigma, 1e-10) {
            return Err(Error::config("posterior covariance is not symmetric"));
        }
        let min_eig = min_eigenvalue(&self.sigma);
        if min_eig <= 0.0 {
            return Err(Error::Numerical {
                message: "posterior covariance is not positive definite".into(),
                min_eigenvalue: min_eig,
            });
        }
        Ok(())
    }
}

/// Σ_post = (Σ₀⁻¹ + ΦᵀΦ/σ²)⁻¹, μ_post = Σ_post(Σ₀⁻¹μ₀ + ΦᵀR/σ²).
///
/// The result carries `prior.policy_idx + 1`; callers that always condition
/// the original prior on the full history overwrite the index afterwards.
pub fn posterior_update_blr(
    prior: &PosteriorState,
    batch: &[Observation],
    sigma2: f64,
    at: Timestamp,
) -> Result<PosteriorState> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::rejected(format!("noise variance must be > 0, got {sigma2}")));
    }
    let dim = prior.mu.len();
    if prior.sigma.shape() != (dim, dim) {
        return Err(Error::rejected("prior mean and covariance dimensions disagree"));
    }
    let prior_precision = spd_inverse(&prior.sigma, "prior covariance").map_err(|e| match e {
        Error::Numerical { message, .. } => Error::Configuration(message),
        other => other,
    })?;
    let (a, b) = gram(&canonical_order(batch), dim)?;
    let precision = &prior_precision + a / sigma2;
    let sigma = spd_inverse(&precision, "posterior precision")?;
    let mu = &sigma * (&prior_precision * &prior.mu + b / sigma2);
    Ok(PosteriorState {
        policy_idx: prior.policy_idx + 1,
        mu,
        sigma,
        updated_at: at,
    })
}

/// Joint posterior over every rostered participant's θ_i.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPosteriorState {
    pub policy_idx: u32,
    pub participant_ids: Vec<String>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub updated_at: Timestamp,
    /// Posterior of θ_pop, available whenever Σ̃ is invertible.
    pub population: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl JointPosteriorState {
    /// The prior joint over `roster` (policy 0).
    pub fn prior(prior: &PriorSpec, roster: &[String], sigma_u: &DMatrix<f64>, at: Timestamp) -> Result<Self> {
        check_roster(roster)?;
        Ok(Self {
            policy_idx: 0,
            participant_ids: roster.to_vec(),
            mu: stacked_mean(prior, roster.len()),
            sigma: stacked_prior_cov(prior, sigma_u, roster.len()),
            updated_at: at,
            population: Some((prior.mean.clone(), prior.cov.clone())),
        })
    }

    pub fn position(&self, participant: &str) -> Option<usize> {
        self.participant_ids.iter().position(|p| p == participant)
    }

    pub fn participant_block(&self, participant: &str) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let i = self.position(participant)?;
        let d = MIWAVES_PARAM_DIM;
        Some((
            self.mu.rows(i * d, d).into_owned(),
            self.sigma.view((i * d, i * d), (d, d)).into_owned(),
        ))
    }

    /// Marginal of participant's advantage coefficients β_i.
    pub fn advantage_marginal(&self, participant: &str) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let (mu, sigma) = self.participant_block(participant)?;
        Some(advantage_of_block(&mu, &sigma))
    }
}

/// β sub-block of a single participant's 24-dim θ.
pub fn advantage_of_block(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let s = MIWAVES_FEATURE_DIM;
    (
        mu.rows(s, s).into_owned(),
        sigma.view((s, s), (s, s)).into_owned(),
    )
}

impl JointPosteriorState {
    /// θ marginal for any participant. Participants outside the last update
    /// are a fresh draw θ_pop + u: the population posterior (or the prior
    /// when it is unavailable) widened by Σ_u.
    pub fn marginal_for(
        &self,
        participant: &str,
        prior: &PriorSpec,
        sigma_u: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        if let Some(block) = self.participant_block(participant) {
            return block;
        }
        let (mean, cov) = match &self.population {
            Some((m, c)) => (m.clone(), c.clone()),
            None => (prior.mean.clone(), prior.cov.clone()),
        };
        (mean, cov + sigma_u)
    }
}

fn check_roster(roster: &[String]) -> Result<()> {
    let unique: BTreeSet<&String> = roster.iter().collect();
    if unique.len() != roster.len() {
        return Err(Error::rejected("roster contains duplicate participant ids"));
    }
    Ok(())
}

pub fn stacked_mean(prior: &PriorSpec, m: usize) -> DVector<f64> {
    let d = prior.dim();
    let mut mu = DVector::zeros(d * m);
    for i in 0..m {
        mu.rows_mut(i * d, d).copy_from(&prior.mean);
    }
    mu
}

/// Σ̃: Σ_θ + Σ_u on diagonal blocks, Σ_θ elsewhere.
pub fn stacked_prior_cov(prior: &PriorSpec, sigma_u: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let d = prior.dim();
    let mut s = DMatrix::zeros(d * m, d * m);
    for i in 0..m {
        for j in 0..m {
            let mut block = s.view_mut((i * d, j * d), (d, d));
            block.copy_from(&prior.cov);
            if i == j {
                block += sigma_u;
            }
        }
    }
    s
}

/// μ_post = (Σ̃⁻¹ + A/σ²)⁻¹(Σ̃⁻¹μ_θ + B/σ²), Σ_post = (Σ̃⁻¹ + A/σ²)⁻¹.
///
/// Every batch key must be on the roster; rostered participants without
/// data contribute zero blocks to A and B. When Σ̃ is only semidefinite
/// (e.g. Σ_u = 0) the same posterior is computed through the push-through
/// form (I + Σ̃A/σ²)⁻¹, which never inverts Σ̃.
pub fn posterior_update_mixed(
    prior: &PriorSpec,
    roster: &[String],
    batches: &BTreeMap<String, Vec<Observation>>,
    sigma2_eps: f64,
    sigma_u: &DMatrix<f64>,
    policy_idx: u32,
    at: Timestamp,
) -> Result<JointPosteriorState> {
    if !(sigma2_eps.is_finite() && sigma2_eps > 0.0) {
        return Err(Error::rejected(format!("noise variance must be > 0, got {sigma2_eps}")));
    }
    let d = prior.dim();
    if d != MIWAVES_PARAM_DIM || prior.cov.shape() != (d, d) {
        return Err(Error::rejected(format!("mixed-model prior must be {MIWAVES_PARAM_DIM}-dimensional")));
    }
    if sigma_u.shape() != (d, d) {
        return Err(Error::rejected("random-effects covariance has wrong shape"));
    }
    check_roster(roster)?;
    let unknown: Vec<&String> = batches.keys().filter(|k| !roster.contains(k)).collect();
    if !unknown.is_empty() {
        return Err(Error::RosterDesync(format!(
            "update batch contains participants missing from the roster: {unknown:?}"
        )));
    }

    let m = roster.len();
    let n = d * m;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for (i, pid) in roster.iter().enumerate() {
        if let Some(rows) = batches.get(pid) {
            let (ai, bi) = gram(&canonical_order(rows), d)?;
            a.view_mut((i * d, i * d), (d, d)).copy_from(&ai);
            b.rows_mut(i * d, d).copy_from(&bi);
        }
    }

    let mu0 = stacked_mean(prior, m);
    let cov0 = stacked_prior_cov(prior, sigma_u, m);

    let (mu, mut sigma, population) = match spd_inverse(&cov0, "stacked prior covariance") {
        Ok(cov0_inv) => {
            let precision = &cov0_inv + &a / sigma2_eps;
            let sigma = spd_inverse(&precision, "joint posterior precision")?;
            let mu = &sigma * (&cov0_inv * &mu0 + &b / sigma2_eps);
            let population = population_posterior(prior, m, &cov0_inv, &mu, &mu0, &sigma);
            (mu, sigma, Some(population))
        }
        Err(Error::Numerical { min_eigenvalue, .. }) => {
            let scale = cov0.amax().max(1.0);
            if min_eigenvalue < -1e-9 * scale {
                return Err(Error::Numerical {
                    message: "stacked prior covariance is not positive semidefinite".into(),
                    min_eigenvalue,
                });
            }
            let system = DMatrix::identity(n, n) + &cov0 * &a / sigma2_eps;
            let lu = system.lu();
            let rhs_mu = &mu0 + &cov0 * &b / sigma2_eps;
            let mu = lu.solve(&rhs_mu).ok_or_else(|| Error::Numerical {
                message: "push-through system is singular".into(),
                min_eigenvalue,
            })?;
            let sigma = lu.solve(&cov0).ok_or_else(|| Error::Numerical {
                message: "push-through system is singular".into(),
                min_eigenvalue,
            })?;
            (mu, sigma, None)
        }
        Err(other) => return Err(other),
    };
    symmetrize(&mut sigma);

    Ok(JointPosteriorState {
        policy_idx,
        participant_ids: roster.to_vec(),
        mu,
        sigma,
        updated_at: at,
        population,
    })
}

/// θ_pop is conditionally independent of the data given the stacked θ, so
/// its posterior follows from the prior regression of θ_pop on θ_stacked.
fn population_posterior(
    prior: &PriorSpec,
    m: usize,
    cov0_inv: &DMatrix<f64>,
    mu_post: &DVector<f64>,
    mu0: &DVector<f64>,
    sigma_post: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = prior.dim();
    let mut cross = DMatrix::zeros(d, d * m);
    for i in 0..m {
        cross.view_mut((0, i * d), (d, d)).copy_from(&prior.cov);
    }
    let gain = &cross * cov0_inv;
    let mean = &prior.mean + &gain * (mu_post - mu0);
    let mut cov = &prior.cov - &gain * cross.transpose() + &gain * sigma_post * gain.transpose();
    symmetrize(&mut cov);
    (mean, cov)
}

/// Recover participant-level θ blocks from a joint state, in roster order.
pub fn participant_blocks(state: &JointPosteriorState) -> Vec<(String, DVector<f64>, DMatrix<f64>)> {
    state
        .participant_ids
        .iter()
        .filter_map(|p| state.participant_block(p).map(|(m, s)| (p.clone(), m, s)))
        .collect()
}

/// Oralytics parameter dimension sanity check for externally supplied posteriors.
pub fn check_oralytics_dims(state: &PosteriorState) -> Result<()> {
    if state.mu.len() != ORALYTICS_PARAM_DIM || state.sigma.shape() != (ORALYTICS_PARAM_DIM, ORALYTICS_PARAM_DIM) {
        return Err(Error::rejected("oralytics posterior must be 15-dimensional"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ts() -> Timestamp {
        Timestamp(NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap())
    }

    fn one_dim_prior() -> PosteriorState {
        PosteriorState {
            policy_idx: 0,
            mu: DVector::from_element(1, 0.0),
            sigma: DMatrix::from_element(1, 1, 1.0),
            updated_at: ts(),
        }
    }

    /// Grid-discretized Bayes rule for the scalar model r = θφ + ε.
    fn grid_posterior(prior_mean: f64, prior_var: f64, obs: &[(f64, f64)], sigma2: f64) -> (f64, f64) {
        let (lo, hi, n) = (-12.0, 12.0, 240_001);
        let h = (hi - lo) / (n - 1) as f64;
        let mut mass = 0.0;
        let mut first = 0.0;
        let mut second = 0.0;
        for k in 0..n {
            let theta = lo + h * k as f64;
            let mut logp = -0.5 * (theta - prior_mean).powi(2) / prior_var;
            for (phi, r) in obs {
                logp -= 0.5 * (r - theta * phi).powi(2) / sigma2;
            }
            let p = logp.exp();
            mass += p;
            first += p * theta;
            second += p * theta * theta;
        }
        let mean = first / mass;
        (mean, second / mass - mean * mean)
    }

    #[test]
    fn scalar_conjugate_update_matches_grid() {
        let post = posterior_update_blr(&one_dim_prior(), &[Observation::new(vec![1.0], 1.0)], 1.0, ts()).unwrap();
        assert!((post.mu[0] - 0.5).abs() < 1e-12);
        assert!((post.sigma[(0, 0)] - 0.5).abs() < 1e-12);
        assert_eq!(post.policy_idx, 1);

        let (gm, gv) = grid_posterior(0.0, 1.0, &[(1.0, 1.0)], 1.0);
        assert!((gm - 0.5).abs() < 1e-6);
        assert!((gv - 0.5).abs() < 1e-6);
    }

    #[test]
    fn empty_batch_is_identity() {
        let prior = PosteriorState::prior(&PriorSpec::isotropic(15, 25.0), ts());
        let post = posterior_update_blr(&prior, &[], 1600.0, ts()).unwrap();
        assert_eq!(post.policy_idx, 1);
        assert!((&post.mu - &prior.mu).amax() < 1e-12);
        assert!((&post.sigma - &prior.sigma).amax() < 1e-12);
    }

    #[test]
    fn covariance_shrinks_in_loewner_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = PosteriorState::prior(&PriorSpec::isotropic(15, 25.0), ts());
        let batch: Vec<Observation> = (0..40)
            .map(|_| Observation::new((0..15).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(), rng.random_range(0.0..180.0)))
            .collect();
        let post = posterior_update_blr(&prior, &batch, 1600.0, ts()).unwrap();
        let diff = &prior.sigma - &post.sigma;
        assert!(min_eigenvalue(&diff) > -1e-10);
        post.validate().unwrap();
    }

    #[test]
    fn non_pd_prior_is_configuration_error() {
        let mut prior = one_dim_prior();
        prior.sigma[(0, 0)] = -1.0;
        assert!(matches!(
            posterior_update_blr(&prior, &[], 1.0, ts()),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = posterior_update_blr(&one_dim_prior(), &[Observation::new(vec![1.0, 2.0], 1.0)], 1.0, ts());
        assert!(matches!(err, Err(Error::RejectedInput(_))));
    }

    fn ids(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("P{i:03}")).collect()
    }

    #[test]
    fn mixed_no_data_returns_stacked_prior() {
        let prior = PriorSpec::isotropic(24, 4.0);
        let su = DMatrix::identity(24, 24) * 0.5;
        let post = posterior_update_mixed(&prior, &ids(3), &BTreeMap::new(), 1.0, &su, 1, ts()).unwrap();
        assert!((&post.mu - stacked_mean(&prior, 3)).amax() < 1e-10);
        assert!((&post.sigma - stacked_prior_cov(&prior, &su, 3)).amax() < 1e-9);
    }

    #[test]
    fn mixed_zero_random_effects_share_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = PriorSpec::isotropic(24, 2.0);
        let su = DMatrix::zeros(24, 24);
        let roster = ids(3);
        let mut batches = BTreeMap::new();
        for pid in &roster[..2] {
            let rows: Vec<Observation> = (0..4)
                .map(|_| Observation::new((0..24).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(), rng.random_range(0.0..3.0)))
                .collect();
            batches.insert(pid.clone(), rows);
        }
        let post = posterior_update_mixed(&prior, &roster, &batches, 1.0, &su, 1, ts()).unwrap();
        assert!(post.population.is_none());
        let (m0, s0) = post.participant_block(&roster[0]).unwrap();
        for pid in &roster[1..] {
            let (m, s) = post.participant_block(pid).unwrap();
            assert!((&m - &m0).amax() < 1e-9);
            assert!((&s - &s0).amax() < 1e-9);
        }
    }

    #[test]
    fn mixed_unknown_participant_is_roster_desync() {
        let prior = PriorSpec::isotropic(24, 1.0);
        let su = DMatrix::identity(24, 24);
        let mut batches = BTreeMap::new();
        batches.insert("ghost".to_string(), vec![Observation::new(vec![0.0; 24], 1.0)]);
        let err = posterior_update_mixed(&prior, &ids(2), &batches, 1.0, &su, 1, ts());
        assert!(matches!(err, Err(Error::RosterDesync(_))));
    }

    #[test]
    fn mixed_indefinite_random_effects_is_numerical_error() {
        let prior = PriorSpec::isotropic(24, 1.0);
        let su = DMatrix::identity(24, 24) * -2.0;
        let err = posterior_update_mixed(&prior, &ids(2), &BTreeMap::new(), 1.0, &su, 1, ts());
        assert!(matches!(err, Err(Error::Numerical { .. })));
    }

    #[test]
    fn population_posterior_of_prior_is_prior() {
        let prior = PriorSpec::isotropic(24, 3.0);
        let su = DMatrix::identity(24, 24);
        let post = posterior_update_mixed(&prior, &ids(2), &BTreeMap::new(), 1.0, &su, 1, ts()).unwrap();
        let (pm, pc) = post.population.unwrap();
        assert!((&pm - &prior.mean).amax() < 1e-10);
        assert!((&pc - &prior.cov).amax() < 1e-9);
    }
}
