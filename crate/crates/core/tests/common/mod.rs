//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use trialwatch_core::clock::Slot;
use trialwatch_core::decision::{rho, ProfileKind, RhoParams};
use trialwatch_core::faults::{FaultEntry, FaultKind, FaultParams, FaultPlan, SlotRef};
use trialwatch_core::sentinel::Severity;
use trialwatch_core::sim::{RunConfig, Simulation};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// A Aᵀ/n + floor·I with standard-normal A: comfortably positive definite.
pub fn random_spd(rng: &mut impl Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a * a.transpose()) * (scale / n as f64) + DMatrix::identity(n, n) * floor
}

/// Gaussian conditioning in covariance form: for R = Φθ + ε with
/// θ ~ N(μ, Σ) and ε ~ N(0, σ²I), returns the law of θ | R.
///
/// Never forms a precision matrix, so it shares no algebra with the
/// information-form updates under test.
pub fn condition_on_observations(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    r: &DVector<f64>,
    sigma2: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    if phi.nrows() == 0 {
        return (mu.clone(), sigma.clone());
    }
    let cross = sigma * phi.transpose();
    let s = phi * &cross + DMatrix::identity(phi.nrows(), phi.nrows()) * sigma2;
    let s_inv = s.lu().try_inverse().expect("innovation covariance is invertible");
    let gain = &cross * s_inv;
    let mean = mu + &gain * (r - phi * mu);
    let cov = sigma - &gain * cross.transpose();
    (mean, cov)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Monte Carlo E[ρ(sᵀβ)] with β ~ N(μ, Σ), drawn through a Cholesky factor
/// in antithetic pairs; `draws` counts individual draws.
pub fn monte_carlo_smooth(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    s: &DVector<f64>,
    params: &RhoParams,
    draws: usize,
    rng: &mut impl Rng,
) -> f64 {
    let l = sigma.clone().cholesky().expect("covariance is positive definite").l();
    let ls = l.transpose() * s;
    let centre = s.dot(mu);
    let mut acc = 0.0;
    for _ in 0..draws / 2 {
        let z = normal_vec(rng, mu.len());
        let dev = ls.dot(&z);
        acc += rho(centre + dev, params) + rho(centre - dev, params);
    }
    acc / (2 * (draws / 2)) as f64
}

/// Short trial used by the per-kind fixtures.
pub fn short_config(profile: ProfileKind) -> RunConfig {
    let mut cfg = RunConfig::new(profile);
    cfg.participants = 10;
    cfg.trial_days = Some(21);
    cfg
}

pub const FIXTURE_DAY: u32 = 10;
pub const FIXTURE_PARTICIPANT: &str = "P005";

/// One fault of `kind` on the fixture day, scoped the way it happens in
/// practice: infrastructure faults hit everyone, data faults one participant.
pub fn isolated_entry(kind: FaultKind) -> FaultEntry {
    use FaultKind::*;
    match kind {
        RlCrash | DbConnLoss => FaultEntry::new(kind).on_day(FIXTURE_DAY),
        RequestThrottle => FaultEntry::new(kind).on_day(FIXTURE_DAY).with_params(FaultParams {
            cap: Some(5),
            ..FaultParams::default()
        }),
        OomPressure => FaultEntry::new(kind)
            .during(
                SlotRef::at(FIXTURE_DAY + 3, Slot::Morning),
                SlotRef::at(FIXTURE_DAY + 4, Slot::Evening),
            )
            .with_params(FaultParams {
                peak: Some(1.05),
                ramp_ticks: Some(2),
                cap: None,
            }),
        _ => FaultEntry::new(kind).for_participant(FIXTURE_PARTICIPANT).on_day(FIXTURE_DAY),
    }
}

pub fn plan_of(entries: Vec<FaultEntry>) -> FaultPlan {
    FaultPlan {
        name: None,
        entries,
        random: None,
    }
}

pub const ALL_KINDS: [FaultKind; 13] = [
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

/// Codes each fault kind must raise when injected alone, beyond the ones a
/// fault-free run raises. Built by hand from the two trials' issue tables,
/// not from the classifier.
///
/// G-RESTART follows every outage the service recovers from; G-AUDIT
/// follows a dropped save because the audit finds the missing row.
pub fn expected_codes(profile: ProfileKind, kind: FaultKind) -> &'static [&'static str] {
    use FaultKind::*;
    match profile {
        ProfileKind::Oralytics => match kind {
            EndpointFail => &["Y1"],
            ResponseUnparseable => &["Y2"],
            MalformedData => &["Y3"],
            EmptyData => &["Y4"],
            DuplicateData => &["Y3"],
            RlCrash => &["G-RESTART", "Y1"],
            DbConnLoss => &["Y5"],
            DbSaveError => &["G-AUDIT", "R3"],
            OomPressure => &["G-RESTART", "MEM", "Y6"],
            BlankSchedule => &["G-BLANK"],
            RosterDesync => &["RD"],
            TimezoneSkip => &["Y4"],
            RequestThrottle => &["Y1"],
        },
        ProfileKind::Miwaves => match kind {
            EndpointFail => &["316"],
            ResponseUnparseable => &["320"],
            MalformedData => &["202"],
            EmptyData => &["317"],
            DuplicateData => &["318"],
            RlCrash => &["207", "G-RESTART"],
            DbConnLoss => &["206"],
            DbSaveError => &["321", "G-AUDIT"],
            OomPressure => &["402", "G-RESTART", "MEM"],
            // no schedules are delivered to the app in this trial
            BlankSchedule => &[],
            RosterDesync => &["319", "RD"],
            TimezoneSkip => &["317"],
            RequestThrottle => &["316"],
        },
    }
}

/// Dosage codes depend on which actions happened to be drawn, so any fault
/// that perturbs the random stream can move them; they are compared
/// separately from the fault-driven codes.
pub fn is_dosage_code(profile: ProfileKind, code: &str) -> bool {
    match profile {
        ProfileKind::Oralytics => matches!(code, "R1" | "R2"),
        ProfileKind::Miwaves => matches!(code, "R1" | "R2" | "R3" | "R4"),
    }
}

pub fn code_set(sim: &Simulation) -> BTreeSet<String> {
    sim.issues().iter().map(|i| i.code.to_string()).collect()
}

pub fn alerting(sim: &Simulation) -> usize {
    sim.issues().iter().filter(|i| i.severity != Severity::Green).count()
}
