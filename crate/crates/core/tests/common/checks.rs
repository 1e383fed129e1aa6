//! Whole-criterion checks shared by the focused tests and the acceptance
//! report. Each one panics with a readable message on failure.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;
use trialwatch_core::clock::Timestamp;
use trialwatch_core::decision::{posterior_update_mixed, smooth_probability, Observation, PriorSpec};
use trialwatch_core::faults::FaultEntry;
use trialwatch_core::sentinel::audit::{consistency_audit, is_save_failure, Check};
use trialwatch_core::sim::DecisionSource;
use trialwatch_core::store::schema::{
    DATA_EXCLUSIONS, INJECTIONS, PARTICIPANT_DATA, SCHEDULE_PROVENANCE, UPDATE_BATCHES, UPDATE_DATA,
};

pub fn ts() -> Timestamp {
    Timestamp::parse("2024-01-01 00:00:00").unwrap()
}

pub fn run(cfg: RunConfig) -> Simulation {
    let mut sim = Simulation::new(cfg).unwrap();
    sim.run_to_end().unwrap();
    sim
}

/// Full-length trial under the incident-replay plan plus random faults.
pub fn faulted(profile: ProfileKind) -> RunConfig {
    let mut cfg = RunConfig::new(profile);
    cfg.fault_plan = Some("incident-replay".into());
    cfg.random_fault_rate = Some(0.3);
    cfg
}

/// Worst |quadrature − Monte Carlo| over `cases` random posteriors.
pub fn smooth_vs_monte_carlo(cases: usize, draws: usize, seed: u64) -> f64 {
    let params = RhoParams::default();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let dim = r.random_range(1..=5);
        let mu = normal_vec(&mut r, dim) * 0.8;
        let scale = r.random_range(0.05..2.0);
        let sigma = random_spd(&mut r, dim, scale, 1e-3);
        let s = normal_vec(&mut r, dim);
        let exact = smooth_probability(&mu, &sigma, &s, &params).unwrap().prob;
        let mc = monte_carlo_smooth(&mu, &sigma, &s, &params, draws, &mut r);
        worst = worst.max((exact - mc).abs());
    }
    worst
}

/// Joint prior over m participants written out from θ_i = θ_pop + u_i.
fn joint_prior(prior: &PriorSpec, sigma_u: &DMatrix<f64>, m: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = prior.dim();
    let mut mean = DVector::zeros(d * m);
    let mut cov = DMatrix::zeros(d * m, d * m);
    for i in 0..m {
        mean.rows_mut(i * d, d).copy_from(&prior.mean);
        for j in 0..m {
            let block = if i == j { &prior.cov + sigma_u } else { prior.cov.clone() };
            cov.view_mut((i * d, j * d), (d, d)).copy_from(&block);
        }
    }
    (mean, cov)
}

/// Worst relative error of the mixed update against conditioning the joint
/// Gaussian over all participants, as (mean, covariance).
pub fn mixed_vs_joint(instances: usize, d: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let m = r.random_range(1..=3);
        let prior = PriorSpec {
            mean: normal_vec(&mut r, d),
            cov: random_spd(&mut r, d, 1.0, 0.5),
        };
        let sigma_u = random_spd(&mut r, d, 0.3, 0.05);
        let sigma2 = r.random_range(0.5..3.0);
        let roster: Vec<String> = (0..m).map(|i| format!("U{i}")).collect();
        let mut batches = BTreeMap::new();
        let mut rows: Vec<(usize, Vec<f64>, f64)> = Vec::new();
        for (i, pid) in roster.iter().enumerate() {
            let t = r.random_range(0..=4);
            let obs: Vec<Observation> = (0..t)
                .map(|_| {
                    let phi: Vec<f64> = normal_vec(&mut r, d).iter().copied().collect();
                    let reward = r.random_range(-2.0..4.0);
                    rows.push((i, phi.clone(), reward));
                    Observation::new(phi, reward)
                })
                .collect();
            if !obs.is_empty() {
                batches.insert(pid.clone(), obs);
            }
        }
        let got = posterior_update_mixed(&prior, &roster, &batches, sigma2, &sigma_u, 1, ts()).unwrap();

        let (mu0, cov0) = joint_prior(&prior, &sigma_u, m);
        let mut phi = DMatrix::zeros(rows.len(), d * m);
        let mut rew = DVector::zeros(rows.len());
        for (k, (i, row, reward)) in rows.iter().enumerate() {
            for j in 0..d {
                phi[(k, i * d + j)] = row[j];
            }
            rew[k] = *reward;
        }
        let (mu, cov) = condition_on_observations(&mu0, &cov0, &phi, &rew, sigma2);
        worst.0 = worst.0.max(rel_err_vec(&got.mu, &mu));
        worst.1 = worst.1.max(rel_err_mat(&got.sigma, &cov));
    }
    worst
}

/// Every planned kind fired, every active participant has one decision per
/// point, and fallbacks sit at 0.5. Returns the number of fallback decisions.
pub fn check_liveness(sim: &Simulation) -> usize {
    let fired: BTreeSet<String> = sim
        .store()
        .table(INJECTIONS)
        .unwrap()
        .rows()
        .filter_map(|r| r.text("kind").map(str::to_string))
        .collect();
    for kind in sim.plan().kinds() {
        assert!(fired.contains(kind.as_str()), "{kind} never fired");
    }
    let mut fallbacks = 0;
    for p in sim.participants() {
        let start = 2 * p.entry_day;
        let end = p.removed_at.unwrap_or(2 * (p.last_day + 1)).min(2 * (p.last_day + 1));
        let expected = end.saturating_sub(start) as usize;
        assert_eq!(p.log.len(), expected, "{} has {} of {expected} decisions", p.id, p.log.len());
        for (i, rec) in p.log.iter().enumerate() {
            assert_eq!(rec.decision_t as usize, i);
            match rec.source {
                DecisionSource::Fallback | DecisionSource::NonPersonalized => {
                    assert_eq!(rec.prob, 0.5, "{} t={}", p.id, rec.decision_t);
                    fallbacks += 1;
                }
                _ => assert!(rec.source.is_policy()),
            }
        }
    }
    fallbacks
}

/// Injects each kind alone and compares the new non-dosage codes with the
/// fixture table. Returns the number of kinds checked.
pub fn check_isolation(profile: ProfileKind) -> usize {
    let baseline = code_set(&run(short_config(profile)));
    for kind in ALL_KINDS {
        let mut sim = Simulation::with_plan(short_config(profile), plan_of(vec![isolated_entry(kind)])).unwrap();
        sim.run_to_end().unwrap();
        let new: BTreeSet<String> = code_set(&sim)
            .difference(&baseline)
            .filter(|c| !is_dosage_code(profile, c))
            .cloned()
            .collect();
        let want: BTreeSet<String> = expected_codes(profile, kind).iter().map(|c| c.to_string()).collect();
        assert_eq!(new, want, "{profile} {kind}");
        // the codes the fault is responsible for carry its injection
        for issue in sim.issues() {
            let code = issue.code.as_str();
            if want.contains(code) && !code.starts_with("G-") {
                assert!(!issue.fault_refs.is_empty(), "{profile} {kind}: {issue:?}");
            }
            if is_dosage_code(profile, code) {
                assert!(issue.fault_refs.is_empty());
            }
            if issue.severity == Severity::Red && !is_dosage_code(profile, code) {
                assert!(want.contains(code), "{profile} {kind}: unexpected {issue:?}");
            }
        }
    }
    ALL_KINDS.len()
}

/// One alert per red or yellow issue and one ledger entry per issue.
/// Returns the number of alerting issues.
pub fn check_alerts_and_ledger(sim: &Simulation) -> usize {
    let mut alerts: BTreeMap<u64, usize> = BTreeMap::new();
    for a in sim.alerts() {
        *alerts.entry(a.issue_id).or_default() += 1;
    }
    let mut ledger: BTreeMap<u64, usize> = BTreeMap::new();
    for e in sim.ledger() {
        *ledger.entry(e.issue_id).or_default() += 1;
    }
    let mut alerting = 0;
    for issue in sim.issues() {
        let want = usize::from(issue.severity != Severity::Green);
        alerting += want;
        assert_eq!(alerts.get(&issue.issue_id).copied().unwrap_or(0), want, "{issue:?}");
        assert_eq!(ledger.get(&issue.issue_id).copied().unwrap_or(0), 1, "{issue:?}");
    }
    assert_eq!(sim.alerts().len(), alerting);
    alerting
}

fn keys(sim: &Simulation, table: &str, pid: &str, t: &str) -> BTreeSet<(String, i64)> {
    sim.store()
        .table(table)
        .unwrap()
        .rows()
        .filter_map(|r| Some((r.text(pid)?.to_string(), r.i64(t)?)))
        .collect()
}

/// No excluded point reaches an update, and timezone exclusions exist.
/// Returns the number of excluded points.
pub fn check_update_hygiene(sim: &Simulation) -> usize {
    let profile = sim.config().profile;
    let excluded = keys(sim, DATA_EXCLUSIONS, "participant_id", "decision_t");
    let codes: BTreeSet<&str> = sim
        .store()
        .table(DATA_EXCLUSIONS)
        .unwrap()
        .rows()
        .filter_map(|r| r.text("code"))
        .collect();
    let tz = if profile == ProfileKind::Oralytics { "Y4" } else { "317" };
    assert!(codes.contains(tz), "{profile}: no timezone exclusions in {codes:?}");
    let used = match profile {
        ProfileKind::Oralytics => keys(sim, UPDATE_DATA, "participant_id", "participant_decision_t"),
        ProfileKind::Miwaves => keys(sim, UPDATE_BATCHES, "user_id", "decision_idx"),
    };
    assert!(!used.is_empty());
    let leaked: Vec<_> = used.intersection(&excluded).collect();
    assert!(leaked.is_empty(), "{profile}: {leaked:?}");
    assert!(consistency_audit(sim.store(), u32::MAX).iter().all(|d| d.check != Check::ExcludedInUpdate));
    excluded.len()
}

/// Drops saves and checks the audit finds exactly those rows missing.
/// Returns the number of dropped saves.
pub fn check_audit_finds_dropped_saves(profile: ProfileKind) -> usize {
    let plan = plan_of(vec![
        FaultEntry::new(FaultKind::DbSaveError).for_participant("P003").on_day(6),
        FaultEntry::new(FaultKind::DbSaveError).on_day(12).with_probability(0.3),
    ]);
    let mut sim = Simulation::with_plan(short_config(profile), plan).unwrap();
    sim.run_to_end().unwrap();
    let dropped: BTreeSet<(String, u32)> = sim
        .exclusions()
        .iter()
        .filter(|(_, code)| is_save_failure(profile, code.as_str()))
        .map(|(k, _)| k.clone())
        .collect();
    assert!(dropped.len() >= 2, "{profile}: {dropped:?}");
    let found = consistency_audit(sim.store(), u32::MAX);
    assert!(found.iter().all(|d| d.check == Check::MissingRow), "{profile}: {found:?}");
    let missing: BTreeSet<(String, u32)> = found.iter().map(|d| (d.participant_id.clone(), d.decision_t)).collect();
    assert_eq!(missing, dropped, "{profile}");
    dropped.len()
}

/// Every Oralytics schedule covers the rest of the trial with the three
/// provenance zones. Returns the number of schedules.
pub fn check_schedule_zones(sim: &Simulation) -> usize {
    let store = sim.store();
    let horizon = 2 * i64::from(sim.trial_profile().trial_length_days);
    let mut meta: BTreeMap<i64, (bool, i64)> = BTreeMap::new();
    for row in store.table(SCHEDULE_PROVENANCE).unwrap().rows() {
        meta.insert(
            row.i64("schedule_id").unwrap(),
            (row.bool("personalized").unwrap(), row.i64("start_t").unwrap()),
        );
    }
    let mut entries: BTreeMap<i64, Vec<(i64, f64, [f64; 5])>> = BTreeMap::new();
    for row in store.table(PARTICIPANT_DATA).unwrap().rows() {
        let state = std::array::from_fn(|i| row.f64(&format!("state.{i}")).unwrap());
        entries
            .entry(row.i64("schedule_id").unwrap())
            .or_default()
            .push((row.i64("participant_decision_t").unwrap(), row.f64("prob").unwrap(), state));
    }
    assert_eq!(entries.len(), meta.len());
    for (sid, points) in &entries {
        let (personalized, start) = meta[sid];
        let ts: Vec<i64> = points.iter().map(|p| p.0).collect();
        assert_eq!(ts, (start..horizon).collect::<Vec<_>>(), "schedule {sid}");
        let b_bar = points[0].2[1];
        for &(t, prob, s) in points {
            let offset = t - start;
            assert_eq!(s[0], (t % 2) as f64, "time of day");
            assert_eq!(s[4], 1.0, "intercept");
            if (2..=27).contains(&offset) {
                assert_eq!(s[3], 0.0, "schedule {sid} offset {offset}: app engagement imputed as 0");
                assert_eq!(s[1], b_bar, "schedule {sid} offset {offset}: b̄ frozen");
            }
            if offset > 27 || !personalized {
                assert_eq!(prob, 0.5, "schedule {sid} offset {offset}");
            } else {
                assert!((0.2..=0.8).contains(&prob));
            }
        }
    }
    entries.len()
}
