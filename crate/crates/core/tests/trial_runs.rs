mod common;

use common::checks::{
    check_alerts_and_ledger, check_audit_finds_dropped_saves, check_liveness, check_schedule_zones,
    check_update_hygiene, faulted, run,
};
use common::short_config;
use trialwatch_core::decision::ProfileKind;
use trialwatch_core::sentinel::audit::{consistency_audit, Check};
use trialwatch_core::sentinel::Severity;
use trialwatch_core::sim::{RunConfig, Simulation};
use trialwatch_core::store::schema::{PARTICIPANT_DATA, SCHEDULE_PROVENANCE, TREATMENT_SELECTION, UPDATE_BATCHES};
use trialwatch_core::store::Value;

#[test]
fn fault_free_oralytics_trial_stays_within_clipping_bounds() {
    let sim = run(RunConfig::new(ProfileKind::Oralytics));
    assert_eq!(sim.decisions_total(), 20 * 140);
    let mut policy_probs = 0;
    for p in sim.participants() {
        for rec in p.log.iter().filter(|r| r.source.is_policy()) {
            assert!((0.2..=0.8).contains(&rec.prob), "{} t={} prob {}", p.id, rec.decision_t, rec.prob);
            policy_probs += 1;
        }
    }
    assert!(policy_probs > 2000, "only {policy_probs} policy decisions");
    for row in sim.store().table(PARTICIPANT_DATA).unwrap().rows() {
        let prob = row.f64("prob").unwrap();
        assert!((0.2..=0.8).contains(&prob));
    }
    assert!(sim.issues().iter().all(|i| i.code.as_str() != "R5"));
    assert!(sim.issues().iter().all(|i| i.severity == Severity::Green));
}

#[test]
fn oralytics_every_point_is_decided_under_faults() {
    let sim = run(faulted(ProfileKind::Oralytics));
    assert_eq!(sim.plan().kinds().len(), 13);
    check_liveness(&sim);
}

#[test]
fn miwaves_every_point_is_decided_under_faults() {
    let sim = run(faulted(ProfileKind::Miwaves));
    check_liveness(&sim);
}

#[test]
fn identical_configs_give_identical_event_logs() {
    for profile in [ProfileKind::Oralytics, ProfileKind::Miwaves] {
        let mut cfg = short_config(profile);
        cfg.fault_plan = Some("incident-replay".into());
        cfg.random_fault_rate = Some(0.2);
        let log = |cfg: RunConfig| -> Vec<String> {
            let mut sim = Simulation::new(cfg).unwrap();
            let mut lines = Vec::new();
            while !sim.is_finished() {
                sim.step().unwrap();
                for e in sim.drain_outbox().events {
                    lines.push(serde_json::to_string(&e).unwrap());
                }
            }
            lines
        };
        let a = log(cfg.clone());
        assert!(a.len() > 100);
        assert_eq!(a, log(cfg.clone()), "{profile}");
        cfg.seed += 1;
        assert_ne!(a, log(cfg), "{profile}: the seed should matter");
    }
}

#[test]
fn clone_mid_run_continues_identically() {
    let mut sim = Simulation::new(short_config(ProfileKind::Miwaves)).unwrap();
    for _ in 0..17 {
        sim.step().unwrap();
    }
    sim.drain_outbox();
    let mut copy = sim.clone();
    sim.run_to_end().unwrap();
    copy.run_to_end().unwrap();
    assert_eq!(sim.drain_outbox().events, copy.drain_outbox().events);
    assert_eq!(sim.store().count(UPDATE_BATCHES), copy.store().count(UPDATE_BATCHES));
}

#[test]
fn clean_runs_audit_clean() {
    for profile in [ProfileKind::Oralytics, ProfileKind::Miwaves] {
        let sim = run(short_config(profile));
        assert_eq!(consistency_audit(sim.store(), u32::MAX), vec![], "{profile}");
        assert!(sim.issues().iter().all(|i| i.code.as_str() != "G-AUDIT"));
    }
}

#[test]
fn audit_finds_exactly_the_dropped_saves() {
    for profile in [ProfileKind::Oralytics, ProfileKind::Miwaves] {
        check_audit_finds_dropped_saves(profile);
    }
}

#[test]
fn audit_reports_a_hand_corrupted_row_alone() {
    let mut sim = run(short_config(ProfileKind::Oralytics));
    let table = sim.store_mut().table_mut(TREATMENT_SELECTION).unwrap();
    let row = table.row(40).unwrap();
    let key = (row.text("participant_id").unwrap().to_string(), row.i64("participant_decision_t").unwrap());
    let prob = row.f64("prob").unwrap();
    table.overwrite_unchecked(40, "prob", Value::Float(prob + 0.01)).unwrap();
    let found = consistency_audit(sim.store(), u32::MAX);
    assert_eq!(found.len(), 1, "{found:?}");
    assert_eq!(found[0].check, Check::ValueMismatch);
    assert_eq!((found[0].participant_id.clone(), i64::from(found[0].decision_t)), key);
}

#[test]
fn excluded_points_never_enter_updates() {
    for profile in [ProfileKind::Oralytics, ProfileKind::Miwaves] {
        assert!(check_update_hygiene(&run(faulted(profile))) > 0);
    }
}

#[test]
fn every_schedule_has_three_zones() {
    let sim = run(faulted(ProfileKind::Oralytics));
    check_schedule_zones(&sim);
    let non_personalized = sim
        .store()
        .table(SCHEDULE_PROVENANCE)
        .unwrap()
        .rows()
        .filter(|r| r.bool("personalized") == Some(false))
        .count();
    assert!(non_personalized > 0, "the fault plan includes context-read failures");
}

#[test]
fn every_alerting_issue_has_one_alert_and_one_ledger_entry() {
    for profile in [ProfileKind::Oralytics, ProfileKind::Miwaves] {
        let mut cfg = short_config(profile);
        cfg.fault_plan = Some("incident-replay".into());
        cfg.random_fault_rate = Some(0.2);
        assert!(check_alerts_and_ledger(&run(cfg)) > 10);
    }
}
