//! MiWaves: live per-window action requests, same-window data collection,
//! daily mixed-model updates.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;

use super::records::{DecisionRecord, DecisionSource, EventBody};
use super::{fetch_failure, Policy, PolicySummary, RlPoint, Simulation};
use crate::clock::{Slot, Timestamp, EVENING_HOUR, MORNING_HOUR};
use crate::decision::context::{design_row_miwaves, feature_map_miwaves};
use crate::decision::posterior::{advantage_of_block, posterior_update_mixed, Observation};
use crate::decision::{draw_action, smooth_probability, JointPosteriorState, MiwavesState};
use crate::error::Result;
use crate::faults::{Boundary, FaultKind};
use crate::schedule::FIXED_PROB;
use crate::sentinel::{classify, population_rule, FallbackKind, RawEvent, RawKind};
use crate::store::codec::{rl_weights_row, RlWeightsInput};
use crate::store::schema::*;

/// Windows looked back over for the engagement state.
const ENGAGEMENT_WINDOWS: u32 = 6;
const ENGAGEMENT_MIN: usize = 3;

/// One action the decision service computed this window.
#[derive(Debug, Clone)]
struct Selection {
    rid: u64,
    user: String,
    decision_t: u32,
    day_in_trial: u32,
    state: MiwavesState,
    prob: f64,
    seed: u32,
    action: u8,
    policy_id: u32,
    at: Timestamp,
    notif: (Vec<i64>, Vec<i64>),
}

fn notif_times(offset: i64) -> (Vec<i64>, Vec<i64>) {
    let at = |hour: u32| {
        let m = i64::from(hour) * 60 + offset;
        vec![m / 60, m % 60]
    };
    (at(MORNING_HOUR), at(EVENING_HOUR))
}

impl Simulation {
    pub(super) fn miwaves_tick(&mut self) -> Result<()> {
        let (day, slot) = (self.clock.current_day, self.clock.current_slot);
        if slot == Slot::Morning {
            self.roster_morning()?;
            for pid in self.active_ids() {
                self.write_user_status(&pid)?;
            }
        }
        if !self.rl.up {
            self.rl.up = true;
            self.raise(RawEvent::new(RawKind::Restart, "decision service restarted"));
        }
        let mut decided: Vec<(DecisionRecord, Option<Selection>)> = Vec::new();
        let active = self.active_ids();
        if let Some((_, fault)) = self.probe(Boundary::RlRequest, None, self.tick()) {
            self.rl.up = false;
            for pid in &active {
                let rec = self.controller_half(pid)?;
                self.raise(
                    RawEvent::new(RawKind::RlUnavailable, "decision service did not respond")
                        .participant(pid.clone())
                        .at(rec.decision_t)
                        .fallback(FallbackKind::ControllerHalf)
                        .fault(Some(fault)),
                );
                decided.push((rec, None));
            }
        } else {
            let roster = self.rl_active();
            for (i, pid) in roster.iter().enumerate() {
                let target = active.get(i).cloned();
                let t = self.participants[pid].decision_t(day, slot);
                if let Some((FaultKind::DbConnLoss, fault)) = self.probe(Boundary::StoreRead, Some(pid), t) {
                    if let Some(target) = target {
                        let rec = self.controller_half(&target)?;
                        self.raise(
                            RawEvent::new(RawKind::ContextReadFailed, "state read failed")
                                .participant(target)
                                .at(rec.decision_t)
                                .fallback(FallbackKind::ControllerHalf)
                                .fault(Some(fault)),
                        );
                        decided.push((rec, None));
                    }
                    continue;
                }
                let sel = self.select_action(pid)?;
                match target {
                    Some(target) => {
                        let misrouted = target != *pid;
                        if misrouted {
                            let fault = self.desync_fault(pid).or_else(|| {
                                roster.iter().find(|r| !active.contains(r)).and_then(|r| self.desync_fault(r))
                            });
                            self.raise(
                                RawEvent::new(RawKind::RosterMismatch, format!("action for {pid} delivered to {target}"))
                                    .participant(target.clone())
                                    .fault(fault),
                            );
                        }
                        let p = &self.participants[&target];
                        let rec = DecisionRecord {
                            participant_id: target.clone(),
                            decision_t: p.decision_t(day, slot),
                            tick: self.tick(),
                            day_in_trial: p.day_in_trial(day),
                            decision_time: self.decision_time(&target, day, slot),
                            state: sel.state.to_array().to_vec(),
                            prob: sel.prob,
                            seed: sel.seed,
                            action: sel.action,
                            policy_idx: Some(sel.policy_id),
                            schedule_id: None,
                            rid: Some(sel.rid),
                            source: if misrouted { DecisionSource::Misrouted } else { DecisionSource::Rl },
                        };
                        self.record_decision(rec.clone())?;
                        decided.push((rec, Some(sel)));
                    }
                    None => {
                        let fault = self.desync_fault(pid);
                        self.raise(
                            RawEvent::new(RawKind::RosterMismatch, format!("action for {pid} has no recipient"))
                                .participant(pid.clone())
                                .fault(fault),
                        );
                    }
                }
            }
            for extra in active.iter().skip(roster.len()) {
                let rec = self.controller_half(extra)?;
                let fault = roster.iter().find(|r| !active.contains(r)).and_then(|r| self.desync_fault(r));
                self.raise(
                    RawEvent::new(RawKind::RosterMismatch, format!("no action slot for {extra}"))
                        .participant(extra.clone())
                        .at(rec.decision_t)
                        .fallback(FallbackKind::ControllerHalf)
                        .fault(fault),
                );
                decided.push((rec, None));
            }
        }

        for (rec, sel) in &decided {
            self.close_window(rec, sel.as_ref())?;
        }

        let actions: Vec<u8> = decided.iter().map(|(r, _)| r.action).collect();
        let finding = population_rule(&actions, self.cfg.thresholds.population_min_active);
        let code = finding.as_ref().map(|k| classify(self.cfg.profile, k).code);
        if self.dosage.observe("*population*", code.as_ref()) {
            let kind = finding.expect("finding behind a code");
            self.raise(RawEvent::new(
                kind,
                format!("population rule over {} participants at tick {}", actions.len(), self.tick()),
            ));
        }

        if slot == Slot::Evening {
            if self.rl.up {
                self.update_miwaves()?;
            } else {
                self.update_pending = true;
            }
        }
        Ok(())
    }

    /// Controller-side assignment with probability 0.5.
    fn controller_half(&mut self, pid: &str) -> Result<DecisionRecord> {
        let (day, slot) = (self.clock.current_day, self.clock.current_slot);
        let decision_time = self.decision_time(pid, day, slot);
        let state = self.service_state(pid).to_array().to_vec();
        let tick = self.tick();
        let p = self.participants.get_mut(pid).expect("known");
        let seed = p.controller_rng.random_range(0..1000);
        let rec = DecisionRecord {
            participant_id: pid.to_string(),
            decision_t: p.decision_t(day, slot),
            tick,
            day_in_trial: p.day_in_trial(day),
            decision_time,
            state,
            prob: FIXED_PROB,
            seed,
            action: draw_action(FIXED_PROB, seed)?,
            policy_idx: None,
            schedule_id: None,
            rid: None,
            source: DecisionSource::Fallback,
        };
        self.record_decision(rec.clone())?;
        Ok(rec)
    }

    /// State from the data the decision service holds.
    fn service_state(&self, pid: &str) -> MiwavesState {
        let (day, slot) = (self.clock.current_day, self.clock.current_slot);
        let p = &self.participants[pid];
        let t = p.decision_t(day, slot);
        let used = (t.saturating_sub(ENGAGEMENT_WINDOWS)..t)
            .filter(|w| p.app_use.get(w).copied().unwrap_or(false))
            .count();
        MiwavesState {
            engagement: u8::from(used >= ENGAGEMENT_MIN),
            time_of_day: slot.index() as u8,
            cannabis: u8::from(p.last_cannabis.first().is_some_and(|q| *q > 0.0)),
        }
    }

    fn select_action(&mut self, pid: &str) -> Result<Selection> {
        let (day, slot) = (self.clock.current_day, self.clock.current_slot);
        let state = self.service_state(pid);
        let Policy::Miwaves(policy) = &self.rl.policy else {
            unreachable!("miwaves run holds a miwaves policy");
        };
        let policy_id = policy.policy_idx;
        let (mu, sigma) = policy.marginal_for(pid, &self.profile.prior, &self.sigma_u());
        let (mu_b, sigma_b) = advantage_of_block(&mu, &sigma);
        let s = DVector::from_row_slice(&feature_map_miwaves(&state));
        let smoothed = smooth_probability(&mu_b, &sigma_b, &s, &self.profile.rho)?;
        let t = self.participants[pid].decision_t(day, slot);
        if smoothed.clamped_variance.is_some() {
            self.raise(
                RawEvent::new(RawKind::VarianceClamped, "advantage variance clamped at zero")
                    .participant(pid)
                    .at(t),
            );
        }
        let p = self.participants.get_mut(pid).expect("known");
        let seed = p.decision_rng.random_range(0..1000);
        let offset = p.minute_offset;
        let dit = p.day_in_trial(day);
        let sel = Selection {
            rid: {
                let rid = self.ids.rid;
                self.ids.rid += 1;
                rid
            },
            user: pid.to_string(),
            decision_t: t,
            day_in_trial: dit,
            state,
            prob: smoothed.prob,
            seed,
            action: draw_action(smoothed.prob, seed)?,
            policy_id,
            at: self.clock.now(),
            notif: notif_times(offset),
        };
        self.write_selection(&sel, None, None)?;
        Ok(sel)
    }

    fn write_selection(&mut self, sel: &Selection, reward: Option<f64>, click: Option<String>) -> Result<()> {
        let sent = (sel.action == 1).then(|| sel.at.to_string());
        let cannabis = self.participants[&sel.user].last_cannabis.clone();
        let row = self
            .store
            .row(RL_ACTION_SELECTION)?
            .set("user_id", &sel.user)
            .set("user_decision_idx", sel.decision_t)
            .set("morning_notification_time", sel.notif.0.clone())
            .set("evening_notification_time", sel.notif.1.clone())
            .set("day_in_trial", sel.day_in_trial)
            .set("action", sel.action)
            .set("policy_id", sel.policy_id)
            .set("seed", sel.seed)
            .set("prior_ema_completion_time", None::<String>)
            .set("action_selection_timestamp", sel.at)
            .set("message_sent_notification_ts", sent)
            .set("message_click_notification_ts", click)
            .set("act_prob", sel.prob)
            .set("cannabis_use", cannabis)
            .set("state_vector", sel.state.to_array().to_vec())
            .set("reward", reward)
            .set("row_complete", reward.is_some())
            .set("rid", sel.rid);
        self.store.append(row)?;
        Ok(())
    }

    /// Engagement for the window and, for service-assigned actions, the
    /// data upload that closes it.
    fn close_window(&mut self, rec: &DecisionRecord, sel: Option<&Selection>) -> Result<()> {
        let pid = rec.participant_id.clone();
        let t = rec.decision_t;
        let p = self.participants.get_mut(&pid).expect("known");
        let engaged = t.checked_sub(1).and_then(|w| p.engagement.get(&w)).is_some_and(|e| e.app_use);
        let outcome = p.env.engage(rec.action, engaged);
        p.engagement.insert(t, outcome.clone());
        let Some(sel) = sel else {
            return Ok(());
        };

        let mut failure: Option<(RawKind, Option<u64>, String)> = None;
        if rec.source == DecisionSource::Misrouted {
            let fault = self.desync_fault(&sel.user);
            self.raise(
                RawEvent::new(RawKind::RosterMismatch, format!("rid {} belongs to {}, not {pid}", sel.rid, sel.user))
                    .participant(pid.clone())
                    .at(t)
                    .fault(fault),
            );
            failure = Some((RawKind::ActionNotFound, fault, format!("rid {} not found for {pid}", sel.rid)));
        } else if let Some(id) = self.throttled(&pid) {
            failure = Some((RawKind::FetchFailed, Some(id), "upload ignored by throttled endpoint".into()));
        } else if let Some((kind, id)) = self.probe(Boundary::DataFetch, Some(&pid), t) {
            if let Some(raw) = fetch_failure(kind) {
                failure = Some((raw, Some(id), format!("upload failed: {kind}")));
            }
        }
        if failure.is_none() {
            if let Some((FaultKind::DbSaveError, id)) = self.probe(Boundary::StoreWrite, Some(&pid), t) {
                failure = Some((RawKind::SaveFailed, Some(id), "action history row not saved".into()));
            }
        }
        if let Some((kind, fault, reason)) = failure {
            let code = classify(self.cfg.profile, &kind).code;
            self.raise(
                RawEvent::new(kind, reason.clone())
                    .participant(pid.clone())
                    .at(t)
                    .fallback(FallbackKind::DataExclusion)
                    .fault(fault),
            );
            self.exclude(&pid, t, &code, &reason, fault)?;
            self.emit(EventBody::Outcome {
                participant: pid,
                decision_t: t,
                reward: None,
                excluded: Some(code.0),
            });
            return Ok(());
        }

        let row = self
            .store
            .row(USER_ACTION_HISTORY)?
            .set("index", sel.rid)
            .set("user_id", &pid)
            .set("decision_idx", t)
            .set("finished_ema", outcome.finished_ema)
            .set("activity_question_response", None::<String>)
            .set("app_use_flag", outcome.app_use)
            .set("cannabis_use", outcome.cannabis_use.clone())
            .set("reward", outcome.reward)
            .set("state", sel.state.to_array().iter().map(|v| *v as i64).collect::<Vec<i64>>())
            .set("action", sel.action)
            .set("seed", sel.seed)
            .set("act_prob", sel.prob)
            .set("policy_id", sel.policy_id)
            .set("timestamp", self.clock.now());
        self.store.append(row)?;
        let click = outcome.message_click.then(|| sel.at.plus_seconds(600).to_string());
        let p = self.participants.get_mut(&pid).expect("known");
        p.app_use.insert(t, outcome.app_use);
        if !outcome.cannabis_use.is_empty() {
            p.last_cannabis = outcome.cannabis_use.clone();
        }
        p.rl_points.push(RlPoint {
            decision_t: t,
            state: sel.state,
            action: sel.action,
            prob: sel.prob,
            reward: outcome.reward,
        });
        self.write_selection(sel, Some(outcome.reward), click)?;
        self.emit(EventBody::Outcome {
            participant: pid,
            decision_t: t,
            reward: Some(outcome.reward),
            excluded: None,
        });
        Ok(())
    }

    fn update_miwaves(&mut self) -> Result<()> {
        self.update_pending = false;
        self.rl.update_requested = false;
        if self.memory_usage >= 1.0 {
            let fault = self.memory_fault();
            self.rl.up = false;
            self.raise(
                RawEvent::new(RawKind::UpdateFailed, format!("update ran out of memory at usage {:.2}", self.memory_usage))
                    .fallback(FallbackKind::PreviousPolicy)
                    .fault(fault),
            );
            self.emit(EventBody::UpdateFailed {
                reason: "out of memory".into(),
            });
            return Ok(());
        }
        let roster = self.rl.roster.clone();
        if roster.is_empty() {
            return Ok(());
        }
        let now = self.clock.now();
        let mut batches: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
        let mut used: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for pid in &roster {
            let p = &self.participants[pid];
            for pt in &p.rl_points {
                batches
                    .entry(pid.clone())
                    .or_default()
                    .push(Observation::new(design_row_miwaves(&pt.state, pt.action, pt.prob).to_vec(), pt.reward));
                used.entry(pid.clone()).or_default().push(pt.decision_t);
            }
        }
        let next_idx = self.rl.policy.policy_idx() + 1;
        let next = posterior_update_mixed(
            &self.profile.prior,
            &roster,
            &batches,
            self.profile.noise_variance,
            &self.sigma_u(),
            next_idx,
            now,
        )?;
        let observations: usize = batches.values().map(Vec::len).sum();
        self.write_miwaves_policy(&next, observations, used)?;
        self.rl.policy = Policy::Miwaves(next);
        self.emit(EventBody::PolicyUpdated {
            policy_idx: next_idx,
            observations,
            participants: roster.len(),
        });
        Ok(())
    }

    pub(super) fn write_miwaves_policy(
        &mut self,
        state: &JointPosteriorState,
        observations: usize,
        used: BTreeMap<String, Vec<u32>>,
    ) -> Result<()> {
        let day = self.clock.current_day;
        let hp_update_id = (self.ids.hp_request > 0).then_some(self.ids.hp_request);
        let id = super::bump(&mut self.ids.weights);
        let su = self.sigma_u();
        let row = rl_weights_row(
            &self.store,
            &RlWeightsInput {
                id,
                state,
                prior: &self.profile.prior,
                sigma_u: &su,
                noise_var: self.profile.noise_variance,
                hp_update_id,
            },
        )?;
        self.store.append(row)?;
        for (user, points) in &used {
            for t in points {
                let row = self
                    .store
                    .row(UPDATE_BATCHES)?
                    .set("policy_id", state.policy_idx)
                    .set("user_id", user)
                    .set("decision_idx", *t);
                self.store.append(row)?;
            }
        }
        let row = self
            .store
            .row(ALGORITHM_STATUS)?
            .set("policy_id", state.policy_idx)
            .set("update_time", state.updated_at)
            .set("update_day_in_trial", day)
            .set("current_decision_time", self.tick())
            .set("current_day_in_trial", day);
        self.store.append(row)?;
        if state.policy_idx > 0 && day % 7 == 6 {
            let hp = super::bump(&mut self.ids.hp_request);
            let now = self.clock.now();
            let row = self
                .store
                .row(HYPERPARAMETER_REQUESTS)?
                .set("id", hp)
                .set("backup_location", format!("snapshots/policy-{}", state.policy_idx))
                .set("request_timestamp", now)
                .set("request_status", "HELD_FIXED")
                .set("request_message", "hyperparameters held at configured values")
                .set("request_error_code", None::<i64>)
                .set("completed_timestamp", Some(now));
            self.store.append(row)?;
        }
        let population = state.population.as_ref().map(|(m, c)| advantage_of_block(m, c).0);
        self.rl.history.push(PolicySummary {
            policy_idx: state.policy_idx,
            updated_at: state.updated_at,
            tick: (state.policy_idx > 0).then(|| self.tick()),
            observations,
            participants: used.len(),
            advantage_mean: population.map_or_else(
                || advantage_of_block(&self.profile.prior.mean, &self.profile.prior.cov).0.as_slice().to_vec(),
                |m| m.as_slice().to_vec(),
            ),
        });
        Ok(())
    }

    pub(super) fn write_user_rows(&mut self, pid: &str) -> Result<()> {
        let p = &self.participants[pid];
        let start = self.date_of(p.entry_day);
        let end = self.date_of(p.last_day);
        let midnight = |d: chrono::NaiveDate, h, m, s| Timestamp(d.and_hms_opt(h, m, s).expect("valid time"));
        let row = self
            .store
            .row(USERS)?
            .set("user_id", pid)
            .set("consent_start_date", midnight(start, 0, 0, 0))
            .set("consent_end_date", midnight(end, 23, 59, 59))
            .set("rl_start_date", self.decision_time(pid, p.entry_day, Slot::Morning))
            .set("rl_end_date", self.decision_time(pid, p.last_day, Slot::Evening));
        self.store.append(row)?;
        self.write_user_status(pid)
    }

    pub(super) fn write_user_status(&mut self, pid: &str) -> Result<()> {
        let (day, slot) = (self.clock.current_day, self.clock.current_slot);
        let p = &self.participants[pid];
        let phase = if p.removed_at.is_some() {
            "REMOVED"
        } else if day > p.last_day {
            "COMPLETED"
        } else {
            "ACTIVE"
        };
        let (morning, evening) = notif_times(p.minute_offset);
        let day = day.clamp(p.entry_day, p.last_day);
        let row = self
            .store
            .row(USER_STATUS)?
            .set("user_id", pid)
            .set("trial_phase", phase)
            .set("morning_notif_time_start", morning)
            .set("evening_notif_time_start", evening)
            .set("current_decision_index", p.decision_t(day, slot))
            .set("current_time_of_day", slot.index())
            .set("trial_day", p.day_in_trial(day));
        self.store.append(row)?;
        Ok(())
    }
}
