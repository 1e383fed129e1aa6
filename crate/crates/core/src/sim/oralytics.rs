//! Oralytics: nightly schedules built each morning, brushing data fetched
//! the following morning, weekly full-history updates.

use rand::Rng;

use super::records::{DecisionRecord, DecisionSource, EventBody};
use super::{fetch_failure, Participant, Policy, PolicySummary, Simulation};
use crate::clock::{Slot, MORNING_HOUR, EVENING_HOUR};
use crate::decision::context::feature_map_oralytics;
use crate::decision::posterior::{posterior_update_blr, Observation};
use crate::decision::context::oralytics_averages;
use crate::decision::{
    build_context_oralytics, compute_reward_oralytics, draw_action, HistoryPoint, OralyticsContext, PosteriorState,
};
use crate::error::Result;
use crate::faults::{Boundary, FaultKind};
use crate::schedule::{build_backup_schedule, build_fallback_schedule, ScheduleRequest, TreatmentSchedule, FIXED_PROB};
use crate::sentinel::{FallbackKind, IssueCode, RawEvent, RawKind};
use crate::store::codec::posterior_weights_row;
use crate::store::schema::*;
use crate::store::RowBuilder;

/// Most-recent-first history before `before`, as the decision service sees
/// it: points it never received count as zero quality.
fn service_history(p: &Participant, before: u32) -> Vec<HistoryPoint> {
    (0..before)
        .rev()
        .map(|t| HistoryPoint {
            quality: p.quality.get(&t).copied().unwrap_or(0.0),
            action: p.actions[t as usize],
        })
        .collect()
}

/// The same window from what actually happened.
fn true_history(p: &Participant, before: u32) -> Vec<HistoryPoint> {
    (0..before)
        .rev()
        .map(|t| HistoryPoint {
            quality: p.outcomes.get(&t).map_or(0.0, |o| o.raw_quality),
            action: p.actions[t as usize],
        })
        .collect()
}

fn hhmm(hour: u32, offset: i64) -> String {
    let minutes = i64::from(hour) * 60 + offset;
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

impl Simulation {
    pub(super) fn oralytics_tick(&mut self) -> Result<()> {
        if self.clock.current_slot == Slot::Morning {
            self.roster_morning()?;
            if !self.rl.up {
                self.rl.up = true;
                self.raise(RawEvent::new(RawKind::Restart, "decision service restarted"));
            }
            if let Some((_, fault)) = self.probe(Boundary::RlRequest, None, 0) {
                self.rl.up = false;
                for pid in self.active_ids() {
                    let fb = if self.participants[&pid].cache.is_some() {
                        FallbackKind::CachedSchedule
                    } else {
                        FallbackKind::ControllerHalf
                    };
                    self.raise(
                        RawEvent::new(RawKind::RlUnavailable, "decision service did not respond")
                            .participant(pid)
                            .fallback(fb)
                            .fault(Some(fault)),
                    );
                }
            }
            if self.rl.up {
                self.fetch_all()?;
                self.maybe_update_oralytics()?;
                self.build_and_deliver()?;
            } else if self.is_update_day() {
                self.update_pending = true;
            }
        }
        self.oralytics_decisions()
    }

    fn is_update_day(&self) -> bool {
        let d = self.clock.current_day;
        d > 0 && d.is_multiple_of(7)
    }

    fn identity(&self, b: RowBuilder, p: &Participant) -> RowBuilder {
        b.set("participant_id", &p.id)
            .set("participant_start_day", self.date_of(p.entry_day).to_string())
            .set("participant_end_day", self.date_of(p.last_day).to_string())
    }

    fn state_cols(mut b: RowBuilder, state: &[f64]) -> RowBuilder {
        for (i, v) in state.iter().enumerate() {
            b.put(&format!("state.{i}"), *v);
        }
        b
    }

    pub(super) fn write_participant_info(&mut self, pid: &str) -> Result<()> {
        let day = self.clock.current_day;
        let p = &self.participants[pid];
        let horizon = self.profile.horizon();
        let dit = day.saturating_sub(p.entry_day).min(self.profile.trial_length_days - 1);
        let opened = dit.checked_sub(1).and_then(|d| p.app_opened.get(&d)).copied().unwrap_or(0);
        let in_trial = p.removed_at.is_none() && day <= p.last_day;
        let off = p.minute_offset;
        let b = self
            .identity(self.store.row(PARTICIPANT_INFO)?, p)
            .set("morning_time_weekday", hhmm(MORNING_HOUR, off))
            .set("evening_time_weekday", hhmm(EVENING_HOUR, off))
            .set("morning_time_weekend", hhmm(MORNING_HOUR + 1, off))
            .set("evening_time_weekend", hhmm(EVENING_HOUR, off))
            .set("participant_entry_decision_t", 0u32)
            .set("participant_last_decision_t", horizon - 1)
            .set("currently_in_trial", u8::from(in_trial))
            .set("participant_day_in_trial", dit)
            .set("participant_opened_app", opened)
            .set("most_recent_schedule_id", p.cache.as_ref().map(|s| s.schedule_id));
        self.store.append(b)?;
        Ok(())
    }

    pub(super) fn write_oralytics_policy(&mut self, state: &PosteriorState, observations: usize) -> Result<()> {
        let row = posterior_weights_row(&self.store, state)?;
        self.store.append(row)?;
        let participants = self
            .participants
            .values()
            .filter(|p| p.rewards.keys().any(|t| !self.excluded.contains_key(&(p.id.clone(), *t))))
            .count();
        self.rl.history.push(PolicySummary {
            policy_idx: state.policy_idx,
            updated_at: state.updated_at,
            tick: (state.policy_idx > 0).then(|| self.tick()),
            observations,
            participants,
            advantage_mean: state.advantage_block().0.as_slice().to_vec(),
        });
        Ok(())
    }

    /// Yesterday's (and any backlog of) brushing data.
    fn fetch_all(&mut self) -> Result<()> {
        let ids: Vec<String> = self
            .order
            .iter()
            .filter(|id| !self.participants[*id].pending_fetch.is_empty())
            .cloned()
            .collect();
        for pid in ids {
            let pending = std::mem::take(&mut self.participants.get_mut(&pid).expect("known").pending_fetch);
            for t in pending {
                self.fetch_point(&pid, t)?;
            }
        }
        Ok(())
    }

    fn fetch_point(&mut self, pid: &str, t: u32) -> Result<()> {
        let failure = match self.throttled(pid) {
            Some(id) => Some((RawKind::FetchFailed, id)),
            None => self
                .probe(Boundary::DataFetch, Some(pid), t)
                .and_then(|(kind, id)| fetch_failure(kind).map(|k| (k, id))),
        };
        let p = &self.participants[pid];
        let rec = p.log[t as usize].clone();
        let outcome = p.outcomes.get(&t).copied().expect("outcome recorded with the decision");
        let dit = t / 2;
        let mut b = self.identity(self.store.row(TREATMENT_SELECTION)?, p);
        b = b
            .set("timestamp", self.clock.now())
            .set("schedule_id", rec.schedule_id)
            .set("participant_decision_t", t)
            .set("decision_time", rec.decision_time)
            .set("day_in_trial", rec.day_in_trial)
            .set("policy_idx", rec.policy_idx)
            .set("random_seed", rec.seed)
            .set("action", rec.action)
            .set("prob", rec.prob);
        b = Self::state_cols(b, &rec.state);

        let mut reward = None;
        if let Some((kind, fault)) = &failure {
            let code = crate::sentinel::classify(self.cfg.profile, kind).code;
            self.raise(
                RawEvent::new(kind.clone(), format!("brushing data for decision {t} unavailable"))
                    .participant(pid)
                    .at(t)
                    .fallback(FallbackKind::DataExclusion)
                    .fault(Some(*fault)),
            );
            self.exclude(pid, t, &code, "brushing data unavailable", Some(*fault))?;
        } else {
            let (b_bar, a_bar) = oralytics_averages(&true_history(p, t));
            let cost = self.profile.cost.expect("oralytics cost parameters");
            let r = compute_reward_oralytics(outcome.raw_quality, b_bar, a_bar, rec.action, &cost)?;
            b = b
                .set("brushing_duration", outcome.brushing_duration)
                .set("pressure_duration", outcome.pressure_duration)
                .set("quality", r.quality)
                .set("raw_quality", r.raw_quality)
                .set("reward", r.reward)
                .set("cost_term", r.cost)
                .set("B_condition", u8::from(r.flags.b_condition))
                .set("A1_condition", u8::from(r.flags.a1_condition))
                .set("A2_condition", u8::from(r.flags.a2_condition))
                .set("actual_b_bar", r.actual_b_bar);
            reward = Some((r.quality, r.reward));
        }

        if let Some((FaultKind::DbSaveError, fault)) = self.probe(Boundary::StoreWrite, Some(pid), t) {
            let code = IssueCode::new("R3");
            self.raise(
                RawEvent::new(RawKind::SaveFailed, format!("treatment selection row for decision {t} not saved"))
                    .participant(pid)
                    .at(t)
                    .fallback(FallbackKind::DataExclusion)
                    .fault(Some(fault)),
            );
            self.exclude(pid, t, &code, "row not saved", Some(fault))?;
            self.emit(EventBody::Outcome {
                participant: pid.to_string(),
                decision_t: t,
                reward: None,
                excluded: Some(code.0),
            });
            return Ok(());
        }
        self.store.append(b)?;

        let excluded = failure.as_ref().map(|(k, _)| crate::sentinel::classify(self.cfg.profile, k).code.0);
        let p = self.participants.get_mut(pid).expect("known");
        if let Some((quality, r)) = reward {
            p.quality.insert(t, quality);
            p.rewards.insert(t, r);
            if t % 2 == 1 {
                if let Some(flag) = p.app_truth.get(&dit).copied() {
                    p.app_opened.insert(dit, flag);
                }
            }
        }
        self.emit(EventBody::Outcome {
            participant: pid.to_string(),
            decision_t: t,
            reward: reward.map(|r| r.1),
            excluded,
        });
        Ok(())
    }

    fn maybe_update_oralytics(&mut self) -> Result<()> {
        if !(self.is_update_day() || self.rl.update_requested || self.update_pending) {
            return Ok(());
        }
        self.rl.update_requested = false;
        self.update_pending = false;
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
        let Policy::Oralytics(current) = &self.rl.policy else {
            unreachable!("oralytics run holds an oralytics policy");
        };
        let next_idx = current.policy_idx + 1;
        let now = self.clock.now();

        let mut obs = Vec::new();
        let mut used = Vec::new();
        for pid in &self.order {
            let p = &self.participants[pid];
            for (&t, &r) in &p.rewards {
                if self.excluded.contains_key(&(pid.clone(), t)) {
                    continue;
                }
                let rec = &p.log[t as usize];
                let ctx = OralyticsContext::from_slice(&rec.state)?;
                obs.push(Observation::new(feature_map_oralytics(&ctx, rec.action, rec.prob).to_vec(), r));
                used.push((pid.clone(), t));
            }
        }
        let prior = PosteriorState::prior(&self.profile.prior, now);
        let mut next = posterior_update_blr(&prior, &obs, self.profile.noise_variance, now)?;
        next.policy_idx = next_idx;

        for (pid, t) in &used {
            if self.rl.used_points.contains(&(pid.clone(), *t)) {
                continue;
            }
            let p = &self.participants[pid];
            let rec = &p.log[*t as usize];
            let mut b = self
                .identity(self.store.row(UPDATE_DATA)?, p)
                .set("timestamp", now)
                .set("participant_decision_t", *t)
                .set("decision_time", rec.decision_time)
                .set("first_policy_idx", next_idx)
                .set("action", rec.action)
                .set("prob", rec.prob)
                .set("reward", p.rewards[t])
                .set("quality", p.quality[t]);
            b = Self::state_cols(b, &rec.state);
            self.store.append(b)?;
        }
        self.rl.used_points.extend(used);
        self.write_oralytics_policy(&next, obs.len())?;
        let participants = self.rl.history.last().map_or(0, |h| h.participants);
        self.rl.policy = Policy::Oralytics(next);
        self.emit(EventBody::PolicyUpdated {
            policy_idx: next_idx,
            observations: obs.len(),
            participants,
        });
        Ok(())
    }

    /// Builds today's schedules for the service's roster and hands them to
    /// the controller by position.
    fn build_and_deliver(&mut self) -> Result<()> {
        let day = self.clock.current_day;
        let now = self.clock.now();
        let roster = self.rl_active();
        let active = self.active_ids();
        let Policy::Oralytics(policy) = self.rl.policy.clone() else {
            unreachable!("oralytics run holds an oralytics policy");
        };
        for (i, pid) in roster.iter().enumerate() {
            let start_t = self.participants[pid].decision_t(day, Slot::Morning);
            let schedule_id = super::bump(&mut self.ids.schedule);
            let read_fault = match self.probe(Boundary::StoreRead, Some(pid), start_t) {
                Some((FaultKind::DbConnLoss, id)) => Some(id),
                _ => None,
            };
            let p = &self.participants[pid];
            let history = service_history(p, start_t);
            let app = day
                .checked_sub(p.entry_day + 1)
                .and_then(|d| p.app_opened.get(&d))
                .copied()
                .unwrap_or(0);
            let current = [
                build_context_oralytics(&history, 0, app),
                build_context_oralytics(&history, 1, app),
            ];
            let past: Vec<u8> = history.iter().map(|h| h.action).collect();
            let req = ScheduleRequest {
                participant_id: pid,
                schedule_id,
                start_t,
                horizon: self.profile.horizon(),
                current_contexts: current,
                past_actions: &past,
                created_at: now,
            };
            let rho = self.profile.rho;
            let p = self.participants.get_mut(pid).expect("known");
            let schedule = match read_fault {
                Some(_) => build_fallback_schedule(&req, policy.policy_idx, &mut p.decision_rng)?,
                None => {
                    let built = build_backup_schedule(&req, Some(&policy), &rho, &mut p.decision_rng)?;
                    if let Some(t) = built.clamped_at.first() {
                        self.raise(
                            RawEvent::new(RawKind::VarianceClamped, "advantage variance clamped at zero")
                                .participant(pid.clone())
                                .at(*t),
                        );
                    }
                    built.schedule
                }
            };
            if let Some(fault) = read_fault {
                self.raise(
                    RawEvent::new(RawKind::ContextReadFailed, "context read failed; non-personalized schedule")
                        .participant(pid.clone())
                        .at(start_t)
                        .fallback(FallbackKind::NonPersonalizedSchedule)
                        .fault(Some(fault)),
                );
            }
            self.persist_schedule(&schedule)?;
            self.deliver(schedule, active.get(i).map(String::as_str))?;
        }
        // controller-side participants beyond the service's list get nothing
        for extra in active.iter().skip(roster.len()) {
            let fault = roster.iter().find(|r| !active.contains(r)).and_then(|r| self.desync_fault(r));
            self.raise(
                RawEvent::new(RawKind::RosterMismatch, format!("no schedule slot for {extra}"))
                    .participant(extra.clone())
                    .fault(fault),
            );
        }
        Ok(())
    }

    fn persist_schedule(&mut self, s: &TreatmentSchedule) -> Result<()> {
        let p = &self.participants[&s.participant_id];
        for e in &s.entries {
            let day = p.entry_day + e.decision_t / 2;
            let mut b = self
                .identity(self.store.row(PARTICIPANT_DATA)?, p)
                .set("timestamp", s.created_at)
                .set("schedule_id", s.schedule_id)
                .set("participant_decision_t", e.decision_t)
                .set("decision_time", self.decision_time(&p.id, day, Slot::from_index(e.decision_t % 2)))
                .set("day_in_trial", e.decision_t / 2)
                .set("policy_idx", s.policy_idx)
                .set("random_seed", e.seed)
                .set("action", e.action)
                .set("prob", e.prob);
            b = Self::state_cols(b, &e.state.to_array());
            self.store.append(b)?;
        }
        let row = self
            .store
            .row(SCHEDULE_PROVENANCE)?
            .set("schedule_id", s.schedule_id)
            .set("participant_id", &s.participant_id)
            .set("created_at", s.created_at)
            .set("policy_idx", s.policy_idx)
            .set("personalized", s.personalized)
            .set("start_t", s.start_t)
            .set("entries", s.entries.len());
        self.store.append(row)?;
        self.emit(EventBody::ScheduleBuilt {
            schedule_id: s.schedule_id,
            participant: s.participant_id.clone(),
            policy_idx: s.policy_idx,
            personalized: s.personalized,
            start_t: s.start_t,
            entries: s.entries.len(),
        });
        Ok(())
    }

    fn deliver(&mut self, schedule: TreatmentSchedule, to: Option<&str>) -> Result<()> {
        let built_for = schedule.participant_id.clone();
        let Some(target) = to else {
            self.raise(
                RawEvent::new(RawKind::RosterMismatch, format!("schedule {} has no recipient", schedule.schedule_id))
                    .participant(built_for.clone())
                    .fault(self.desync_fault(&built_for)),
            );
            self.emit(EventBody::ScheduleDelivered {
                schedule_id: schedule.schedule_id,
                participant: built_for,
                accepted: false,
            });
            return Ok(());
        };
        let target = target.to_string();
        if let Some((FaultKind::BlankSchedule, fault)) = self.probe(Boundary::ScheduleDelivery, Some(&target), schedule.start_t) {
            let p = self.participants.get_mut(&target).expect("known");
            p.cache = None;
            p.cache_day = None;
            self.raise(
                RawEvent::new(RawKind::BlankSchedule, "app cache emptied")
                    .participant(target.clone())
                    .fallback(FallbackKind::ControllerHalf)
                    .fault(Some(fault)),
            );
            self.emit(EventBody::ScheduleDelivered {
                schedule_id: schedule.schedule_id,
                participant: target,
                accepted: false,
            });
            return Ok(());
        }
        if target != built_for {
            let fault = self
                .order
                .iter()
                .find_map(|r| self.desync_fault(r).filter(|_| self.rl.roster.contains(r)));
            self.raise(
                RawEvent::new(
                    RawKind::RosterMismatch,
                    format!("schedule built for {built_for} reached {target}; discarded"),
                )
                .participant(target.clone())
                .fallback(FallbackKind::CachedSchedule)
                .fault(fault),
            );
            self.emit(EventBody::ScheduleDelivered {
                schedule_id: schedule.schedule_id,
                participant: target,
                accepted: false,
            });
            return Ok(());
        }
        let day = self.clock.current_day;
        let sid = schedule.schedule_id;
        let p = self.participants.get_mut(&target).expect("known");
        p.cache = Some(schedule);
        p.cache_day = Some(day);
        self.write_participant_info(&target)?;
        self.emit(EventBody::ScheduleDelivered {
            schedule_id: sid,
            participant: target,
            accepted: true,
        });
        Ok(())
    }

    fn oralytics_decisions(&mut self) -> Result<()> {
        let (day, slot) = (self.clock.current_day, self.clock.current_slot);
        for pid in self.active_ids() {
            let p = &self.participants[&pid];
            let t = p.decision_t(day, slot);
            let base = DecisionRecord {
                participant_id: pid.clone(),
                decision_t: t,
                tick: self.tick(),
                day_in_trial: p.day_in_trial(day),
                decision_time: self.decision_time(&pid, day, slot),
                state: Vec::new(),
                prob: FIXED_PROB,
                seed: 0,
                action: 0,
                policy_idx: None,
                schedule_id: None,
                rid: None,
                source: DecisionSource::Fallback,
            };
            let planned = p.cache.as_ref().and_then(|s| s.entry(t).map(|e| (s, e)));
            let rec = match planned {
                Some((s, e)) => {
                    let fresh = p.cache_day == Some(day);
                    let source = match (fresh, s.personalized) {
                        (false, _) => DecisionSource::CachedSchedule,
                        (true, true) => DecisionSource::Schedule,
                        (true, false) => DecisionSource::NonPersonalized,
                    };
                    DecisionRecord {
                        state: e.state.to_array().to_vec(),
                        prob: e.prob,
                        seed: e.seed,
                        action: e.action,
                        policy_idx: Some(s.policy_idx),
                        schedule_id: Some(s.schedule_id),
                        source,
                        ..base
                    }
                }
                None => {
                    let history = service_history(p, t);
                    let app = p
                        .day_in_trial(day)
                        .checked_sub(1)
                        .and_then(|d| p.app_opened.get(&d))
                        .copied()
                        .unwrap_or(0);
                    let state = build_context_oralytics(&history, slot.index() as u8, app).to_array().to_vec();
                    let p = self.participants.get_mut(&pid).expect("known");
                    let seed = p.controller_rng.random_range(0..1000);
                    DecisionRecord {
                        state,
                        seed,
                        action: draw_action(FIXED_PROB, seed)?,
                        ..base
                    }
                }
            };
            let action = rec.action;
            self.record_decision(rec)?;
            let p = self.participants.get_mut(&pid).expect("known");
            let (_, a_bar) = oralytics_averages(&true_history(p, t));
            let outcome = p.env.brush(slot.index() as u8, a_bar, action);
            p.outcomes.insert(t, outcome);
            if slot == Slot::Evening {
                let opened = p.env.opened_app();
                p.app_truth.insert(t / 2, opened);
            }
            p.pending_fetch.push(t);
        }
        Ok(())
    }
}
