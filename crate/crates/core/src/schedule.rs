//! Oralytics backup treatment schedules.
//!
//! Each morning the decision service assigns every remaining decision point
//! of the participant's horizon so the app can keep delivering treatment if
//! later communication fails.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::decision::context::{exp_average, normalize_a_bar, HISTORY_WINDOW, ORALYTICS_GAMMA};
use crate::decision::{draw_action, smooth_probability, OralyticsContext, PosteriorState, RhoParams};
use crate::error::{Error, Result};

/// Entries at offsets 0 and 1 use current context.
pub const CURRENT_ZONE_LEN: u32 = 2;
/// Last offset (inclusive) that uses the modified context.
pub const MODIFIED_ZONE_END: u32 = 27;
pub const FIXED_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    CurrentContext,
    ModifiedContext,
    FixedHalf,
}

impl Provenance {
    pub fn for_offset(offset: u32) -> Self {
        if offset < CURRENT_ZONE_LEN {
            Provenance::CurrentContext
        } else if offset <= MODIFIED_ZONE_END {
            Provenance::ModifiedContext
        } else {
            Provenance::FixedHalf
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::CurrentContext => "CURRENT_CONTEXT",
            Provenance::ModifiedContext => "MODIFIED_CONTEXT",
            Provenance::FixedHalf => "FIXED_HALF",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub decision_t: u32,
    pub state: OralyticsContext,
    pub prob: f64,
    pub seed: u32,
    pub action: u8,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSchedule {
    pub schedule_id: u64,
    pub participant_id: String,
    pub created_at: Timestamp,
    pub policy_idx: u32,
    /// False for the non-personalized schedules built when context could not
    /// be read; every entry then carries probability 0.5.
    pub personalized: bool,
    pub start_t: u32,
    pub entries: Vec<ScheduleEntry>,
}

impl TreatmentSchedule {
    pub fn entry(&self, decision_t: u32) -> Option<&ScheduleEntry> {
        decision_t
            .checked_sub(self.start_t)
            .and_then(|i| self.entries.get(i as usize))
    }
}

/// Everything the service knows about a participant on the morning a
/// schedule is built.
#[derive(Debug, Clone)]
pub struct ScheduleRequest<'a> {
    pub participant_id: &'a str,
    pub schedule_id: u64,
    pub start_t: u32,
    /// One past the participant's last decision point (140 for a full trial).
    pub horizon: u32,
    /// Contexts for the morning and evening of the current day.
    pub current_contexts: [OralyticsContext; 2],
    /// Executed actions before `start_t`, most recent first.
    pub past_actions: &'a [u8],
    pub created_at: Timestamp,
}

#[derive(Debug, Clone)]
pub struct ScheduleBuild {
    pub schedule: TreatmentSchedule,
    /// Decision points whose advantage variance was clamped at zero.
    pub clamped_at: Vec<u32>,
}

/// Context for a decision point between t+2 and t+27.
///
/// b̄ is frozen at its most recent value and prior-day app engagement is
/// imputed as 0; ā is supplied by the caller.
pub fn modified_context(most_recent_b_bar: f64, time_of_day: u8, a_bar_projection: f64) -> OralyticsContext {
    OralyticsContext {
        time_of_day,
        b_bar_norm: most_recent_b_bar,
        a_bar_norm: a_bar_projection,
        opened_app: 0,
    }
}

/// Normalized ā at `decision_t`, folding the schedule's own tentative
/// actions (for points from `start_t` on) in front of the executed history.
fn projected_a_bar(start_t: u32, decision_t: u32, scheduled: &[u8], past_actions: &[u8]) -> f64 {
    let mut window = [0.0; HISTORY_WINDOW];
    for (j, slot) in window.iter_mut().enumerate() {
        let lag = j as u32 + 1;
        let Some(t) = decision_t.checked_sub(lag) else { break };
        *slot = if t >= start_t {
            f64::from(scheduled[(t - start_t) as usize])
        } else {
            let back = (start_t - 1 - t) as usize;
            past_actions.get(back).map_or(0.0, |a| f64::from(*a))
        };
    }
    normalize_a_bar(exp_average(&window, ORALYTICS_GAMMA).expect("window has fixed length"))
}

fn zoned_states<F>(req: &ScheduleRequest<'_>, mut assign: F) -> Result<Vec<ScheduleEntry>>
where
    F: FnMut(u32, &OralyticsContext, Provenance) -> Result<(f64, u32, u8)>,
{
    if req.start_t >= req.horizon {
        return Err(Error::ScheduleConstruction(format!(
            "decision point {} is past the horizon {}",
            req.start_t, req.horizon
        )));
    }
    let b_bar = req.current_contexts[0].b_bar_norm;
    let mut entries = Vec::with_capacity((req.horizon - req.start_t) as usize);
    let mut actions: Vec<u8> = Vec::with_capacity(entries.capacity());
    for decision_t in req.start_t..req.horizon {
        let offset = decision_t - req.start_t;
        let provenance = Provenance::for_offset(offset);
        let state = match provenance {
            Provenance::CurrentContext => req.current_contexts[offset as usize],
            _ => {
                let a_bar = projected_a_bar(req.start_t, decision_t, &actions, req.past_actions);
                modified_context(b_bar, (decision_t % 2) as u8, a_bar)
            }
        };
        let (prob, seed, action) = assign(decision_t, &state, provenance)?;
        actions.push(action);
        entries.push(ScheduleEntry {
            decision_t,
            state,
            prob,
            seed,
            action,
            provenance,
        });
    }
    Ok(entries)
}

/// Personalized schedule from the current posterior. Seeds are drawn from
/// `rng` at construction time.
pub fn build_backup_schedule<R: Rng>(
    req: &ScheduleRequest<'_>,
    posterior: Option<&PosteriorState>,
    rho: &RhoParams,
    rng: &mut R,
) -> Result<ScheduleBuild> {
    let posterior = posterior.ok_or_else(|| Error::ScheduleConstruction("posterior unavailable".into()))?;
    let (mu_beta, sigma_beta) = posterior.advantage_block();
    let mut clamped_at = Vec::new();
    let entries = zoned_states(req, |t, state, provenance| {
        let seed = rng.random_range(0..1000);
        let prob = match provenance {
            Provenance::FixedHalf => FIXED_PROB,
            _ => {
                let s = DVector::from_row_slice(&state.to_array());
                let out = smooth_probability(&mu_beta, &sigma_beta, &s, rho)?;
                if out.clamped_variance.is_some() {
                    clamped_at.push(t);
                }
                out.prob
            }
        };
        Ok((prob, seed, draw_action(prob, seed)?))
    })?;
    Ok(ScheduleBuild {
        schedule: TreatmentSchedule {
            schedule_id: req.schedule_id,
            participant_id: req.participant_id.to_string(),
            created_at: req.created_at,
            policy_idx: posterior.policy_idx,
            personalized: true,
            start_t: req.start_t,
            entries,
        },
        clamped_at,
    })
}

/// Non-personalized schedule: same zone layout, probability 0.5 everywhere.
pub fn build_fallback_schedule<R: Rng>(req: &ScheduleRequest<'_>, policy_idx: u32, rng: &mut R) -> Result<TreatmentSchedule> {
    let entries = zoned_states(req, |_, _, _| {
        let seed = rng.random_range(0..1000);
        Ok((FIXED_PROB, seed, draw_action(FIXED_PROB, seed)?))
    })?;
    Ok(TreatmentSchedule {
        schedule_id: req.schedule_id,
        participant_id: req.participant_id.to_string(),
        created_at: req.created_at,
        policy_idx,
        personalized: false,
        start_t: req.start_t,
        entries,
    })
}

/// Structural check of a persisted schedule against the zone layout.
pub fn validate_schedule(schedule: &TreatmentSchedule, horizon: u32) -> Result<()> {
    let fail = |reason: String| Err(Error::ScheduleConstruction(format!("schedule {}: {reason}", schedule.schedule_id)));
    let expected = horizon.saturating_sub(schedule.start_t) as usize;
    if schedule.entries.len() != expected {
        return fail(format!("{} entries, expected {expected}", schedule.entries.len()));
    }
    let b_bar = match schedule.entries.first() {
        Some(e) => e.state.b_bar_norm,
        None => return Ok(()),
    };
    for (i, e) in schedule.entries.iter().enumerate() {
        let offset = i as u32;
        if e.decision_t != schedule.start_t + offset {
            return fail(format!("entry {i} has decision_t {}", e.decision_t));
        }
        if e.provenance != Provenance::for_offset(offset) {
            return fail(format!("entry {i} labelled {}", e.provenance.as_str()));
        }
        if e.action != draw_action(e.prob, e.seed)? {
            return fail(format!("entry {i} action does not match its seed"));
        }
        if u32::from(e.state.time_of_day) != e.decision_t % 2 {
            return fail(format!("entry {i} has time of day {}", e.state.time_of_day));
        }
        let half = e.prob == FIXED_PROB;
        match e.provenance {
            Provenance::FixedHalf if !half => return fail(format!("entry {i} has prob {} in the fixed zone", e.prob)),
            Provenance::ModifiedContext if e.state.opened_app != 0 || e.state.b_bar_norm != b_bar => {
                return fail(format!("entry {i} does not use the modified context"));
            }
            _ if !schedule.personalized && !half => return fail(format!("non-personalized entry {i} has prob {}", e.prob)),
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::PriorSpec;
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ts() -> Timestamp {
        Timestamp(NaiveDate::from_ymd_opt(2023, 9, 1).unwrap().and_hms_opt(6, 0, 0).unwrap())
    }

    fn ctx(tod: u8, b: f64, a: f64) -> OralyticsContext {
        OralyticsContext {
            time_of_day: tod,
            b_bar_norm: b,
            a_bar_norm: a,
            opened_app: 1,
        }
    }

    fn request(start_t: u32, past: &[u8], id: u64) -> ScheduleRequest<'_> {
        ScheduleRequest {
            participant_id: "P001",
            schedule_id: id,
            start_t,
            horizon: 140,
            current_contexts: [ctx(0, 0.3, -0.4), ctx(1, 0.3, -0.4)],
            past_actions: past,
            created_at: ts(),
        }
    }

    #[test]
    fn fresh_schedule_has_three_zones() {
        let prior = PosteriorState::prior(&PriorSpec::isotropic(15, 25.0), ts());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let build = build_backup_schedule(&request(0, &[], 1), Some(&prior), &RhoParams::default(), &mut rng).unwrap();
        let s = &build.schedule;
        assert_eq!(s.entries.len(), 140);
        assert_eq!(s.entries[0].state, ctx(0, 0.3, -0.4));
        assert_eq!(s.entries[1].state, ctx(1, 0.3, -0.4));
        for e in &s.entries[2..28] {
            assert_eq!(e.provenance, Provenance::ModifiedContext);
            assert_eq!(e.state.b_bar_norm, 0.3);
            assert_eq!(e.state.opened_app, 0);
        }
        assert!(s.entries[28..].iter().all(|e| e.prob == 0.5 && e.provenance == Provenance::FixedHalf));
        validate_schedule(s, 140).unwrap();
    }

    #[test]
    fn time_of_day_alternates() {
        let prior = PosteriorState::prior(&PriorSpec::isotropic(15, 25.0), ts());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let build = build_backup_schedule(&request(30, &[1; 30], 4), Some(&prior), &RhoParams::default(), &mut rng).unwrap();
        assert_eq!(build.schedule.entries.len(), 110);
        for pair in build.schedule.entries.windows(2) {
            assert_ne!(pair[0].state.time_of_day, pair[1].state.time_of_day);
        }
    }

    #[test]
    fn projected_a_bar_folds_scheduled_actions() {
        // every scheduled action 1 and a history of ones keeps ā at its maximum
        assert!((projected_a_bar(20, 25, &[1, 1, 1, 1, 1], &[1; 20]) - 1.0).abs() < 1e-12);
        // with no history, five scheduled ones give exactly the weighted sum
        let g: f64 = ORALYTICS_GAMMA;
        let c = (1.0 - g) / (1.0 - g.powi(14));
        let expected = 2.0 * c * (0..5).map(|j| g.powi(j)).sum::<f64>() - 1.0;
        let got = projected_a_bar(0, 5, &[1, 1, 1, 1, 1], &[]);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_posterior_is_construction_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = build_backup_schedule(&request(0, &[], 1), None, &RhoParams::default(), &mut rng);
        assert!(matches!(err, Err(Error::ScheduleConstruction(_))));
    }

    #[test]
    fn fallback_schedule_is_all_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = build_fallback_schedule(&request(10, &[0; 10], 9), 2, &mut rng).unwrap();
        assert!(!s.personalized);
        assert!(s.entries.iter().all(|e| e.prob == 0.5));
        validate_schedule(&s, 140).unwrap();
    }

    #[test]
    fn validation_catches_bad_zone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = build_fallback_schedule(&request(0, &[], 1), 0, &mut rng).unwrap();
        s.entries[100].prob = 0.6;
        s.entries[100].action = draw_action(0.6, s.entries[100].seed).unwrap();
        assert!(validate_schedule(&s, 140).is_err());
    }
}
