//! Simulated participant responses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::EnvConfig;
use crate::decision::compute_reward_miwaves;

/// Stream tags for per-participant generators.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Env = 1,
    Decision = 2,
    Controller = 3,
    Traits = 4,
}

pub fn stream_seed(master: u64, participant: &str, stream: Stream) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in participant.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h.rotate_left(17) ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn participant_rng(master: u64, participant: &str, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, participant, stream))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrushingOutcome {
    pub brushing_duration: f64,
    pub pressure_duration: f64,
    pub raw_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementOutcome {
    pub finished_ema: bool,
    pub app_use: bool,
    pub message_click: bool,
    /// `[quantity, frequency]`, reported only with a finished EMA.
    pub cannabis_use: Vec<f64>,
    pub reward: f64,
}

/// Latent response parameters and generator of one participant.
#[derive(Debug, Clone)]
pub struct EnvModel {
    cfg: EnvConfig,
    base: f64,
    effect: f64,
    evening_shift: f64,
    engagement_shift: f64,
    rng: ChaCha8Rng,
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd.max(0.0)).expect("finite normal parameters")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

impl EnvModel {
    pub fn new(cfg: &EnvConfig, master: u64, participant: &str) -> Self {
        let mut traits = participant_rng(master, participant, Stream::Traits);
        let base = normal(cfg.brushing_mean, cfg.brushing_sd_between).sample(&mut traits);
        let effect = normal(cfg.prompt_effect_mean, cfg.prompt_effect_sd).sample(&mut traits);
        let evening_shift = normal(-10.0, 5.0).sample(&mut traits);
        let engagement_shift = normal(0.0, 0.5).sample(&mut traits);
        Self {
            cfg: cfg.clone(),
            base,
            effect,
            evening_shift,
            engagement_shift,
            rng: participant_rng(master, participant, Stream::Env),
        }
    }

    /// Brushing after a decision; prompts help less as recent dosage rises.
    pub fn brush(&mut self, time_of_day: u8, a_bar: f64, action: u8) -> BrushingOutcome {
        let lift = if action == 1 { self.effect * (1.0 - 0.5 * a_bar.clamp(0.0, 1.0)) } else { 0.0 };
        let mean = self.base + lift + if time_of_day == 1 { self.evening_shift } else { 0.0 };
        let brushing = normal(mean, self.cfg.brushing_noise_sd).sample(&mut self.rng).max(0.0);
        let pressure = if brushing > 0.0 {
            (self.rng.random::<f64>() * 2.0 * self.cfg.pressure_mean).min(brushing)
        } else {
            0.0
        };
        BrushingOutcome {
            brushing_duration: brushing,
            pressure_duration: pressure,
            raw_quality: brushing - pressure,
        }
    }

    pub fn opened_app(&mut self) -> u8 {
        u8::from(self.rng.random::<f64>() < self.cfg.app_open_rate)
    }

    pub fn engage(&mut self, action: u8, engaged: bool) -> EngagementOutcome {
        let lift = if action == 1 { self.cfg.miwaves_prompt_lift } else { 0.0 };
        let habit = if engaged { 0.4 } else { -0.4 };
        let app_p = sigmoid(logit(self.cfg.miwaves_app_use_rate) + self.engagement_shift + habit + 4.0 * lift);
        let app_use = self.rng.random::<f64>() < app_p;
        let ema_p = sigmoid(logit(self.cfg.miwaves_ema_rate) + self.engagement_shift + 4.0 * lift);
        let finished_ema = self.rng.random::<f64>() < ema_p;
        let message_click = action == 1 && self.rng.random::<f64>() < self.cfg.miwaves_click_rate;
        let used = self.rng.random::<f64>() < self.cfg.cannabis_rate;
        let quantity = if used { 0.5 + 2.0 * self.rng.random::<f64>() } else { 0.0 };
        let frequency = if used { f64::from(self.rng.random_range(1..=4u8)) } else { 0.0 };
        let cannabis_use = if finished_ema { vec![quantity, frequency] } else { Vec::new() };
        EngagementOutcome {
            finished_ema,
            app_use,
            message_click,
            reward: compute_reward_miwaves(app_use, finished_ema, message_click),
            cannabis_use,
        }
    }
}
