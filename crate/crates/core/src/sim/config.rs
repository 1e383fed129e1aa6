//! Run configuration.

use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::decision::profile::{MIWAVES_PARAM_DIM, ORALYTICS_PARAM_DIM};
use crate::decision::{CostParams, PriorSpec, ProfileKind, RhoParams, TrialProfile};
use crate::error::{Error, Result};
use crate::faults::{FaultPlan, RandomLayer};

/// Prefix for environment overrides, e.g. `TRIALWATCH_SEED=7` or
/// `TRIALWATCH_API__BIND=0.0.0.0:9000` (`__` separates nested keys).
pub const ENV_PREFIX: &str = "TRIALWATCH_";
/// Prefixed variables that belong to the process, not the run config.
pub const ENV_RESERVED: &[&str] = &["TRIALWATCH_LOG"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub prior_variance: f64,
    /// σ²; the profile default when absent.
    pub noise_variance: Option<f64>,
    /// Σ_u = variance · I (MiWaves).
    pub random_effects_variance: f64,
    pub rho: RhoParams,
    pub cost: CostParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prior_variance: 25.0,
            noise_variance: None,
            random_effects_variance: 1.0,
            rho: RhoParams::default(),
            cost: CostParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub memory: f64,
    /// Minimum active participants for the MiWaves population dosage rule.
    pub population_min_active: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            memory: 0.9,
            population_min_active: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinkKind {
    File,
    Webhook,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkConfig {
    pub kind: SinkKind,
    pub url: Option<String>,
}

impl Default for SinkConfig {
    fn default() -> Self {
        Self {
            kind: SinkKind::File,
            url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApiConfig {
    pub bind: String,
    /// Static bearer token required on POST routes when set.
    pub token: Option<String>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8787".into(),
            token: None,
        }
    }
}

/// A scheduled participant removal (failed verification, withdrawal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalSpec {
    pub participant: String,
    pub day: u32,
    #[serde(default = "default_reason")]
    pub reason: String,
}

fn default_reason() -> String {
    "withdrawn".into()
}

/// Participant response model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub brushing_mean: f64,
    pub brushing_sd_between: f64,
    pub brushing_noise_sd: f64,
    pub prompt_effect_mean: f64,
    pub prompt_effect_sd: f64,
    pub pressure_mean: f64,
    pub app_open_rate: f64,
    pub miwaves_app_use_rate: f64,
    pub miwaves_ema_rate: f64,
    pub miwaves_click_rate: f64,
    pub miwaves_prompt_lift: f64,
    pub cannabis_rate: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            brushing_mean: 110.0,
            brushing_sd_between: 25.0,
            brushing_noise_sd: 40.0,
            prompt_effect_mean: 12.0,
            prompt_effect_sd: 6.0,
            pressure_mean: 6.0,
            app_open_rate: 0.4,
            miwaves_app_use_rate: 0.55,
            miwaves_ema_rate: 0.5,
            miwaves_click_rate: 0.3,
            miwaves_prompt_lift: 0.1,
            cannabis_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: ProfileKind,
    pub participants: u32,
    pub entries_per_day: u32,
    pub seed: u64,
    pub start_date: NaiveDate,
    /// `incident-replay` or a path to a plan file.
    pub fault_plan: Option<String>,
    /// Adds a random layer at this per-interaction rate on top of the plan.
    pub random_fault_rate: Option<f64>,
    /// Automates red dosage checks; false routes them to the dashboard queue.
    pub automated_red: bool,
    pub thresholds: Thresholds,
    pub model: ModelConfig,
    pub env: EnvConfig,
    pub sink: SinkConfig,
    pub api: ApiConfig,
    /// Wall milliseconds per slot in paced mode.
    pub pace_ms: u64,
    pub removals: Vec<RemovalSpec>,
    /// Trial length override in days (tests use short trials).
    pub trial_days: Option<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: ProfileKind::Oralytics,
            participants: 20,
            entries_per_day: 2,
            seed: 2024,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            fault_plan: None,
            random_fault_rate: None,
            automated_red: true,
            thresholds: Thresholds::default(),
            model: ModelConfig::default(),
            env: EnvConfig::default(),
            sink: SinkConfig::default(),
            api: ApiConfig::default(),
            pace_ms: 2000,
            removals: Vec::new(),
            trial_days: None,
        }
    }
}

impl RunConfig {
    pub fn new(profile: ProfileKind) -> Self {
        Self {
            profile,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `TRIALWATCH_*` overrides from `vars`.
    pub fn apply_env_overrides<I, K, V>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc: toml::Table = toml::from_str(&self.to_toml_string())?;
        let mut touched = false;
        for (key, value) in vars {
            let key = key.as_ref();
            if ENV_RESERVED.contains(&key) {
                continue;
            }
            let Some(path) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let parts: Vec<String> = path.split("__").map(str::to_ascii_lowercase).collect();
            set_path(&mut doc, &parts, parse_scalar(value.as_ref()))?;
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        let cfg: RunConfig = toml::from_str(&toml::to_string(&doc).expect("table serializes"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.participants == 0 {
            return Err(Error::config("participants must be at least 1"));
        }
        if self.entries_per_day == 0 {
            return Err(Error::config("entries_per_day must be at least 1"));
        }
        if let Some(rate) = self.random_fault_rate {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(format!("random_fault_rate must be in [0, 1], got {rate}")));
            }
        }
        if !(self.thresholds.memory > 0.0 && self.thresholds.memory.is_finite()) {
            return Err(Error::config("memory threshold must be positive"));
        }
        if self.trial_days == Some(0) {
            return Err(Error::config("trial_days must be at least 1"));
        }
        if self.model.prior_variance <= 0.0 || self.model.random_effects_variance < 0.0 {
            return Err(Error::config("prior variance must be > 0 and random effects variance >= 0"));
        }
        if let SinkKind::Webhook = self.sink.kind {
            if self.sink.url.is_none() {
                return Err(Error::config("webhook sink needs sink.url"));
            }
        }
        self.trial_profile().validate()
    }

    pub fn trial_profile(&self) -> TrialProfile {
        let mut p = TrialProfile::for_kind(self.profile);
        if let Some(days) = self.trial_days {
            p.trial_length_days = days;
        }
        p.rho = self.model.rho;
        let dim = match self.profile {
            ProfileKind::Oralytics => ORALYTICS_PARAM_DIM,
            ProfileKind::Miwaves => MIWAVES_PARAM_DIM,
        };
        p.prior = PriorSpec::isotropic(dim, self.model.prior_variance);
        if let Some(s2) = self.model.noise_variance {
            p.noise_variance = s2;
        }
        match self.profile {
            ProfileKind::Oralytics => p.cost = Some(self.model.cost),
            ProfileKind::Miwaves => {
                p.random_effects_cov = Some(DMatrix::identity(dim, dim) * self.model.random_effects_variance)
            }
        }
        p
    }

    /// The configured fault plan plus the random layer, if any.
    pub fn resolve_fault_plan(&self) -> Result<FaultPlan> {
        let mut plan = match &self.fault_plan {
            Some(spec) => FaultPlan::resolve(spec, self.profile)?,
            None => FaultPlan::empty(),
        };
        if let Some(rate) = self.random_fault_rate {
            plan.random = Some(RandomLayer { rate, kinds: Vec::new() });
        }
        plan.validate()?;
        Ok(plan)
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    match raw {
        "true" => toml::Value::Boolean(true),
        "false" => toml::Value::Boolean(false),
        _ => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::config("empty override key"))?;
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path `{}` is not a table", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::new(ProfileKind::Miwaves);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = RunConfig::from_toml_str("profile = \"miwaves\"\nseed = 9\n[thresholds]\nmemory = 0.8\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.thresholds.memory, 0.8);
        assert_eq!(cfg.participants, 20);
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn env_overrides() {
        let cfg = RunConfig::default()
            .apply_env_overrides([
                ("TRIALWATCH_SEED", "77"),
                ("TRIALWATCH_API__BIND", "0.0.0.0:9000"),
                ("TRIALWATCH_MODEL__RHO__B", "2.5"),
                ("HOME", "/root"),
            ])
            .unwrap();
        assert_eq!(cfg.seed, 77);
        assert_eq!(cfg.api.bind, "0.0.0.0:9000");
        assert_eq!(cfg.model.rho.b, 2.5);
        assert!(RunConfig::default().apply_env_overrides([("TRIALWATCH_PARTICIPANTS", "0")]).is_err());
        let cfg = RunConfig::default().apply_env_overrides([("TRIALWATCH_LOG", "debug")]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        let cfg = RunConfig {
            random_fault_rate: Some(1.5),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
