//! Run configuration and its flat text format.
//!
//! One `key = value` per line, keys are dotted paths into [`RunConfig`],
//! `#` starts a comment. Values are JSON literals (`0.5`, `true`, `[128, 128]`,
//! `null`); string fields also accept bare text. Keys missing from the file
//! keep their defaults and unknown keys are rejected.
//!
//! Profiles are indexed (`profiles.0.d2_mean`). When any profile key appears,
//! the profile list holds exactly indices `0..=max`, each starting from the
//! default profile with the same index (or the last default).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ev_env::{BatteryConfig, EnvConfig, RewardConfig, UserProfile};
use crate::eval_sim::WeekOptions;
use crate::federation::FedConfig;
use crate::price_data::SynthParams;
use crate::sac::SacConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    /// CSV with `timestamp,price` rows; takes precedence over synthesis.
    pub csv: Option<String>,
    /// Generate a sinusoidal series when no CSV is given.
    pub synthetic: bool,
    pub synth_seed: u64,
    pub synth_days: usize,
    pub synth_base: f64,
    pub synth_amplitude: f64,
    pub synth_noise_sd: f64,
    pub synth_start: String,
    /// Divisor for raw prices; `null` uses the training-split mean.
    pub scale: Option<f64>,
}

impl Default for PriceConfig {
    fn default() -> Self {
        let s = SynthParams::default();
        Self {
            csv: None,
            synthetic: false,
            synth_seed: s.seed,
            synth_days: s.days,
            synth_base: s.base,
            synth_amplitude: s.amplitude,
            synth_noise_sd: s.noise_sd,
            synth_start: s.start.to_string(),
            scale: None,
        }
    }
}

impl PriceConfig {
    pub fn synth_params(&self) -> Result<SynthParams, ConfigError> {
        Ok(SynthParams {
            seed: self.synth_seed,
            days: self.synth_days,
            base: self.synth_base,
            amplitude: self.synth_amplitude,
            noise_sd: self.synth_noise_sd,
            start: parse_date("prices.synth_start", &self.synth_start)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Midnight the simulated week starts on; `null` picks the first
    /// held-out stretch long enough.
    pub start: Option<String>,
    pub seed: u64,
    pub drive_hours: usize,
    pub initial_soc: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let w = WeekOptions::default();
        Self { start: None, seed: 0, drive_hours: w.drive_hours, initial_soc: w.initial_soc }
    }
}

impl EvalConfig {
    pub fn week_options(&self) -> WeekOptions {
        WeekOptions { drive_hours: self.drive_hours, initial_soc: self.initial_soc }
    }

    pub fn start_time(&self) -> Result<Option<NaiveDateTime>, ConfigError> {
        self.start
            .as_deref()
            .map(|s| parse_date("eval.start", s).map(|d| d.and_hms_opt(0, 0, 0).expect("midnight")))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: String,
    pub price_window_n: usize,
    pub battery: BatteryConfig,
    pub reward: RewardConfig,
    pub prices: PriceConfig,
    pub sac: SacConfig,
    pub fed: FedConfig,
    pub eval: EvalConfig,
    pub profiles: Vec<UserProfile>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: "runs".into(),
            price_window_n: EnvConfig::default().price_window_n,
            battery: BatteryConfig::default(),
            reward: RewardConfig::default(),
            prices: PriceConfig::default(),
            sac: SacConfig::default(),
            fed: FedConfig::default(),
            eval: EvalConfig::default(),
            profiles: UserProfile::defaults(),
        }
    }
}

fn parse_date(key: &str, s: &str) -> Result<NaiveDate, ConfigError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| ConfigError::Invalid(format!("{key} = {s:?}: {e}")))
}

impl RunConfig {
    pub fn env_config(&self, price_scale: f64) -> EnvConfig {
        EnvConfig { battery: self.battery, reward: self.reward, price_window_n: self.price_window_n, price_scale }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.env_config(self.prices.scale.unwrap_or(1.0)).validate().map_err(|e| invalid(&e))?;
        self.sac.validate().map_err(|e| invalid(&e))?;
        self.fed.validate().map_err(|e| invalid(&e))?;
        if self.profiles.is_empty() {
            return Err(ConfigError::Invalid("at least one profile is required".into()));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            p.validate().map_err(|e| ConfigError::Invalid(format!("profiles.{i}: {e}")))?;
        }
        if let Some(s) = self.prices.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(ConfigError::Invalid(format!("prices.scale {s} must be > 0")));
            }
        }
        self.prices.synth_params()?;
        self.eval.start_time()?;
        if self.eval.drive_hours == 0 {
            return Err(ConfigError::Invalid("eval.drive_hours must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.initial_soc) {
            return Err(ConfigError::Invalid("eval.initial_soc must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Renders every field, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        let mut out = String::new();
        let mut section = "";
        for (key, value) in &flat {
            let head = key.split('.').next().unwrap_or("");
            if head != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                section = head;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Parses text, validates, and returns the config.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        Self::from_text_with(text, &[])
    }

    /// Like [`RunConfig::from_text`], with `key=value` overrides that replace
    /// lines of the file. Overrides report line 0 in errors.
    pub fn from_text_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let defaults = serde_json::to_value(Self::default()).expect("config serializes");
        let mut entries = Vec::new();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = strip_comment(raw).trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, reason: format!("expected `key = value`, got {body:?}") })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line, reason: "empty key".into() });
            }
            if seen.insert(key.clone(), line).is_some() {
                return Err(ConfigError::DuplicateKey { line, key });
            }
            entries.push((line, key, value));
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: 0, reason: format!("override {o:?} is not `key=value`") })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            entries.retain(|(_, k, _)| *k != key);
            entries.push((0, key, value));
        }

        let mut tree = defaults.clone();
        let profile_max = entries
            .iter()
            .filter_map(|(line, key, _)| {
                let rest = key.strip_prefix("profiles.")?;
                let idx = rest.split('.').next().unwrap_or("");
                Some(idx.parse::<usize>().map_err(|_| ConfigError::UnknownKey { line: *line, key: key.clone() }))
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .max();
        if let Some(max) = profile_max {
            let base = defaults["profiles"].as_array().expect("profiles is a list");
            let list = (0..=max).map(|i| base[i.min(base.len() - 1)].clone()).collect();
            tree["profiles"] = Value::Array(list);
        }

        for (line, key, value) in &entries {
            let slot = lookup(&mut tree, key).ok_or_else(|| ConfigError::UnknownKey { line: *line, key: key.clone() })?;
            if slot.is_object() || (slot.is_array() && key == "profiles") {
                return Err(ConfigError::Syntax { line: *line, reason: format!("`{key}` is a section, not a value") });
            }
            *slot = parse_value(value);
        }
        let config: Self =
            serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(format!("type error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn load_with(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_text_with(&text, overrides)
    }
}

fn strip_comment(line: &str) -> &str {
    // `#` inside a quoted string is kept
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(&join(k), child, out);
            }
        }
        Value::Array(items) if items.iter().any(Value::is_object) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&join(&i.to_string()), child, out);
            }
        }
        Value::String(s) if is_bare(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Strings that read back unambiguously without quotes.
fn is_bare(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_./:".contains(c))
        && serde_json::from_str::<Value>(s).is_err()
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part)?,
            Value::Array(items) => items.get_mut(part.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(node)
}

/// Bare text that is not a JSON literal becomes a string; a type mismatch is
/// then reported when the tree is deserialized.
fn parse_value(text: &str) -> Value {
    serde_json::from_str::<Value>(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// The keys `print-config` emits, for help text and tests.
pub fn default_keys() -> Vec<String> {
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut flat);
    flat.into_keys().collect()
}
