//! Per-user charging MDP: battery dynamics, session sampling, the anxiety
//! target curve and reward settlement.
//!
//! One hour per step. An episode is a single plug-in session running from the
//! arrival hour `t_a` to the departure hour `t_d`; the step entering `t_d`
//! settles the departure shortfall and ends the episode.

use std::sync::Arc;

use chrono::{Datelike, NaiveDateTime, Weekday};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::price_data::{window, PriceSeries};
use crate::rng::{standard_normal, SeededRng};

/// SoC fraction drained per hour of driving.
pub const DRIVE_DRAIN_PER_HOUR: f64 = 0.05;

/// Upper bound of the uniform initial-SoC draw.
pub const MAX_INITIAL_SOC: f64 = 0.95;

/// Countdown features are divided by this before entering the network.
pub const HOURS_FEATURE_SCALE: f64 = 24.0;

const MAX_SCHEDULE_ATTEMPTS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("schedule infeasible: {0}")]
    ScheduleInfeasible(String),
    #[error("hour {t} outside session [{t_a}, {t_d}]")]
    DomainError { t: usize, t_a: usize, t_d: usize },
    #[error("episode finished; call reset first")]
    EpisodeFinished,
    #[error("no active session")]
    NoSession,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite action {0}")]
    NonFiniteAction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub eta: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self { eta: 0.98, a_min: -0.2, a_max: 0.2 }
    }
}

impl BatteryConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(EnvError::InvalidConfig(format!("eta {} not in (0, 1]", self.eta)));
        }
        if !(self.a_min <= 0.0 && 0.0 <= self.a_max) || !self.a_min.is_finite() || !self.a_max.is_finite() {
            return Err(EnvError::InvalidConfig(format!(
                "rate bounds [{}, {}] must bracket 0",
                self.a_min, self.a_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub sigma_p: f64,
    pub sigma_x: f64,
    pub sigma_d: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { sigma_p: 8.0, sigma_x: 15.0, sigma_d: 35.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        for (name, v) in [("sigma_p", self.sigma_p), ("sigma_x", self.sigma_x), ("sigma_d", self.sigma_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EnvError::InvalidConfig(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Normal distribution over an hour of day, clamped to ±3 sd when sampled.
/// Hours past 24 refer to the following day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeDist {
    pub mean: f64,
    pub sd: f64,
}

impl TimeDist {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }

    pub fn shifted(self, hours: f64) -> Self {
        Self { mean: self.mean + hours, ..self }
    }

    /// Sampled hour rounded to the nearest integer.
    pub fn sample_hour(&self, rng: &mut SeededRng) -> i64 {
        let z = standard_normal(rng).clamp(-3.0, 3.0);
        (self.mean + self.sd * z).round() as i64
    }
}

/// Arrival/departure time distributions per location. Weekdays use home and
/// office, weekends home and public.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub home_departure: TimeDist,
    pub office_arrival: TimeDist,
    pub office_departure: TimeDist,
    pub home_arrival: TimeDist,
    pub public_arrival: TimeDist,
    pub public_departure: TimeDist,
}

impl Schedule {
    pub fn commuter() -> Self {
        Self {
            home_departure: TimeDist::new(7.5, 1.0),
            office_arrival: TimeDist::new(8.5, 1.0),
            office_departure: TimeDist::new(17.0, 1.0),
            home_arrival: TimeDist::new(18.0, 1.5),
            public_arrival: TimeDist::new(10.0, 1.5),
            public_departure: TimeDist::new(16.0, 2.0),
        }
    }

    /// Goes to work early and comes home early.
    pub fn early_bird() -> Self {
        let base = Self::commuter();
        Self {
            home_departure: base.home_departure.shifted(-1.5),
            office_arrival: base.office_arrival.shifted(-1.5),
            office_departure: base.office_departure.shifted(-1.5),
            home_arrival: base.home_arrival.shifted(-1.5),
            ..base
        }
    }

    /// Works overtime and comes home late.
    pub fn overtime() -> Self {
        let base = Self::commuter();
        Self {
            office_departure: base.office_departure.shifted(3.0),
            home_arrival: base.home_arrival.shifted(3.0),
            ..base
        }
    }

    fn all(&self) -> [TimeDist; 6] {
        [
            self.home_departure,
            self.office_arrival,
            self.office_departure,
            self.home_arrival,
            self.public_arrival,
            self.public_departure,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub d1_range: (f64, f64),
    pub d2_mean: f64,
    pub d2_sd: f64,
    pub d2_bounds: (f64, f64),
    pub anxious_duration_range: (f64, f64),
    pub schedule: Schedule,
}

impl UserProfile {
    fn with(d1_range: (f64, f64), anxious: (f64, f64), schedule: Schedule) -> Self {
        Self {
            d1_range,
            d2_mean: 9.0,
            d2_sd: 1.0,
            d2_bounds: (6.0, 12.0),
            anxious_duration_range: anxious,
            schedule,
        }
    }

    /// The three default users: typical commuter, early bird, overtime worker.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::with((0.85, 0.95), (1.0, 4.0), Schedule::commuter()),
            Self::with((0.85, 0.9), (1.0, 2.0), Schedule::early_bird()),
            Self::with((0.9, 0.95), (2.0, 4.0), Schedule::overtime()),
        ]
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let (lo, hi) = self.d1_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(EnvError::InvalidConfig(format!("d1_range [{lo}, {hi}] not within [0, 1]")));
        }
        let (lo, hi) = self.d2_bounds;
        if !(lo <= hi) || (lo <= 0.0 && hi >= 0.0) || !lo.is_finite() || !hi.is_finite() {
            return Err(EnvError::InvalidConfig(format!("d2_bounds [{lo}, {hi}] must exclude 0")));
        }
        if !(self.d2_sd >= 0.0) || !self.d2_mean.is_finite() {
            return Err(EnvError::InvalidConfig("d2 distribution invalid".into()));
        }
        let (lo, hi) = self.anxious_duration_range;
        if !(0.0 < lo && lo <= hi && hi < 24.0) {
            return Err(EnvError::InvalidConfig(format!(
                "anxious_duration_range [{lo}, {hi}] not within (0, 24)"
            )));
        }
        if self.schedule.all().iter().any(|d| !d.mean.is_finite() || !(d.sd >= 0.0)) {
            return Err(EnvError::InvalidConfig("schedule distribution invalid".into()));
        }
        Ok(())
    }

    fn sample_uniform(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    }

    pub fn sample_d1(&self, rng: &mut SeededRng) -> f64 {
        Self::sample_uniform(rng, self.d1_range)
    }

    pub fn sample_d2(&self, rng: &mut SeededRng) -> f64 {
        (self.d2_mean + self.d2_sd * standard_normal(rng)).clamp(self.d2_bounds.0, self.d2_bounds.1)
    }

    pub fn sample_anxious_duration(&self, rng: &mut SeededRng) -> f64 {
        Self::sample_uniform(rng, self.anxious_duration_range)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DayType {
    Weekday,
    Weekend,
}

impl DayType {
    pub fn of(ts: NaiveDateTime) -> Self {
        match ts.weekday() {
            Weekday::Sat | Weekday::Sun => DayType::Weekend,
            _ => DayType::Weekday,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    Home,
    Office,
    Public,
    Driving,
}

impl Location {
    pub fn as_str(self) -> &'static str {
        match self {
            Location::Home => "home",
            Location::Office => "office",
            Location::Public => "public",
            Location::Driving => "driving",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "home" => Location::Home,
            "office" => Location::Office,
            "public" => Location::Public,
            "driving" => Location::Driving,
            _ => return None,
        })
    }
}

/// One arrival-to-departure plug-in interval. Hour indices address the price
/// series the session was sampled against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingSession {
    pub t_a: usize,
    pub t_x: usize,
    pub t_d: usize,
    pub soc_init: f64,
    pub d1: f64,
    pub d2: f64,
    pub soc_d: f64,
}

impl ChargingSession {
    /// Builds a session whose anxious time lies `anxious_hours` (rounded, at
    /// least one hour) before departure, never before arrival.
    pub fn new(t_a: usize, t_d: usize, anxious_hours: f64, soc_init: f64, d1: f64, d2: f64) -> Result<Self, EnvError> {
        if t_a >= t_d {
            return Err(EnvError::ScheduleInfeasible(format!("arrival {t_a} not before departure {t_d}")));
        }
        let len = t_d - t_a;
        let dur = (anxious_hours.round().max(1.0) as usize).min(len);
        Ok(Self { t_a, t_x: t_d - dur, t_d, soc_init: soc_init.clamp(0.0, 1.0), d1, d2, soc_d: d1 })
    }

    pub fn len(&self) -> usize {
        self.t_d - self.t_a
    }

    pub fn is_empty(&self) -> bool {
        self.t_d == self.t_a
    }
}

/// Where a training session happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionKind {
    /// Evening arrival, departure the next morning.
    Home,
    Office,
    Public,
}

/// Samples one session for `kind` on the day whose midnight is `day_start`.
pub fn sample_session_at(
    profile: &UserProfile,
    rng: &mut SeededRng,
    kind: SessionKind,
    day_start: usize,
    prices: &PriceSeries,
) -> Result<ChargingSession, EnvError> {
    let sched = &profile.schedule;
    let (arrival, departure, dep_offset) = match kind {
        SessionKind::Home => (sched.home_arrival, sched.home_departure, 24),
        SessionKind::Office => (sched.office_arrival, sched.office_departure, 0),
        SessionKind::Public => (sched.public_arrival, sched.public_departure, 0),
    };
    let horizon = prices.len() as i64;
    let mut times = None;
    for _ in 0..MAX_SCHEDULE_ATTEMPTS {
        let a = day_start as i64 + arrival.sample_hour(rng);
        let d = day_start as i64 + dep_offset + departure.sample_hour(rng);
        if a >= 0 && a < d && d < horizon {
            times = Some((a as usize, d as usize));
            break;
        }
    }
    let (t_a, t_d) = times.ok_or_else(|| {
        EnvError::ScheduleInfeasible(format!("{kind:?} session on day starting at hour {day_start}"))
    })?;
    let anxious = profile.sample_anxious_duration(rng);
    let d1 = profile.sample_d1(rng);
    let d2 = profile.sample_d2(rng);
    let soc_init = rng.random_range(0.0..=MAX_INITIAL_SOC);
    ChargingSession::new(t_a, t_d, anxious, soc_init, d1, d2)
}

/// Picks a location for the day type with equal odds, then samples it.
pub fn sample_session(
    profile: &UserProfile,
    rng: &mut SeededRng,
    day_type: DayType,
    day_start: usize,
    prices: &PriceSeries,
) -> Result<ChargingSession, EnvError> {
    let home = rng.random_bool(0.5);
    let kind = match (home, day_type) {
        (true, _) => SessionKind::Home,
        (false, DayType::Weekday) => SessionKind::Office,
        (false, DayType::Weekend) => SessionKind::Public,
    };
    sample_session_at(profile, rng, kind, day_start, prices)
}

/// Expected SoC from the anxiety curve at hour `t` of the session, clamped to [0, 1].
pub fn anxiety_target(t: usize, session: &ChargingSession) -> Result<f64, EnvError> {
    let ChargingSession { t_a, t_d, d1, d2, .. } = *session;
    if t < t_a || t > t_d {
        return Err(EnvError::DomainError { t, t_a, t_d });
    }
    let frac = (t - t_a) as f64 / (t_d - t_a) as f64;
    let value = d1 * ((-d2 * frac).exp() - 1.0) / ((-d2).exp() - 1.0);
    Ok(value.clamp(0.0, 1.0))
}

pub fn apply_driving_drain(soc: f64, hours: usize) -> f64 {
    (soc - DRIVE_DRAIN_PER_HOUR * hours as f64).max(0.0)
}

/// Reward split into its settlement terms; the total is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub price: f64,
    pub anxiety: f64,
    pub departure: f64,
}

impl RewardParts {
    pub fn total(&self) -> f64 {
        self.price + self.anxiety + self.departure
    }

    pub fn accumulate(&mut self, other: &RewardParts) {
        self.price += other.price;
        self.anxiety += other.anxiety;
        self.departure += other.departure;
    }
}

/// Reward at hour `t` of `session` given the settled SoC and the applied rate.
/// `psi` is the normalized price at `t`.
pub fn reward(
    cfg: &RewardConfig,
    session: &ChargingSession,
    t: usize,
    psi: f64,
    soc: f64,
    action: f64,
) -> Result<RewardParts, EnvError> {
    let ChargingSession { t_a, t_x, t_d, soc_d, .. } = *session;
    if t < t_a || t > t_d {
        return Err(EnvError::DomainError { t, t_a, t_d });
    }
    let mut parts = RewardParts::default();
    if t == t_d {
        parts.departure = -cfg.sigma_d * (soc_d - soc).max(0.0);
        return Ok(parts);
    }
    parts.price = -cfg.sigma_p * psi * action;
    if t >= t_x {
        let target = anxiety_target(t, session)?;
        parts.anxiety = -cfg.sigma_x * (target - soc).max(0.0);
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub battery: BatteryConfig,
    pub reward: RewardConfig,
    /// Lookback length `n`; the price window holds `n + 1` prices.
    pub price_window_n: usize,
    /// Raw prices are divided by this before use.
    pub price_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            battery: BatteryConfig::default(),
            reward: RewardConfig::default(),
            price_window_n: 24,
            price_scale: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn state_dim(&self) -> usize {
        self.price_window_n + 6
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.battery.validate()?;
        self.reward.validate()?;
        if !(self.price_scale > 0.0 && self.price_scale.is_finite()) {
            return Err(EnvError::InvalidConfig(format!("price_scale {} must be > 0", self.price_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub price_window: Vec<f64>,
    /// Hours until departure.
    pub t_d: f64,
    /// Hours until the anxious time, zero once it has passed.
    pub t_x: f64,
    pub soc: f64,
    pub soc_x: f64,
    pub soc_d: f64,
}

impl EnvState {
    pub fn dim(&self) -> usize {
        self.price_window.len() + 5
    }

    /// Network input: the price window, countdowns in days, then the SoC fields.
    pub fn to_features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.price_window);
        v.push(self.t_d / HOURS_FEATURE_SCALE);
        v.push(self.t_x / HOURS_FEATURE_SCALE);
        v.push(self.soc);
        v.push(self.soc_x);
        v.push(self.soc_d);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    /// Rate actually applied after clipping.
    pub applied_action: f64,
    pub reward: RewardParts,
    pub done: bool,
}

/// One user's environment over a price series.
#[derive(Debug, Clone)]
pub struct EvEnv {
    config: EnvConfig,
    prices: Arc<PriceSeries>,
    session: Option<ChargingSession>,
    t: usize,
    soc: f64,
    done: bool,
}

impl EvEnv {
    pub fn new(config: EnvConfig, prices: Arc<PriceSeries>) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config, prices, session: None, t: 0, soc: 0.0, done: false })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn prices(&self) -> &Arc<PriceSeries> {
        &self.prices
    }

    pub fn session(&self) -> Option<&ChargingSession> {
        self.session.as_ref()
    }

    pub fn hour(&self) -> usize {
        self.t
    }

    pub fn soc(&self) -> f64 {
        self.soc
    }

    /// Normalized price at hour `t`.
    pub fn psi(&self, t: usize) -> f64 {
        self.prices.price(t) / self.config.price_scale
    }

    pub fn reset(&mut self, session: ChargingSession) -> Result<EnvState, EnvError> {
        if session.t_a >= session.t_d || session.t_x < session.t_a || session.t_x >= session.t_d {
            return Err(EnvError::ScheduleInfeasible(format!("inconsistent session {session:?}")));
        }
        if session.t_d > self.prices.len() {
            return Err(EnvError::ScheduleInfeasible(format!(
                "departure {} beyond price horizon {}",
                session.t_d,
                self.prices.len()
            )));
        }
        self.t = session.t_a;
        self.soc = session.soc_init.clamp(0.0, 1.0);
        self.done = false;
        self.session = Some(session);
        self.observe()
    }

    fn observe(&self) -> Result<EnvState, EnvError> {
        let session = self.session.as_ref().ok_or(EnvError::NoSession)?;
        // The terminal observation may sit one hour past the series end.
        let idx = self.t.min(self.prices.len() - 1);
        let raw = window(&self.prices, idx, self.config.price_window_n)
            .expect("index clamped into series");
        Ok(EnvState {
            price_window: raw.into_iter().map(|p| p / self.config.price_scale).collect(),
            t_d: (session.t_d - self.t) as f64,
            t_x: session.t_x.saturating_sub(self.t) as f64,
            soc: self.soc,
            soc_x: anxiety_target(self.t, session)?,
            soc_d: session.soc_d,
        })
    }

    /// Clips `action` to the rate bounds and to what keeps SoC within [0, 1].
    pub fn feasible_action(&self, action: f64) -> f64 {
        let b = &self.config.battery;
        let a = action.clamp(b.a_min, b.a_max);
        a.clamp(-self.soc / b.eta, (1.0 - self.soc) / b.eta)
    }

    pub fn step(&mut self, action: f64) -> Result<StepOutcome, EnvError> {
        if !action.is_finite() {
            return Err(EnvError::NonFiniteAction(action));
        }
        let session = self.session.clone().ok_or(EnvError::NoSession)?;
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let eta = self.config.battery.eta;
        let mut applied = self.feasible_action(action);
        let mut next = self.soc + eta * applied;
        if next > 1.0 {
            next = 1.0;
            applied = (1.0 - self.soc) / eta;
        } else if next < 0.0 {
            next = 0.0;
            applied = -self.soc / eta;
        }
        let mut parts = reward(&self.config.reward, &session, self.t, self.psi(self.t), next, applied)?;
        self.t += 1;
        self.soc = next;
        if self.t == session.t_d {
            self.done = true;
            let dep = reward(&self.config.reward, &session, self.t, 0.0, next, 0.0)?;
            parts.accumulate(&dep);
        }
        Ok(StepOutcome { state: self.observe()?, applied_action: applied, reward: parts, done: self.done })
    }
}
