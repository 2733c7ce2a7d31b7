//! One-week trip simulation and evaluation metrics.
//!
//! Each EV follows a weekly plan of parked and driving legs. Parked legs are
//! charging sessions controlled by a policy; driving legs drain the battery
//! and carry no action. The hourly trace feeds plot exports and the
//! action/price correlation used to judge demand response.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use chrono::{Duration, NaiveDateTime};
use thiserror::Error;

use crate::ev_env::{
    apply_driving_drain, sample_session_at, ChargingSession, DayType, EnvConfig, EnvError, EvEnv, Location,
    RewardParts, SessionKind, TimeDist, UserProfile,
};
use crate::federation::RoundLog;
use crate::neural::{sample_action, ActionBounds, GaussianPolicyNet, NeuralError, ParamVector, Squash};
use crate::price_data::PriceSeries;
use crate::rng::{seeded, SeededRng};
use crate::sac::SacConfig;

pub const WEEK_HOURS: usize = 168;
pub const PLOT_HEADER: [&str; 7] = ["hour", "ev", "location", "price", "soc", "action", "cumulative_cost"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}")]
    InvalidPlan(String),
    #[error("price series has {have} hours from the start index, {need} needed")]
    InsufficientPrices { have: usize, need: usize },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("correlation undefined: {0}")]
    DegenerateVariance(String),
    #[error("malformed plot data at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Leg {
    pub location: Location,
    /// First hour of the leg, counted from the week start.
    pub start: usize,
    /// One past the last hour.
    pub end: usize,
}

impl Leg {
    pub fn hours(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeekPlan {
    pub ev: usize,
    pub legs: Vec<Leg>,
}

impl WeekPlan {
    /// Legs tile `[0, 168)` in order, and every driving leg sits between two
    /// different parked locations.
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut at = 0;
        for leg in &self.legs {
            if leg.start != at || leg.end <= leg.start {
                return Err(EvalError::InvalidPlan(format!("EV {}: leg {leg:?} does not continue at {at}", self.ev)));
            }
            at = leg.end;
        }
        if at != WEEK_HOURS {
            return Err(EvalError::InvalidPlan(format!("EV {}: legs cover {at} hours", self.ev)));
        }
        for w in self.legs.windows(2) {
            if (w[0].location == Location::Driving) == (w[1].location == Location::Driving) {
                return Err(EvalError::InvalidPlan(format!("EV {}: legs {:?} and {:?} not alternating", self.ev, w[0], w[1])));
            }
        }
        for w in self.legs.windows(3) {
            if w[1].location == Location::Driving && w[0].location == w[2].location {
                return Err(EvalError::InvalidPlan(format!("EV {}: drive at {} returns to the same place", self.ev, w[1].start)));
            }
        }
        Ok(())
    }

    pub fn driving_legs_on_day(&self, day: usize) -> usize {
        let (lo, hi) = (day * 24, day * 24 + 24);
        self.legs.iter().filter(|l| l.location == Location::Driving && l.start >= lo && l.start < hi).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeekOptions {
    /// Length of every driving leg.
    pub drive_hours: usize,
    /// SoC at the start of the week.
    pub initial_soc: f64,
}

impl Default for WeekOptions {
    fn default() -> Self {
        Self { drive_hours: 1, initial_soc: 0.5 }
    }
}

/// Builds one plan per profile for the week starting at midnight `start`.
/// Weekdays commute home, office, home; weekends go home, public, home.
pub fn build_week_plan(
    profiles: &[UserProfile],
    rng: &mut SeededRng,
    start: NaiveDateTime,
    opts: &WeekOptions,
) -> Result<Vec<WeekPlan>, EvalError> {
    let drive = opts.drive_hours as i64;
    if drive < 1 {
        return Err(EvalError::InvalidPlan("drive_hours must be at least 1".into()));
    }
    let mut plans = Vec::with_capacity(profiles.len());
    for (ev, profile) in profiles.iter().enumerate() {
        let s = &profile.schedule;
        let mut legs = Vec::new();
        let mut at: i64 = 0;
        for day in 0..7i64 {
            let base = day * 24;
            let (out_dep, back_dep, away) = match DayType::of(start + Duration::days(day)) {
                DayType::Weekday => (s.home_departure, s.office_departure, Location::Office),
                // arrival times are the anchors on weekends
                DayType::Weekend => (s.public_arrival.shifted(-(drive as f64)), s.public_departure, Location::Public),
            };
            let leave = base + out_dep.sample_hour(rng);
            let ret = base + back_dep.sample_hour(rng);
            let leave = leave.max(at + 1);
            let arrive = leave + drive;
            let ret = ret.max(arrive + 1);
            let home = ret + drive;
            if home >= base + 24 || home >= WEEK_HOURS as i64 {
                return Err(EvalError::Env(EnvError::ScheduleInfeasible(format!(
                    "EV {ev}: day {day} trip ends at hour {home}"
                ))));
            }
            let mut push = |location, a: i64, b: i64| legs.push(Leg { location, start: a as usize, end: b as usize });
            push(Location::Home, at, leave);
            push(Location::Driving, leave, arrive);
            push(away, arrive, ret);
            push(Location::Driving, ret, home);
            at = home;
        }
        legs.push(Leg { location: Location::Home, start: at as usize, end: WEEK_HOURS });
        let plan = WeekPlan { ev, legs };
        plan.validate()?;
        plans.push(plan);
    }
    Ok(plans)
}

/// Maps a state feature vector to a requested rate.
pub trait ChargingPolicy {
    fn action(&mut self, state: &[f64]) -> f64;
}

/// Deterministic Gaussian policy: the mean mapped into the rate bounds.
#[derive(Debug, Clone)]
pub struct MeanPolicy {
    pub net: GaussianPolicyNet,
    pub bounds: ActionBounds,
    pub squash: Squash,
}

impl MeanPolicy {
    /// Builds the policy network `sac` and `env` imply and loads `params` into it.
    pub fn from_params(sac: &SacConfig, env: &EnvConfig, params: &ParamVector) -> Result<Self, EvalError> {
        let mut net = GaussianPolicyNet::new(env.state_dim(), &sac.policy_hidden, &mut seeded(0));
        net.set_params(params)?;
        let bounds = ActionBounds { low: env.battery.a_min, high: env.battery.a_max };
        Ok(Self { net, bounds, squash: sac.squash })
    }
}

impl ChargingPolicy for MeanPolicy {
    fn action(&mut self, state: &[f64]) -> f64 {
        // the rng is unused in deterministic mode
        sample_action(&self.net, state, &mut seeded(0), true, &self.bounds, self.squash)
            .expect("state width matches the policy input")
            .action
    }
}

impl<F: FnMut(&[f64]) -> f64> ChargingPolicy for F {
    fn action(&mut self, state: &[f64]) -> f64 {
        self(state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub hour: usize,
    pub ev: usize,
    pub location: Location,
    /// Raw price at this hour.
    pub price: f64,
    /// SoC at the end of the hour.
    pub soc: f64,
    /// Applied rate; zero while driving.
    pub action: f64,
    /// Running sum of `sigma_p * psi * action` for this EV.
    pub cumulative_cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HourlyTrace {
    pub rows: Vec<TraceRow>,
}

impl HourlyTrace {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalMetrics {
    /// Sum of `sigma_p * psi * a` over plugged hours (the negated price reward).
    pub total_cost: f64,
    /// Sum of anxiety penalties (negated anxiety reward).
    pub total_anxiety: f64,
    /// Sum of departure penalties (negated departure reward).
    pub total_departure: f64,
    /// Per session, `max(SoC_d - SoC, 0)` at departure.
    pub departure_shortfalls: Vec<f64>,
    /// Reward per EV for a week, per session for held-out rollouts.
    pub mean_reward: f64,
}

/// Runs every EV through its plan with `policy` on `prices` from index `start`.
/// Anxiety parameters for each parked leg are drawn from the EV's profile.
#[allow(clippy::too_many_arguments)]
pub fn simulate_week<P: ChargingPolicy>(
    policy: &mut P,
    plans: &[WeekPlan],
    profiles: &[UserProfile],
    prices: Arc<PriceSeries>,
    start: usize,
    env_config: &EnvConfig,
    opts: &WeekOptions,
    rng: &mut SeededRng,
) -> Result<(HourlyTrace, EvalMetrics), EvalError> {
    let have = prices.len().saturating_sub(start);
    if have < WEEK_HOURS {
        return Err(EvalError::InsufficientPrices { have, need: WEEK_HOURS });
    }
    if plans.len() != profiles.len() {
        return Err(EvalError::InvalidPlan(format!("{} plans for {} profiles", plans.len(), profiles.len())));
    }
    let sigma_p = env_config.reward.sigma_p;
    let mut env = EvEnv::new(env_config.clone(), Arc::clone(&prices))?;
    let mut trace = HourlyTrace::default();
    let mut metrics = EvalMetrics::default();
    let mut total = RewardParts::default();
    for (plan, profile) in plans.iter().zip(profiles) {
        plan.validate()?;
        let mut soc = opts.initial_soc.clamp(0.0, 1.0);
        let mut cost = 0.0;
        for leg in &plan.legs {
            if leg.location == Location::Driving {
                for h in leg.start..leg.end {
                    soc = apply_driving_drain(soc, 1);
                    trace.rows.push(TraceRow {
                        hour: h,
                        ev: plan.ev,
                        location: Location::Driving,
                        price: prices.price(start + h),
                        soc,
                        action: 0.0,
                        cumulative_cost: cost,
                    });
                }
                continue;
            }
            let anxious = profile.sample_anxious_duration(rng);
            let d1 = profile.sample_d1(rng);
            let d2 = profile.sample_d2(rng);
            let session = ChargingSession::new(start + leg.start, start + leg.end, anxious, soc, d1, d2)?;
            let mut state = env.reset(session.clone())?.to_features();
            for h in leg.start..leg.end {
                let out = env.step(policy.action(&state))?;
                total.accumulate(&out.reward);
                soc = out.state.soc;
                cost += sigma_p * env.psi(start + h) * out.applied_action;
                trace.rows.push(TraceRow {
                    hour: h,
                    ev: plan.ev,
                    location: leg.location,
                    price: prices.price(start + h),
                    soc,
                    action: out.applied_action,
                    cumulative_cost: cost,
                });
                state = out.state.to_features();
            }
            metrics.departure_shortfalls.push((session.soc_d - soc).max(0.0));
        }
        metrics.total_cost += cost;
    }
    metrics.total_anxiety = -total.anxiety;
    metrics.total_departure = -total.departure;
    metrics.mean_reward = total.total() / plans.len().max(1) as f64;
    Ok((trace, metrics))
}

/// First midnight in `segments` followed by a full week of prices, as
/// `(segment index, hour index)`.
pub fn first_week_start(segments: &[Arc<PriceSeries>]) -> Option<(usize, usize)> {
    segments
        .iter()
        .enumerate()
        .find_map(|(i, s)| s.midnights().into_iter().find(|&m| m + WEEK_HOURS <= s.len()).map(|m| (i, m)))
}

/// Overnight home sessions from every held-out midnight with 48 hours of
/// room, one per profile. Trace hours count across segments.
pub fn evaluate_held_out<P: ChargingPolicy>(
    policy: &mut P,
    profiles: &[UserProfile],
    segments: &[Arc<PriceSeries>],
    env_config: &EnvConfig,
    rng: &mut SeededRng,
) -> Result<(HourlyTrace, EvalMetrics), EvalError> {
    let sigma_p = env_config.reward.sigma_p;
    let mut trace = HourlyTrace::default();
    let mut metrics = EvalMetrics::default();
    let mut total = RewardParts::default();
    let mut costs = vec![0.0; profiles.len()];
    let mut offset = 0;
    let mut sessions = 0;
    for seg in segments {
        let mut env = EvEnv::new(env_config.clone(), Arc::clone(seg))?;
        for m in seg.midnights().into_iter().filter(|&m| m + 48 <= seg.len()) {
            for (ev, profile) in profiles.iter().enumerate() {
                let session = sample_session_at(profile, rng, SessionKind::Home, m, seg)?;
                let mut state = env.reset(session.clone())?.to_features();
                for h in session.t_a..session.t_d {
                    let out = env.step(policy.action(&state))?;
                    total.accumulate(&out.reward);
                    costs[ev] += sigma_p * env.psi(h) * out.applied_action;
                    trace.rows.push(TraceRow {
                        hour: offset + h,
                        ev,
                        location: Location::Home,
                        price: seg.price(h),
                        soc: out.state.soc,
                        action: out.applied_action,
                        cumulative_cost: costs[ev],
                    });
                    state = out.state.to_features();
                }
                metrics.departure_shortfalls.push((session.soc_d - env.soc()).max(0.0));
                sessions += 1;
            }
        }
        offset += seg.len();
    }
    metrics.total_cost = costs.iter().sum();
    metrics.total_anxiety = -total.anxiety;
    metrics.total_departure = -total.departure;
    metrics.mean_reward = total.total() / sessions.max(1) as f64;
    Ok((trace, metrics))
}

/// Writes the trace as CSV. An empty trace is rejected before any file is created.
pub fn export_plot_data(trace: &HourlyTrace, path: impl AsRef<Path>) -> Result<(), EvalError> {
    if trace.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PLOT_HEADER)?;
    for r in &trace.rows {
        w.write_record([
            r.hour.to_string(),
            r.ev.to_string(),
            r.location.as_str().to_string(),
            r.price.to_string(),
            r.soc.to_string(),
            r.action.to_string(),
            r.cumulative_cost.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plot_data(path: impl AsRef<Path>) -> Result<HourlyTrace, EvalError> {
    let mut rdr = csv::Reader::from_reader(fs::File::open(path)?);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != PLOT_HEADER {
        return Err(EvalError::MalformedRow { line: 1, reason: format!("unexpected header {header:?}") });
    }
    let mut trace = HourlyTrace::default();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let bad = |reason: String| EvalError::MalformedRow { line, reason };
        let num = |k: usize| -> Result<f64, EvalError> {
            rec.get(k).unwrap_or("").parse().map_err(|e| bad(format!("column {}: {e}", PLOT_HEADER[k])))
        };
        let int = |k: usize| -> Result<usize, EvalError> {
            rec.get(k).unwrap_or("").parse().map_err(|e| bad(format!("column {}: {e}", PLOT_HEADER[k])))
        };
        let location = Location::parse(rec.get(2).unwrap_or(""))
            .ok_or_else(|| bad(format!("unknown location {:?}", rec.get(2))))?;
        trace.rows.push(TraceRow {
            hour: int(0)?,
            ev: int(1)?,
            location,
            price: num(3)?,
            soc: num(4)?,
            action: num(5)?,
            cumulative_cost: num(6)?,
        });
    }
    Ok(trace)
}

/// Per-episode means over agents.
pub fn export_training_curves(logs: &[RoundLog], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "reward", "price_reward", "anxiety_reward", "departure_reward"])?;
    for l in logs {
        let n = l.records.len().max(1) as f64;
        let mean = |f: fn(&RewardParts) -> f64| l.records.iter().map(|r| f(&r.reward)).sum::<f64>() / n;
        w.write_record([
            l.episode.to_string(),
            mean(RewardParts::total).to_string(),
            mean(|p| p.price).to_string(),
            mean(|p| p.anxiety).to_string(),
            mean(|p| p.departure).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pearson correlation between two equal-length samples.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(EvalError::DegenerateVariance(format!("{} paired samples", x.len().min(y.len()))));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(EvalError::DegenerateVariance("zero variance".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation between applied action and price over plugged hours.
pub fn price_responsiveness(trace: &HourlyTrace) -> Result<f64, EvalError> {
    let (actions, prices): (Vec<f64>, Vec<f64>) = trace
        .rows
        .iter()
        .filter(|r| r.location != Location::Driving)
        .map(|r| (r.action, r.price))
        .unzip();
    pearson(&actions, &prices)
}

/// A profile whose schedules never vary, handy for reproducible plans.
pub fn fixed_schedule(profile: &UserProfile) -> UserProfile {
    let pin = |d: TimeDist| TimeDist::new(d.mean, 0.0);
    let mut p = profile.clone();
    let s = &mut p.schedule;
    for d in [
        &mut s.home_departure,
        &mut s.office_arrival,
        &mut s.office_departure,
        &mut s.home_arrival,
        &mut s.public_arrival,
        &mut s.public_departure,
    ] {
        *d = pin(*d);
    }
    p
}
