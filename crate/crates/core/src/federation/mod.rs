//! Federated training loop.
//!
//! Each episode has three phases. Agents first roll out one charging session
//! in their own environment (after the first episode they start from the
//! broadcast global models), then run their local SAC updates. Finally the
//! server averages the uploaded policy and critic parameters uniformly and the
//! result is broadcast at the start of the next episode. Only parameter
//! vectors ever leave an agent; replay buffers, optimizer state, value
//! networks and the temperature stay local unless configured otherwise.

pub mod checkpoint;

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ev_env::{sample_session, DayType, EnvConfig, EnvError, EvEnv, RewardParts, UserProfile};
use crate::neural::{ActionBounds, NeuralError, ParamVector, TensorSpec};
use crate::price_data::{PriceSeries, PriceSplit};
use crate::rng::seeded;
use crate::sac::{SacAgent, SacConfig, SacError, Transition, UpdateStats};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

/// Sessions are drawn only from days with this many hours left in their
/// segment, so overnight home sessions always fit.
const DAY_ROOM_HOURS: usize = 48;
const SESSION_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("aggregation needs at least one parameter vector")]
    EmptyInput,
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("agent {agent} produced non-finite parameters in episode {episode} ({stage} update)")]
    NonFinite { agent: usize, episode: usize, stage: &'static str },
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("no training day leaves room for a session")]
    NoTrainingDays,
    #[error("agent {agent}: {source}")]
    Agent { agent: usize, source: SacError },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NeuralError> for FedError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::CorruptPayload(m) => FedError::CorruptPayload(m),
            NeuralError::LayoutMismatch(m) => FedError::LayoutMismatch(m),
            other @ NeuralError::ShapeMismatch { .. } => FedError::LayoutMismatch(other.to_string()),
        }
    }
}

/// Uniform elementwise mean, accumulated in input order as a running mean
/// `m_k = m_{k-1} + (x_k - m_{k-1}) / k`, which returns identical inputs
/// unchanged bit for bit.
pub fn aggregate(params: &[&ParamVector]) -> Result<ParamVector, FedError> {
    let (first, rest) = params.split_first().ok_or(FedError::EmptyInput)?;
    let mut out = (*first).clone();
    for (i, p) in rest.iter().enumerate() {
        out.check_layout(p)?;
        let k = (i + 2) as f64;
        for (o, v) in out.values_mut().iter_mut().zip(p.values()) {
            *o += (v - *o) / k;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub n_agents: usize,
    pub episodes: usize,
    pub seed: u64,
    pub aggregate_value_nets: bool,
    pub aggregate_alpha: bool,
    /// Episodes between aggregations.
    pub sync_every: usize,
    /// Worker threads for the agent phases; 0 uses every available core.
    pub workers: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_agents: 3,
            episodes: 250,
            seed: 0,
            aggregate_value_nets: false,
            aggregate_alpha: false,
            sync_every: 1,
            workers: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.n_agents == 0 {
            return Err(FedError::InvalidConfig("n_agents must be at least 1".into()));
        }
        if self.episodes == 0 {
            return Err(FedError::InvalidConfig("episodes must be at least 1".into()));
        }
        if self.sync_every == 0 {
            return Err(FedError::InvalidConfig("sync_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn agent_seed(&self, agent: usize) -> u64 {
        self.seed.wrapping_mul(1_000_000).wrapping_add(agent as u64)
    }
}

/// Server-side models.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModels {
    pub phi: ParamVector,
    pub theta: [ParamVector; 2],
    pub values: Option<[ParamVector; 2]>,
    pub value_targets: Option<[ParamVector; 2]>,
    pub log_alpha: Option<f64>,
}

/// One agent's line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentRecord {
    pub episode: usize,
    pub agent: usize,
    pub reward: RewardParts,
    pub steps: usize,
    /// Mean update diagnostics; `None` while the buffer is still filling.
    pub update: Option<UpdateStats>,
    pub alpha: f64,
}

impl AgentRecord {
    pub fn total_reward(&self) -> f64 {
        self.reward.total()
    }
}

#[derive(Debug, Clone)]
pub struct RoundLog {
    pub episode: usize,
    pub records: Vec<AgentRecord>,
    /// Wall-clock time; ignored by equality and not checkpointed.
    pub duration: Duration,
}

impl PartialEq for RoundLog {
    fn eq(&self, other: &Self) -> bool {
        self.episode == other.episode && self.records == other.records
    }
}

pub const ROUND_LOG_HEADER: &str =
    "episode,agent,reward,price_reward,anxiety_reward,departure_reward,critic_loss,value_loss,actor_loss,alpha";

pub fn write_round_log_csv<W: Write>(logs: &[RoundLog], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{ROUND_LOG_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in logs.iter().flat_map(|l| &l.records) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.episode,
            r.agent,
            r.total_reward(),
            r.reward.price,
            r.reward.anxiety,
            r.reward.departure,
            opt(r.update.map(|u| u.critic_loss)),
            opt(r.update.map(|u| u.value_loss)),
            opt(r.update.map(|u| u.actor_loss)),
            r.alpha,
        )?;
    }
    Ok(())
}

/// Training price segments and the days sessions may start on.
#[derive(Debug, Clone)]
pub struct TrainingData {
    segments: Vec<Arc<PriceSeries>>,
    days: Vec<(usize, usize)>,
}

impl TrainingData {
    pub fn new(segments: Vec<Arc<PriceSeries>>) -> Result<Self, FedError> {
        let days: Vec<(usize, usize)> = segments
            .iter()
            .enumerate()
            .flat_map(|(s, seg)| {
                seg.midnights().into_iter().filter(|&m| m + DAY_ROOM_HOURS <= seg.len()).map(move |m| (s, m))
            })
            .collect();
        if days.is_empty() {
            return Err(FedError::NoTrainingDays);
        }
        Ok(Self { segments, days })
    }

    pub fn from_split(split: &PriceSplit) -> Result<Self, FedError> {
        Self::new(split.train.iter().cloned().map(Arc::new).collect())
    }

    pub fn segments(&self) -> &[Arc<PriceSeries>] {
        &self.segments
    }

    pub fn day_count(&self) -> usize {
        self.days.len()
    }
}

/// One agent with its environments (one per training segment).
#[derive(Debug, Clone)]
pub struct AgentWorker {
    pub id: usize,
    pub agent: SacAgent,
    pub profile: UserProfile,
    envs: Vec<EvEnv>,
}

impl AgentWorker {
    pub fn new(
        id: usize,
        seed: u64,
        sac: &SacConfig,
        env: &EnvConfig,
        profile: UserProfile,
        data: &TrainingData,
    ) -> Result<Self, FedError> {
        let bounds = ActionBounds { low: env.battery.a_min, high: env.battery.a_max };
        let agent = SacAgent::new(env.state_dim(), bounds, sac.clone(), seeded(seed))
            .map_err(|source| FedError::Agent { agent: id, source })?;
        Self::with_agent(id, agent, env, profile, data)
    }

    pub fn with_agent(
        id: usize,
        agent: SacAgent,
        env: &EnvConfig,
        profile: UserProfile,
        data: &TrainingData,
    ) -> Result<Self, FedError> {
        profile.validate()?;
        let envs = data
            .segments
            .iter()
            .map(|s| EvEnv::new(env.clone(), Arc::clone(s)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { id, agent, profile, envs })
    }

    fn wrap(&self, episode: usize) -> impl Fn(SacError) -> FedError + '_ {
        move |e| match e {
            SacError::NonFinite { stage } => FedError::NonFinite { agent: self.id, episode, stage },
            source => FedError::Agent { agent: self.id, source },
        }
    }

    /// Phases I and II for one episode: sample a session on a random training
    /// day, roll it out with the stochastic policy, then run the update schedule.
    pub fn run_episode(&mut self, episode: usize, data: &TrainingData) -> Result<AgentRecord, FedError> {
        let (seg, session) = self.sample_session(data)?;
        let env = &mut self.envs[seg];
        let mut state = env.reset(session)?.to_features();
        let mut total = RewardParts::default();
        let mut steps = 0;
        loop {
            let sample = self.agent.act(&state, false).map_err(|e| FedError::Agent { agent: self.id, source: e })?;
            let out = env.step(sample.action)?;
            let next = out.state.to_features();
            total.accumulate(&out.reward);
            steps += 1;
            self.agent.remember(Transition {
                state: std::mem::replace(&mut state, next.clone()),
                action: sample.action,
                reward: out.reward.total(),
                next_state: next,
                done: out.done,
            });
            if out.done {
                break;
            }
        }
        let update = self.agent.train_after_episode(steps).map_err(self.wrap(episode))?;
        Ok(AgentRecord { episode, agent: self.id, reward: total, steps, update, alpha: self.agent.models.alpha() })
    }

    fn sample_session(&mut self, data: &TrainingData) -> Result<(usize, crate::ev_env::ChargingSession), FedError> {
        let mut last = None;
        for _ in 0..SESSION_ATTEMPTS {
            let (seg, day) = data.days[self.agent.rng.random_range(0..data.days.len())];
            let prices = &data.segments[seg];
            let day_type = DayType::of(prices.timestamp(day));
            match sample_session(&self.profile, &mut self.agent.rng, day_type, day, prices) {
                Ok(s) => return Ok((seg, s)),
                Err(e @ EnvError::ScheduleInfeasible(_)) => last = Some(e),
                Err(e) => return Err(e.into()),
            }
        }
        Err(last.expect("at least one attempt").into())
    }

    /// Local models that are uploaded under `fed`.
    fn upload(&self, fed: &FedConfig) -> Upload<'_> {
        let m = &self.agent.models;
        Upload {
            phi: m.policy.params(),
            theta: [m.critics[0].params(), m.critics[1].params()],
            values: fed.aggregate_value_nets.then(|| [m.values[0].params(), m.values[1].params()]),
            value_targets: fed
                .aggregate_value_nets
                .then(|| [m.value_targets[0].params(), m.value_targets[1].params()]),
            log_alpha: fed.aggregate_alpha.then_some(m.log_alpha),
        }
    }

    /// Overwrites the shared local models with the globals.
    pub fn receive(&mut self, g: &GlobalModels) -> Result<(), FedError> {
        let m = &mut self.agent.models;
        m.policy.set_params(&g.phi)?;
        for k in 0..2 {
            m.critics[k].set_params(&g.theta[k])?;
            if let Some(v) = &g.values {
                m.values[k].set_params(&v[k])?;
            }
            if let Some(v) = &g.value_targets {
                m.value_targets[k].set_params(&v[k])?;
            }
        }
        if let Some(a) = g.log_alpha {
            m.log_alpha = a;
        }
        Ok(())
    }
}

struct Upload<'a> {
    phi: &'a ParamVector,
    theta: [&'a ParamVector; 2],
    values: Option<[&'a ParamVector; 2]>,
    value_targets: Option<[&'a ParamVector; 2]>,
    log_alpha: Option<f64>,
}

fn mean_of(items: Vec<&ParamVector>) -> Result<ParamVector, FedError> {
    aggregate(&items)
}

fn mean_pair(pairs: Option<Vec<[&ParamVector; 2]>>) -> Result<Option<[ParamVector; 2]>, FedError> {
    match pairs {
        None => Ok(None),
        Some(p) => Ok(Some([
            mean_of(p.iter().map(|x| x[0]).collect())?,
            mean_of(p.iter().map(|x| x[1]).collect())?,
        ])),
    }
}

/// Phase III: averages every uploaded model.
fn server_round(uploads: &[Upload<'_>]) -> Result<GlobalModels, FedError> {
    let log_alpha = match uploads.iter().map(|u| u.log_alpha).collect::<Option<Vec<f64>>>() {
        Some(vals) => {
            let pvs = vals
                .into_iter()
                .map(|v| ParamVector::from_parts(vec![TensorSpec::new("log_alpha", &[1])], vec![v]))
                .collect::<Result<Vec<_>, _>>()?;
            Some(aggregate(&pvs.iter().collect::<Vec<_>>())?.values()[0])
        }
        None => None,
    };
    Ok(GlobalModels {
        phi: mean_of(uploads.iter().map(|u| u.phi).collect())?,
        theta: [
            mean_of(uploads.iter().map(|u| u.theta[0]).collect())?,
            mean_of(uploads.iter().map(|u| u.theta[1]).collect())?,
        ],
        values: mean_pair(uploads.iter().map(|u| u.values).collect())?,
        value_targets: mean_pair(uploads.iter().map(|u| u.value_targets).collect())?,
        log_alpha,
    })
}

/// Synchronous federated trainer.
pub struct Trainer {
    pub fed: FedConfig,
    pub sac: SacConfig,
    pub env: EnvConfig,
    pub profiles: Vec<UserProfile>,
    pub workers: Vec<AgentWorker>,
    pub globals: Option<GlobalModels>,
    /// Whether the globals are due to be broadcast before the next rollout.
    pub pending_broadcast: bool,
    /// Episodes finished so far.
    pub completed: usize,
    pub logs: Vec<RoundLog>,
    data: Arc<TrainingData>,
    pool: rayon::ThreadPool,
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool, FedError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| FedError::InvalidConfig(format!("worker pool: {e}")))
}

impl Trainer {
    /// Agent `i` uses `profiles[i % profiles.len()]`.
    pub fn new(
        fed: FedConfig,
        sac: SacConfig,
        env: EnvConfig,
        profiles: Vec<UserProfile>,
        data: Arc<TrainingData>,
    ) -> Result<Self, FedError> {
        fed.validate()?;
        env.validate()?;
        sac.validate().map_err(|source| FedError::Agent { agent: 0, source })?;
        if profiles.is_empty() {
            return Err(FedError::InvalidConfig("at least one user profile is required".into()));
        }
        let workers = (0..fed.n_agents)
            .map(|i| AgentWorker::new(i, fed.agent_seed(i), &sac, &env, profiles[i % profiles.len()].clone(), &data))
            .collect::<Result<Vec<_>, _>>()?;
        let pool = build_pool(fed.workers)?;
        Ok(Self {
            fed,
            sac,
            env,
            profiles,
            workers,
            globals: None,
            pending_broadcast: false,
            completed: 0,
            logs: Vec::new(),
            data,
            pool,
        })
    }

    pub fn data(&self) -> &Arc<TrainingData> {
        &self.data
    }

    pub fn is_finished(&self) -> bool {
        self.completed >= self.fed.episodes
    }

    /// Runs one full round and returns its log.
    pub fn run_episode(&mut self) -> Result<&RoundLog, FedError> {
        let episode = self.completed + 1;
        let start = Instant::now();
        if self.pending_broadcast {
            let g = self.globals.as_ref().expect("broadcast pending implies globals");
            for w in &mut self.workers {
                w.receive(g)?;
            }
            self.pending_broadcast = false;
        }
        let data = Arc::clone(&self.data);
        let workers = &mut self.workers;
        let records: Vec<Result<AgentRecord, FedError>> = self.pool.install(|| {
            use rayon::prelude::*;
            workers.par_iter_mut().map(|w| w.run_episode(episode, &data)).collect()
        });
        let records = records.into_iter().collect::<Result<Vec<_>, _>>()?;

        if episode.is_multiple_of(self.fed.sync_every) || episode == self.fed.episodes {
            let uploads: Vec<Upload<'_>> = self.workers.iter().map(|w| w.upload(&self.fed)).collect();
            self.globals = Some(server_round(&uploads)?);
            self.pending_broadcast = true;
        }
        self.completed = episode;
        self.logs.push(RoundLog { episode, records, duration: start.elapsed() });
        Ok(self.logs.last().expect("just pushed"))
    }

    /// Runs until `fed.episodes` rounds are complete, calling `on_round` after each.
    pub fn run(&mut self, mut on_round: impl FnMut(&RoundLog)) -> Result<(), FedError> {
        while !self.is_finished() {
            let log = self.run_episode()?;
            on_round(log);
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final globals with the full log.
pub fn run_training(
    fed: FedConfig,
    sac: SacConfig,
    env: EnvConfig,
    profiles: Vec<UserProfile>,
    data: Arc<TrainingData>,
) -> Result<(GlobalModels, Vec<RoundLog>), FedError> {
    let mut trainer = Trainer::new(fed, sac, env, profiles, data)?;
    trainer.run(|_| {})?;
    let globals = trainer.globals.take().expect("at least one aggregation");
    Ok((globals, trainer.logs))
}
