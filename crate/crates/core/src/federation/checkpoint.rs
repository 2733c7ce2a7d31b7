//! Checkpoint files.
//!
//! Layout: the 8-byte magic `FEDCKPT\0`, a little-endian `u32` format version,
//! a `u64` manifest length and the JSON manifest, then one section per name
//! listed in the manifest, each a `u64` length followed by a parameter
//! payload. Every floating-point value lives in a payload so it round-trips
//! bit for bit; the manifest carries configs, counters and RNG positions.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{build_pool, AgentRecord, AgentWorker, FedConfig, FedError, GlobalModels, RoundLog, Trainer, TrainingData};
use crate::ev_env::{EnvConfig, RewardParts, UserProfile};
use crate::neural::{ActionBounds, AdamState, Mlp, ParamVector, TensorSpec};
use crate::rng::{seeded, RngState};
use crate::sac::agent::log_alpha_layout;
use crate::sac::{AgentModels, Optimizers, ReplayBuffer, SacAgent, SacConfig, UpdateStats};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FEDCKPT\0";
const LOG_COLUMNS: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AgentManifest {
    profile: UserProfile,
    rng: RngState,
    /// Adam step counters: policy, critic 0/1, value 0/1, temperature.
    adam_steps: [u64; 6],
    buffer_capacity: usize,
    buffer_cursor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    completed: usize,
    pending_broadcast: bool,
    fed: FedConfig,
    sac: SacConfig,
    env: EnvConfig,
    profiles: Vec<UserProfile>,
    agents: Vec<AgentManifest>,
    has_globals: bool,
    sections: Vec<String>,
}

/// Everything needed to continue a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub completed: usize,
    pub pending_broadcast: bool,
    pub fed: FedConfig,
    pub sac: SacConfig,
    pub env: EnvConfig,
    pub profiles: Vec<UserProfile>,
    pub globals: Option<GlobalModels>,
    pub agents: Vec<(UserProfile, SacAgent)>,
    pub logs: Vec<RoundLog>,
}

fn scalar(v: f64) -> ParamVector {
    ParamVector::from_parts(log_alpha_layout(), vec![v]).expect("one value")
}

fn template(cfg: &SacConfig, env: &EnvConfig) -> AgentModels {
    let bounds = ActionBounds { low: env.battery.a_min, high: env.battery.a_max };
    AgentModels::new(env.state_dim(), cfg, bounds, &mut seeded(0))
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            completed: t.completed,
            pending_broadcast: t.pending_broadcast,
            fed: t.fed.clone(),
            sac: t.sac.clone(),
            env: t.env.clone(),
            profiles: t.profiles.clone(),
            globals: t.globals.clone(),
            agents: t.workers.iter().map(|w| (w.profile.clone(), w.agent.clone())).collect(),
            logs: t.logs.clone(),
        }
    }

    /// Rebuilds the trainer on `data`, which must be the run's training prices.
    pub fn into_trainer(self, data: Arc<TrainingData>) -> Result<Trainer, FedError> {
        let workers = self
            .agents
            .into_iter()
            .enumerate()
            .map(|(i, (profile, agent))| AgentWorker::with_agent(i, agent, &self.env, profile, &data))
            .collect::<Result<Vec<_>, _>>()?;
        let pool = build_pool(self.fed.workers)?;
        Ok(Trainer {
            fed: self.fed,
            sac: self.sac,
            env: self.env,
            profiles: self.profiles,
            workers,
            globals: self.globals,
            pending_broadcast: self.pending_broadcast,
            completed: self.completed,
            logs: self.logs,
            data,
            pool,
        })
    }

    /// Policy parameters for deployment: the globals when present, else agent 0.
    pub fn policy_params(&self) -> &ParamVector {
        match &self.globals {
            Some(g) => &g.phi,
            None => self.agents[0].1.models.policy.params(),
        }
    }

    /// Checks that the stored networks have the shapes `sac` and `env` imply.
    pub fn check_layout(&self, sac: &SacConfig, env: &EnvConfig) -> Result<(), FedError> {
        let t = template(sac, env);
        t.policy.params().check_layout(self.policy_params())?;
        if let Some(g) = &self.globals {
            t.critics[0].params().check_layout(&g.theta[0])?;
        }
        Ok(())
    }
}

struct SectionWriter {
    names: Vec<String>,
    payloads: Vec<Vec<u8>>,
}

impl SectionWriter {
    fn add(&mut self, name: String, pv: &ParamVector) {
        self.names.push(name);
        self.payloads.push(pv.to_bytes());
    }

    fn adam(&mut self, prefix: &str, a: &AdamState) {
        self.add(format!("{prefix}.m"), a.first_moment());
        self.add(format!("{prefix}.v"), a.second_moment());
    }
}

/// Wall-clock durations are left out so identical runs write identical files.
fn log_rows(logs: &[RoundLog]) -> ParamVector {
    let rows: Vec<&AgentRecord> = logs.iter().flat_map(|l| &l.records).collect();
    let mut values = Vec::with_capacity(rows.len() * LOG_COLUMNS);
    for r in &rows {
        let u = r.update.unwrap_or_default();
        values.extend_from_slice(&[
            r.episode as f64,
            r.agent as f64,
            r.reward.price,
            r.reward.anxiety,
            r.reward.departure,
            r.steps as f64,
            if r.update.is_some() { 1.0 } else { 0.0 },
            u.critic_loss,
            u.value_loss,
            u.actor_loss,
            u.alpha_loss,
            u.alpha,
            r.alpha,
        ]);
    }
    ParamVector::from_parts(vec![TensorSpec::new("records", &[rows.len(), LOG_COLUMNS])], values)
        .expect("sized from rows")
}

fn logs_from(table: &ParamVector) -> Result<Vec<RoundLog>, FedError> {
    let bad = || FedError::CorruptPayload("training log section".into());
    let spec = table.layout().first().ok_or_else(bad)?;
    if spec.shape.len() != 2 || spec.shape[1] != LOG_COLUMNS {
        return Err(bad());
    }
    let mut logs: Vec<RoundLog> = Vec::new();
    for row in table.values().chunks_exact(LOG_COLUMNS) {
        let record = AgentRecord {
            episode: row[0] as usize,
            agent: row[1] as usize,
            reward: RewardParts { price: row[2], anxiety: row[3], departure: row[4] },
            steps: row[5] as usize,
            update: (row[6] != 0.0).then_some(UpdateStats {
                critic_loss: row[7],
                value_loss: row[8],
                actor_loss: row[9],
                alpha_loss: row[10],
                alpha: row[11],
            }),
            alpha: row[12],
        };
        match logs.last_mut() {
            Some(l) if l.episode == record.episode => l.records.push(record),
            _ => logs.push(RoundLog { episode: record.episode, records: vec![record], duration: Duration::ZERO }),
        }
    }
    Ok(logs)
}

fn encode(c: &Checkpoint) -> Vec<u8> {
    let mut w = SectionWriter { names: Vec::new(), payloads: Vec::new() };
    let mut agents = Vec::new();
    for (i, (profile, a)) in c.agents.iter().enumerate() {
        let p = format!("agent{i}");
        let m = &a.models;
        let o = &a.optimizers;
        w.add(format!("{p}.policy"), m.policy.params());
        for k in 0..2 {
            w.add(format!("{p}.critic{k}"), m.critics[k].params());
            w.add(format!("{p}.value{k}"), m.values[k].params());
            w.add(format!("{p}.value_target{k}"), m.value_targets[k].params());
        }
        w.add(format!("{p}.log_alpha"), &scalar(m.log_alpha));
        w.adam(&format!("{p}.adam.policy"), &o.policy);
        for k in 0..2 {
            w.adam(&format!("{p}.adam.critic{k}"), &o.critics[k]);
            w.adam(&format!("{p}.adam.value{k}"), &o.values[k]);
        }
        w.adam(&format!("{p}.adam.log_alpha"), &o.log_alpha);
        w.add(format!("{p}.buffer"), &a.buffer.to_params(c.env.state_dim()));
        agents.push(AgentManifest {
            profile: profile.clone(),
            rng: RngState::capture(&a.rng),
            adam_steps: [
                o.policy.step_count(),
                o.critics[0].step_count(),
                o.critics[1].step_count(),
                o.values[0].step_count(),
                o.values[1].step_count(),
                o.log_alpha.step_count(),
            ],
            buffer_capacity: a.buffer.capacity(),
            buffer_cursor: a.buffer.cursor(),
        });
    }
    if let Some(g) = &c.globals {
        w.add("global.phi".into(), &g.phi);
        for k in 0..2 {
            w.add(format!("global.theta{k}"), &g.theta[k]);
        }
        if let Some(v) = &g.values {
            for k in 0..2 {
                w.add(format!("global.value{k}"), &v[k]);
            }
        }
        if let Some(v) = &g.value_targets {
            for k in 0..2 {
                w.add(format!("global.value_target{k}"), &v[k]);
            }
        }
        if let Some(a) = g.log_alpha {
            w.add("global.log_alpha".into(), &scalar(a));
        }
    }
    w.add("log.records".into(), &log_rows(&c.logs));

    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        completed: c.completed,
        pending_broadcast: c.pending_broadcast,
        fed: c.fed.clone(),
        sac: c.sac.clone(),
        env: c.env.clone(),
        profiles: c.profiles.clone(),
        agents,
        has_globals: c.globals.is_some(),
        sections: w.names,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &w.payloads {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(p);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FedError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FedError::CorruptPayload(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, FedError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, FedError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(FedError::CorruptPayload("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(FedError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = usize::try_from(r.u64()?).map_err(|_| FedError::CorruptPayload("manifest length".into()))?;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)
        .map_err(|e| FedError::CorruptPayload(format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(FedError::VersionMismatch { found: manifest.version, expected: CHECKPOINT_VERSION });
    }
    let mut sections = BTreeMap::new();
    for name in &manifest.sections {
        let n = usize::try_from(r.u64()?).map_err(|_| FedError::CorruptPayload("section length".into()))?;
        let pv = ParamVector::from_bytes(r.take(n)?)
            .map_err(|e| FedError::CorruptPayload(format!("section {name}: {e}")))?;
        sections.insert(name.clone(), pv);
    }
    if r.pos != bytes.len() {
        return Err(FedError::CorruptPayload(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    build(manifest, sections)
}

fn build(m: Manifest, mut sections: BTreeMap<String, ParamVector>) -> Result<Checkpoint, FedError> {
    let mut take = |name: &str| {
        sections.remove(name).ok_or_else(|| FedError::CorruptPayload(format!("missing section {name}")))
    };
    let tpl = template(&m.sac, &m.env);
    let net = |t: &Mlp, pv: ParamVector| -> Result<Mlp, FedError> {
        let mut n = t.clone();
        n.set_params(&pv)?;
        Ok(n)
    };
    let one = |pv: ParamVector| -> Result<f64, FedError> {
        if pv.layout() != log_alpha_layout().as_slice() {
            return Err(FedError::LayoutMismatch("scalar section".into()));
        }
        Ok(pv.values()[0])
    };

    let mut agents = Vec::new();
    for (i, am) in m.agents.iter().enumerate() {
        let p = format!("agent{i}");
        let mut models = tpl.clone();
        models.policy.set_params(&take(&format!("{p}.policy"))?)?;
        for k in 0..2 {
            models.critics[k] = net(&tpl.critics[k], take(&format!("{p}.critic{k}"))?)?;
            models.values[k] = net(&tpl.values[k], take(&format!("{p}.value{k}"))?)?;
            models.value_targets[k] = net(&tpl.value_targets[k], take(&format!("{p}.value_target{k}"))?)?;
        }
        models.log_alpha = one(take(&format!("{p}.log_alpha"))?)?;
        let mut adam = |name: &str, like: &ParamVector, step: u64| -> Result<AdamState, FedError> {
            let mv = take(&format!("{p}.adam.{name}.m"))?;
            let vv = take(&format!("{p}.adam.{name}.v"))?;
            like.check_layout(&mv)?;
            Ok(AdamState::from_parts(mv, vv, step)?)
        };
        let s = am.adam_steps;
        let optimizers = Optimizers {
            policy: adam("policy", models.policy.params(), s[0])?,
            critics: [
                adam("critic0", models.critics[0].params(), s[1])?,
                adam("critic1", models.critics[1].params(), s[2])?,
            ],
            values: [
                adam("value0", models.values[0].params(), s[3])?,
                adam("value1", models.values[1].params(), s[4])?,
            ],
            log_alpha: adam("log_alpha", &scalar(0.0), s[5])?,
        };
        let buffer = ReplayBuffer::from_params(am.buffer_capacity, am.buffer_cursor, &take(&format!("{p}.buffer"))?)
            .map_err(|e| FedError::CorruptPayload(e.to_string()))?;
        if buffer.iter_ordered().any(|t| t.state.len() != m.env.state_dim()) {
            return Err(FedError::LayoutMismatch(format!("{p} replay buffer state width")));
        }
        let rng = am.rng.restore().ok_or_else(|| FedError::CorruptPayload(format!("{p} rng state")))?;
        let agent = SacAgent { config: m.sac.clone(), models, optimizers, buffer, rng };
        agents.push((am.profile.clone(), agent));
    }

    let globals = if m.has_globals {
        let phi = take("global.phi")?;
        tpl.policy.params().check_layout(&phi)?;
        let theta = [
            net(&tpl.critics[0], take("global.theta0")?)?.params().clone(),
            net(&tpl.critics[1], take("global.theta1")?)?.params().clone(),
        ];
        let pair = |take: &mut dyn FnMut(&str) -> Result<ParamVector, FedError>, stem: &str| {
            if !m.fed.aggregate_value_nets {
                return Ok::<_, FedError>(None);
            }
            Ok(Some([
                net(&tpl.values[0], take(&format!("global.{stem}0"))?)?.params().clone(),
                net(&tpl.values[1], take(&format!("global.{stem}1"))?)?.params().clone(),
            ]))
        };
        let values = pair(&mut take, "value")?;
        let value_targets = pair(&mut take, "value_target")?;
        let log_alpha = if m.fed.aggregate_alpha { Some(one(take("global.log_alpha")?)?) } else { None };
        Some(GlobalModels { phi, theta, values, value_targets, log_alpha })
    } else {
        None
    };
    let logs = logs_from(&take("log.records")?)?;
    if let Some(extra) = sections.keys().next() {
        return Err(FedError::CorruptPayload(format!("unexpected section {extra}")));
    }
    Ok(Checkpoint {
        completed: m.completed,
        pending_broadcast: m.pending_broadcast,
        fed: m.fed,
        sac: m.sac,
        env: m.env,
        profiles: m.profiles,
        globals,
        agents,
        logs,
    })
}

/// Writes the trainer state to `path` (via a temporary file in the same directory).
pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer) -> Result<(), FedError> {
    let path = path.as_ref();
    let bytes = encode(&Checkpoint::from_trainer(trainer));
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, FedError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::price_data::{split_train_eval, synthesize_prices, SynthParams};

    fn setup(seed: u64, episodes: usize) -> Trainer {
        let sac = SacConfig {
            batch_size: 16,
            policy_hidden: vec![8, 8],
            critic_hidden: vec![8],
            value_hidden: vec![8],
            updates_per_episode: Some(3),
            buffer_capacity: 40,
            ..Default::default()
        };
        let prices = synthesize_prices(&SynthParams { days: 40, ..Default::default() }).unwrap();
        let split = split_train_eval(&prices);
        let env = EnvConfig { price_scale: split.train_mean().unwrap(), ..Default::default() };
        let data = Arc::new(TrainingData::from_split(&split).unwrap());
        let fed = FedConfig { n_agents: 2, episodes, seed, workers: 1, ..Default::default() };
        Trainer::new(fed, sac, env, UserProfile::defaults(), data).unwrap()
    }

    #[test]
    fn save_load_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = setup(2, 6);
        for _ in 0..6 {
            t.run_episode().unwrap();
        }
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &t).unwrap();
        let c = load_checkpoint(&path).unwrap();
        assert_eq!(c, Checkpoint::from_trainer(&t));
        // the buffer has wrapped, so the cursor matters
        assert!(c.agents[0].1.buffer.len() == 40);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut full = setup(4, 7);
        full.run(|_| {}).unwrap();

        let mut first = setup(4, 7);
        for _ in 0..3 {
            first.run_episode().unwrap();
        }
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&path, &first).unwrap();
        let data = Arc::clone(first.data());
        drop(first);
        let mut resumed = load_checkpoint(&path).unwrap().into_trainer(data).unwrap();
        resumed.run(|_| {}).unwrap();

        let records = |t: &Trainer| t.logs.iter().map(|l| l.records.clone()).collect::<Vec<_>>();
        assert_eq!(records(&resumed), records(&full));
        assert_eq!(resumed.globals, full.globals);
        for (a, b) in resumed.workers.iter().zip(&full.workers) {
            assert_eq!(a.agent, b.agent);
        }
    }

    #[test]
    fn layout_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = setup(1, 1);
        t.run_episode().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &t).unwrap();
        let c = load_checkpoint(&path).unwrap();
        let wider = SacConfig { policy_hidden: vec![16], ..t.sac.clone() };
        assert!(matches!(c.check_layout(&wider, &t.env), Err(FedError::LayoutMismatch(_))));
        c.check_layout(&t.sac, &t.env).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(FedError::VersionMismatch { found: 9, .. })));
        bytes[8] = 1;
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(FedError::CorruptPayload(_))));
        assert!(matches!(decode(b"nonsense"), Err(FedError::CorruptPayload(_))));
    }
}
