//! Agent networks and the four SAC update rules.
//!
//! Losses are batch means. Gradients are formed by hand from the network
//! backward passes: critics and value nets regress onto detached targets, the
//! actor differentiates `alpha * log pi - min_k Q_k` through the reparameterized
//! action, and the temperature is tuned through `log_alpha`.

use ndarray::{Array1, Array2, Axis};

use super::buffer::{concat_action, Batch, ReplayBuffer, Transition};
use super::{SacConfig, SacError};
use crate::neural::policy::{action_log_prob, sample_action};
use crate::neural::{
    polyak_update, Activation, ActionBounds, ActionSample, AdamState, GaussianPolicyNet, Mlp, MlpTape,
    ParamVector, PolicyTape, Squash, TensorSpec,
};
use crate::rng::{standard_normal, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentModels {
    pub policy: GaussianPolicyNet,
    pub critics: [Mlp; 2],
    pub values: [Mlp; 2],
    pub value_targets: [Mlp; 2],
    pub log_alpha: f64,
    pub bounds: ActionBounds,
    pub squash: Squash,
}

/// Reparameterized policy evaluation over a batch.
#[derive(Debug, Clone)]
pub struct PolicyPass {
    pub tape: PolicyTape,
    pub raw: Array1<f64>,
    pub action: Array1<f64>,
    /// d(action) / d(raw).
    pub action_grad: Array1<f64>,
    pub log_prob: Array1<f64>,
    /// d(log pi) / d(raw) at fixed kappa.
    pub log_prob_grad: Array1<f64>,
    pub kappa: Array1<f64>,
}

impl PolicyPass {
    pub fn sigma(&self) -> Array1<f64> {
        self.tape.log_std.mapv(f64::exp)
    }
}

/// Twin-critic minimum and which critic attained it.
struct MinQ {
    value: Array1<f64>,
    argmin: Vec<usize>,
    tapes: [MlpTape; 2],
}

/// `min_q - alpha * log_prob`, elementwise.
pub fn soft_value(min_q: &Array1<f64>, alpha: f64, log_prob: &Array1<f64>) -> Array1<f64> {
    min_q - &(log_prob * alpha)
}

fn mean_half_sq(diff: &Array1<f64>) -> f64 {
    0.5 * diff.mapv(|d| d * d).mean().unwrap_or(0.0)
}

fn column(a: Array2<f64>) -> Array1<f64> {
    a.index_axis_move(Axis(1), 0)
}

impl AgentModels {
    pub fn new(state_dim: usize, cfg: &SacConfig, bounds: ActionBounds, rng: &mut SeededRng) -> Self {
        let mut critic_sizes = vec![state_dim + 1];
        critic_sizes.extend_from_slice(&cfg.critic_hidden);
        critic_sizes.push(1);
        let mut value_sizes = vec![state_dim];
        value_sizes.extend_from_slice(&cfg.value_hidden);
        value_sizes.push(1);
        let policy = GaussianPolicyNet::new(state_dim, &cfg.policy_hidden, rng);
        let critics = [
            Mlp::new(&critic_sizes, Activation::Identity, rng),
            Mlp::new(&critic_sizes, Activation::Identity, rng),
        ];
        let values = [
            Mlp::new(&value_sizes, Activation::Identity, rng),
            Mlp::new(&value_sizes, Activation::Identity, rng),
        ];
        let value_targets = values.clone();
        Self { policy, critics, values, value_targets, log_alpha: cfg.init_alpha.ln(), bounds, squash: cfg.squash }
    }

    pub fn state_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.log_alpha.is_finite()
            && self.policy.params().is_finite()
            && self.critics.iter().chain(&self.values).chain(&self.value_targets).all(|n| n.params().is_finite())
    }

    pub fn act(&self, state: &[f64], deterministic: bool, rng: &mut SeededRng) -> Result<ActionSample, SacError> {
        Ok(sample_action(&self.policy, state, rng, deterministic, &self.bounds, self.squash)?)
    }

    /// Evaluates the policy on `states` with the given standard-normal noise.
    pub fn policy_pass(&self, states: &Array2<f64>, kappa: &Array1<f64>) -> Result<PolicyPass, SacError> {
        let tape = self.policy.forward_batch(states.clone())?;
        let n = kappa.len();
        let mut pass = PolicyPass {
            raw: Array1::zeros(n),
            action: Array1::zeros(n),
            action_grad: Array1::zeros(n),
            log_prob: Array1::zeros(n),
            log_prob_grad: Array1::zeros(n),
            kappa: kappa.clone(),
            tape,
        };
        for i in 0..n {
            let ls = pass.tape.log_std[i];
            let raw = pass.tape.mu[i] + kappa[i] * ls.exp();
            let (a, da) = self.bounds.squash(raw, self.squash);
            let (lp, dlp) = action_log_prob(kappa[i], ls, raw, &self.bounds, self.squash);
            pass.raw[i] = raw;
            pass.action[i] = a;
            pass.action_grad[i] = da;
            pass.log_prob[i] = lp;
            pass.log_prob_grad[i] = dlp;
        }
        Ok(pass)
    }

    fn min_q(&self, states: &Array2<f64>, actions: &Array1<f64>) -> Result<MinQ, SacError> {
        let sa = concat_action(states, actions);
        let t0 = self.critics[0].forward_batch(sa.clone())?;
        let t1 = self.critics[1].forward_batch(sa)?;
        let (q0, q1) = (t0.output().column(0), t1.output().column(0));
        let argmin: Vec<usize> = q0.iter().zip(q1.iter()).map(|(a, b)| usize::from(b < a)).collect();
        let value = q0.iter().zip(q1.iter()).map(|(&a, &b)| a.min(b)).collect();
        Ok(MinQ { value, argmin, tapes: [t0, t1] })
    }

    /// Bootstrapped critic target `r + gamma * (1 - done) * min_k V_target_k(s')`.
    pub fn q_target(&self, batch: &Batch, gamma: f64) -> Result<Array1<f64>, SacError> {
        let v0 = column(self.value_targets[0].predict(batch.next_states.view())?);
        let v1 = column(self.value_targets[1].predict(batch.next_states.view())?);
        Ok(ndarray::Zip::from(&batch.rewards)
            .and(&batch.dones)
            .and(&v0)
            .and(&v1)
            .map_collect(|&r, &d, &a, &b| if d != 0.0 { r } else { r + gamma * a.min(b) }))
    }

    /// Mean squared-error losses of both critics against `targets` and their gradients.
    pub fn critic_loss_grads(
        &self,
        batch: &Batch,
        targets: &Array1<f64>,
    ) -> Result<([f64; 2], [ParamVector; 2]), SacError> {
        let sa = batch.state_actions(&batch.actions);
        regression_grads(&self.critics, &sa, targets)
    }

    /// Soft value target with a fresh action per state.
    pub fn value_target(&self, states: &Array2<f64>, kappa: &Array1<f64>) -> Result<Array1<f64>, SacError> {
        let pass = self.policy_pass(states, kappa)?;
        let q = self.min_q(states, &pass.action)?;
        Ok(soft_value(&q.value, self.alpha(), &pass.log_prob))
    }

    pub fn value_loss_grads(
        &self,
        states: &Array2<f64>,
        targets: &Array1<f64>,
    ) -> Result<([f64; 2], [ParamVector; 2]), SacError> {
        regression_grads(&self.values, states, targets)
    }

    /// Actor objective `mean(alpha * log pi(a|s) - min_k Q_k(s, a))` at fixed noise.
    pub fn actor_loss(&self, states: &Array2<f64>, kappa: &Array1<f64>) -> Result<f64, SacError> {
        let pass = self.policy_pass(states, kappa)?;
        let q = self.min_q(states, &pass.action)?;
        Ok((&pass.log_prob * self.alpha() - &q.value).mean().unwrap_or(0.0))
    }

    /// Actor loss and its gradient with respect to the policy parameters; the
    /// critics only pass gradient through their action input.
    pub fn actor_loss_grad(&self, pass: &PolicyPass, states: &Array2<f64>) -> Result<(f64, ParamVector), SacError> {
        let n = pass.action.len();
        let alpha = self.alpha();
        let q = self.min_q(states, &pass.action)?;
        let loss = (&pass.log_prob * alpha - &q.value).mean().unwrap_or(0.0);

        let mut dq_da = Array1::<f64>::zeros(n);
        for k in 0..2 {
            let sel: Array2<f64> =
                Array2::from_shape_fn((n, 1), |(i, _)| if q.argmin[i] == k { 1.0 } else { 0.0 });
            if sel.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut scratch = self.critics[k].zero_grad();
            let dx = self.critics[k].backward(&q.tapes[k], sel, &mut scratch)?;
            dq_da += &dx.column(dx.ncols() - 1);
        }

        let sigma = pass.sigma();
        let scale = 1.0 / n as f64;
        let d_raw = (&pass.log_prob_grad * alpha - &(&dq_da * &pass.action_grad)) * scale;
        let d_mu = d_raw.clone();
        let d_log_std = &d_raw * &(&pass.kappa * &sigma) - alpha * scale;
        let mut grads = self.policy.zero_grad();
        self.policy.backward(&pass.tape, d_mu.view(), d_log_std.view(), &mut grads)?;
        Ok((loss, grads))
    }

    /// Temperature loss `mean(-alpha * (log pi + target_entropy))` and its
    /// derivative with respect to `log_alpha`.
    pub fn alpha_loss_grad(&self, log_prob: &Array1<f64>, target_entropy: f64) -> (f64, f64) {
        let alpha = self.alpha();
        let m = log_prob.mapv(|lp| lp + target_entropy).mean().unwrap_or(0.0);
        (-alpha * m, -alpha * m)
    }
}

/// Half mean squared error of each net against shared targets, with gradients.
fn regression_grads(
    nets: &[Mlp; 2],
    inputs: &Array2<f64>,
    targets: &Array1<f64>,
) -> Result<([f64; 2], [ParamVector; 2]), SacError> {
    let n = targets.len() as f64;
    let mut losses = [0.0; 2];
    let mut grads = [nets[0].zero_grad(), nets[1].zero_grad()];
    for k in 0..2 {
        let tape = nets[k].forward_batch(inputs.clone())?;
        let diff = &tape.output().column(0) - targets;
        losses[k] = mean_half_sq(&diff);
        let d_out = (diff / n).insert_axis(Axis(1));
        nets[k].backward(&tape, d_out, &mut grads[k])?;
    }
    Ok((losses, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub policy: AdamState,
    pub critics: [AdamState; 2],
    pub values: [AdamState; 2],
    pub log_alpha: AdamState,
}

pub fn log_alpha_layout() -> Vec<TensorSpec> {
    vec![TensorSpec::new("log_alpha", &[1])]
}

fn scalar_param(v: f64) -> ParamVector {
    ParamVector::from_parts(log_alpha_layout(), vec![v]).expect("one value")
}

impl Optimizers {
    pub fn new(models: &AgentModels) -> Self {
        Self {
            policy: AdamState::new(models.policy.params()),
            critics: [AdamState::new(models.critics[0].params()), AdamState::new(models.critics[1].params())],
            values: [AdamState::new(models.values[0].params()), AdamState::new(models.values[1].params())],
            log_alpha: AdamState::new(&scalar_param(0.0)),
        }
    }
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    /// Mean of the two critic losses.
    pub critic_loss: f64,
    /// Mean of the two value losses.
    pub value_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
}

impl UpdateStats {
    fn mean(items: &[UpdateStats]) -> UpdateStats {
        let n = items.len() as f64;
        let sum = |f: fn(&UpdateStats) -> f64| items.iter().map(f).sum::<f64>() / n;
        UpdateStats {
            critic_loss: sum(|s| s.critic_loss),
            value_loss: sum(|s| s.value_loss),
            actor_loss: sum(|s| s.actor_loss),
            alpha_loss: sum(|s| s.alpha_loss),
            alpha: items.last().map_or(0.0, |s| s.alpha),
        }
    }
}

fn guard(models: &AgentModels, stage: &'static str) -> Result<(), SacError> {
    if models.is_finite() && models.alpha() > 0.0 {
        Ok(())
    } else {
        Err(SacError::NonFinite { stage })
    }
}

fn noise(n: usize, rng: &mut SeededRng) -> Array1<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

impl AgentModels {
    pub fn alpha_update(
        &mut self,
        opt: &mut Optimizers,
        pass: &PolicyPass,
        cfg: &SacConfig,
    ) -> Result<f64, SacError> {
        let (loss, grad) = self.alpha_loss_grad(&pass.log_prob, cfg.target_entropy);
        let mut p = scalar_param(self.log_alpha);
        opt.log_alpha.step(&mut p, &scalar_param(grad), cfg.lr_alpha)?;
        self.log_alpha = p.values()[0];
        guard(self, "alpha")?;
        Ok(loss)
    }

    pub fn actor_update(
        &mut self,
        opt: &mut Optimizers,
        pass: &PolicyPass,
        states: &Array2<f64>,
        cfg: &SacConfig,
    ) -> Result<f64, SacError> {
        let (loss, grads) = self.actor_loss_grad(pass, states)?;
        opt.policy.step(self.policy.params_mut(), &grads, cfg.lr_actor)?;
        guard(self, "actor")?;
        Ok(loss)
    }

    /// One Adam step for each critic; returns the pre-step losses.
    pub fn critic_update(&mut self, opt: &mut Optimizers, batch: &Batch, cfg: &SacConfig) -> Result<[f64; 2], SacError> {
        let targets = self.q_target(batch, cfg.gamma)?;
        let (losses, grads) = self.critic_loss_grads(batch, &targets)?;
        for k in 0..2 {
            opt.critics[k].step(self.critics[k].params_mut(), &grads[k], cfg.lr_critic)?;
        }
        guard(self, "critic")?;
        Ok(losses)
    }

    /// One Adam step for each value net toward the soft value target, then the
    /// moving-average target update.
    pub fn value_update(
        &mut self,
        opt: &mut Optimizers,
        states: &Array2<f64>,
        kappa: &Array1<f64>,
        cfg: &SacConfig,
    ) -> Result<[f64; 2], SacError> {
        let targets = self.value_target(states, kappa)?;
        let (losses, grads) = self.value_loss_grads(states, &targets)?;
        for k in 0..2 {
            opt.values[k].step(self.values[k].params_mut(), &grads[k], cfg.lr_critic)?;
            let source = self.values[k].params().clone();
            polyak_update(self.value_targets[k].params_mut(), &source, cfg.zeta)?;
        }
        guard(self, "value")?;
        Ok(losses)
    }

    /// Temperature, actor, critics, then value nets on one minibatch.
    pub fn update(
        &mut self,
        opt: &mut Optimizers,
        batch: &Batch,
        cfg: &SacConfig,
        rng: &mut SeededRng,
    ) -> Result<UpdateStats, SacError> {
        let n = batch.len();
        let kappa = noise(n, rng);
        let pass = self.policy_pass(&batch.states, &kappa)?;
        let alpha_loss = self.alpha_update(opt, &pass, cfg)?;
        // the actor sees the new temperature but the same draws
        let actor_loss = self.actor_update(opt, &pass, &batch.states, cfg)?;
        let critic = self.critic_update(opt, batch, cfg)?;
        let kappa = noise(n, rng);
        let value = self.value_update(opt, &batch.states, &kappa, cfg)?;
        Ok(UpdateStats {
            critic_loss: 0.5 * (critic[0] + critic[1]),
            value_loss: 0.5 * (value[0] + value[1]),
            actor_loss,
            alpha_loss,
            alpha: self.alpha(),
        })
    }
}

/// A complete local learner: networks, optimizer state, replay buffer and RNG.
#[derive(Debug, Clone, PartialEq)]
pub struct SacAgent {
    pub config: SacConfig,
    pub models: AgentModels,
    pub optimizers: Optimizers,
    pub buffer: ReplayBuffer,
    pub rng: SeededRng,
}

impl SacAgent {
    /// Networks are initialized from `rng`, which the agent then keeps.
    pub fn new(state_dim: usize, bounds: ActionBounds, config: SacConfig, mut rng: SeededRng) -> Result<Self, SacError> {
        config.validate()?;
        let models = AgentModels::new(state_dim, &config, bounds, &mut rng);
        let optimizers = Optimizers::new(&models);
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        Ok(Self { config, models, optimizers, buffer, rng })
    }

    pub fn act(&mut self, state: &[f64], deterministic: bool) -> Result<ActionSample, SacError> {
        self.models.act(state, deterministic, &mut self.rng)
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    pub fn ready(&self) -> bool {
        self.buffer.len() >= self.config.batch_size
    }

    pub fn update_step(&mut self) -> Result<UpdateStats, SacError> {
        let batch = self.buffer.sample(&mut self.rng, self.config.batch_size)?;
        self.models.update(&mut self.optimizers, &batch, &self.config, &mut self.rng)
    }

    /// Runs the post-episode update schedule. `episode_len` is used when the
    /// config leaves the count unset. Returns `None` while the buffer is too
    /// small to start.
    pub fn train_after_episode(&mut self, episode_len: usize) -> Result<Option<UpdateStats>, SacError> {
        let steps = self.config.updates_per_episode.unwrap_or(episode_len);
        if !self.ready() || steps == 0 {
            return Ok(None);
        }
        let stats = (0..steps).map(|_| self.update_step()).collect::<Result<Vec<_>, _>>()?;
        Ok(Some(UpdateStats::mean(&stats)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::relative_error;
    use crate::rng::seeded;
    use approx::assert_relative_eq;

    const BOUNDS: ActionBounds = ActionBounds { low: -0.2, high: 0.2 };

    fn tiny_cfg() -> SacConfig {
        SacConfig {
            batch_size: 8,
            policy_hidden: vec![4, 4],
            critic_hidden: vec![4, 4],
            value_hidden: vec![4, 4],
            buffer_capacity: 1000,
            ..Default::default()
        }
    }

    fn set_last_bias(net: &mut Mlp, value: f64) {
        let name = format!("l{}.bias", net.sizes().len() - 2);
        let r = net.params().range_of(&name).unwrap();
        net.params_mut().values_mut()[r].fill(value);
    }

    fn batch(n: usize, dim: usize, rng: &mut SeededRng, done: bool) -> Batch {
        let items: Vec<Transition> = (0..n)
            .map(|_| Transition {
                state: (0..dim).map(|_| standard_normal(rng)).collect(),
                action: 0.2 * standard_normal(rng).tanh(),
                reward: standard_normal(rng),
                next_state: (0..dim).map(|_| standard_normal(rng)).collect(),
                done,
            })
            .collect();
        Batch::from_transitions(&items.iter().collect::<Vec<_>>())
    }

    fn models(dim: usize, seed: u64) -> AgentModels {
        AgentModels::new(dim, &tiny_cfg(), BOUNDS, &mut seeded(seed))
    }

    #[test]
    fn q_target_hand_values() {
        let mut m = models(3, 0);
        let mut rng = seeded(1);
        for (k, v) in [(0, 2.0), (1, 3.0)] {
            m.value_targets[k] = Mlp::zeros(m.value_targets[k].sizes(), Activation::Identity);
            set_last_bias(&mut m.value_targets[k], v);
        }
        let mut b = batch(4, 3, &mut rng, false);
        b.rewards.fill(1.0);
        let y = m.q_target(&b, 0.99).unwrap();
        for v in y.iter() {
            assert_relative_eq!(*v, 2.98, epsilon = 1e-12);
        }
        let y0 = m.q_target(&b, 0.0).unwrap();
        assert_eq!(y0, b.rewards);

        // terminal transitions ignore the bootstrap entirely
        for k in 0..2 {
            set_last_bias(&mut m.value_targets[k], 1e9);
        }
        let mut t = batch(6, 3, &mut rng, true);
        t.rewards[2] = -4.5;
        assert_eq!(m.q_target(&t, 0.99).unwrap(), t.rewards);
    }

    #[test]
    fn critics_at_target_do_not_move() {
        let mut m = models(3, 2);
        let cfg = tiny_cfg();
        let mut opt = Optimizers::new(&m);
        for k in 0..2 {
            m.critics[k] = Mlp::zeros(m.critics[k].sizes(), Activation::Identity);
            set_last_bias(&mut m.critics[k], 0.7);
        }
        let mut b = batch(8, 3, &mut seeded(3), true);
        b.rewards.fill(0.7);
        let before = m.critics.clone();
        let losses = m.critic_update(&mut opt, &b, &cfg).unwrap();
        assert_eq!(losses, [0.0, 0.0]);
        assert_eq!(m.critics, before);
    }

    #[test]
    fn one_parameter_critic_adam_step() {
        // state_dim 0 and zero actions: only the output bias receives gradient
        let cfg = SacConfig { critic_hidden: vec![1], ..tiny_cfg() };
        let mut m = AgentModels::new(0, &cfg, BOUNDS, &mut seeded(4));
        m.critics[0] = Mlp::zeros(&[1, 1], Activation::Identity);
        m.critics[1] = Mlp::zeros(&[1, 1], Activation::Identity);
        let mut opt = Optimizers::new(&m);
        let rewards = [0.5, 1.5, -0.25, 2.0];
        let items: Vec<Transition> = rewards
            .iter()
            .map(|&r| Transition { state: vec![], action: 0.0, reward: r, next_state: vec![], done: true })
            .collect();
        let b = Batch::from_transitions(&items.iter().collect::<Vec<_>>());
        let losses = m.critic_update(&mut opt, &b, &cfg).unwrap();
        let mean_sq: f64 = rewards.iter().map(|r| r * r).sum::<f64>() / 4.0;
        assert_relative_eq!(losses[0], 0.5 * mean_sq, epsilon = 1e-15);
        // d/db of 0.5 * mean((b - y)^2) at b = 0, then a first Adam step
        let g = -rewards.iter().sum::<f64>() / 4.0;
        let (m1, v1) = (0.1 * g, 0.001 * g * g);
        let expected = -cfg.lr_critic * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
        for k in 0..2 {
            let p = m.critics[k].params().values();
            assert_eq!(p[0], 0.0);
            assert_relative_eq!(p[1], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn critic_loss_decreases_with_small_step() {
        let cfg = SacConfig { lr_critic: 1e-4, ..tiny_cfg() };
        let mut m = models(5, 5);
        let mut opt = Optimizers::new(&m);
        let b = batch(8, 5, &mut seeded(6), false);
        let first = m.critic_update(&mut opt, &b, &cfg).unwrap();
        let targets = m.q_target(&b, cfg.gamma).unwrap();
        let (after, _) = m.critic_loss_grads(&b, &targets).unwrap();
        assert!(after[0] < first[0] && after[1] < first[1], "{first:?} -> {after:?}");
    }

    #[test]
    fn soft_value_scalar_example() {
        let v = soft_value(&Array1::from(vec![1.0f64.min(2.0)]), 0.5, &Array1::from(vec![-0.9189]));
        assert_relative_eq!(v[0], 1.45945, epsilon = 1e-12);
    }

    #[test]
    fn value_target_without_entropy_is_min_q_at_mean() {
        let mut m = models(4, 7);
        m.log_alpha = f64::NEG_INFINITY;
        let states = batch(5, 4, &mut seeded(8), false).states;
        let zero = Array1::zeros(5);
        let target = m.value_target(&states, &zero).unwrap();
        let tape = m.policy.forward_batch(states.clone()).unwrap();
        let mu = tape.mu.mapv(|v| v.clamp(BOUNDS.low, BOUNDS.high));
        let sa = concat_action(&states, &mu);
        let q0 = m.critics[0].predict(sa.view()).unwrap();
        let q1 = m.critics[1].predict(sa.view()).unwrap();
        for i in 0..5 {
            assert_eq!(target[i], q0[[i, 0]].min(q1[[i, 0]]));
        }
    }

    #[test]
    fn value_nets_at_target_do_not_move() {
        let mut m = models(3, 9);
        for k in 0..2 {
            m.critics[k] = Mlp::zeros(m.critics[k].sizes(), Activation::Identity);
            set_last_bias(&mut m.critics[k], 1.25);
            m.values[k] = Mlp::zeros(m.values[k].sizes(), Activation::Identity);
            set_last_bias(&mut m.values[k], 1.25);
        }
        m.log_alpha = f64::NEG_INFINITY;
        let states = batch(8, 3, &mut seeded(10), false).states;
        let target = m.value_target(&states, &Array1::zeros(8)).unwrap();
        let (losses, grads) = m.value_loss_grads(&states, &target).unwrap();
        assert_eq!(losses, [0.0, 0.0]);
        assert!(grads.iter().all(|g| g.values().iter().all(|&v| v == 0.0)));
    }

    /// Kink signature: ReLU patterns of the policy and both critics and the clip flags.
    fn actor_signature(m: &AgentModels, states: &Array2<f64>, kappa: &Array1<f64>) -> Vec<bool> {
        let pass = m.policy_pass(states, kappa).unwrap();
        let mut sig = pass.tape.relu_pattern();
        sig.extend(pass.action_grad.iter().map(|&g| g != 0.0));
        let sa = concat_action(states, &pass.action);
        for c in &m.critics {
            sig.extend(c.forward_batch(sa.clone()).unwrap().relu_pattern());
        }
        let q0 = m.critics[0].predict(sa.view()).unwrap();
        let q1 = m.critics[1].predict(sa.view()).unwrap();
        sig.extend(q0.iter().zip(q1.iter()).map(|(a, b)| b < a));
        sig
    }

    fn actor_fd_check(squash: Squash, seed: u64) {
        let cfg = SacConfig { squash, ..tiny_cfg() };
        let bounds = ActionBounds { low: -2.0, high: 2.0 };
        let mut m = AgentModels::new(5, &cfg, bounds, &mut seeded(seed));
        m.log_alpha = 0.3f64.ln();
        let mut rng = seeded(seed + 100);
        let states = batch(6, 5, &mut rng, false).states;
        let kappa = noise(6, &mut rng);
        let pass = m.policy_pass(&states, &kappa).unwrap();
        let (loss, grads) = m.actor_loss_grad(&pass, &states).unwrap();
        assert_relative_eq!(loss, m.actor_loss(&states, &kappa).unwrap(), epsilon = 1e-12);
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..grads.len() {
            let orig = m.policy.params().values()[i];
            m.policy.params_mut().values_mut()[i] = orig + h;
            let (lp, sp) = (m.actor_loss(&states, &kappa).unwrap(), actor_signature(&m, &states, &kappa));
            m.policy.params_mut().values_mut()[i] = orig - h;
            let (lm, sm) = (m.actor_loss(&states, &kappa).unwrap(), actor_signature(&m, &states, &kappa));
            m.policy.params_mut().values_mut()[i] = orig;
            if sp != sm {
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let err = relative_error(grads.values()[i], numeric, 1e-6);
            assert!(err < 1e-3, "{squash:?} coord {i}: analytic {} numeric {numeric}", grads.values()[i]);
            checked += 1;
        }
        assert!(checked > grads.len() / 2);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        for seed in 0..3 {
            actor_fd_check(Squash::Clip, seed);
            actor_fd_check(Squash::Tanh, seed);
        }
    }

    #[test]
    fn actor_gradient_zero_for_flat_objective() {
        let mut m = models(4, 11);
        m.log_alpha = f64::NEG_INFINITY;
        for k in 0..2 {
            m.critics[k] = Mlp::zeros(m.critics[k].sizes(), Activation::Identity);
            set_last_bias(&mut m.critics[k], -3.0);
        }
        let mut rng = seeded(12);
        let states = batch(8, 4, &mut rng, false).states;
        let pass = m.policy_pass(&states, &noise(8, &mut rng)).unwrap();
        let (_, grads) = m.actor_loss_grad(&pass, &states).unwrap();
        assert!(grads.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn actor_loss_decreases_on_frozen_critic() {
        let cfg = tiny_cfg();
        let mut m = models(4, 13);
        let mut opt = Optimizers::new(&m);
        let mut rng = seeded(14);
        let one = batch(1, 4, &mut rng, false);
        let states = one.states.broadcast((32, 4)).unwrap().to_owned();
        let eval_kappa = noise(256, &mut seeded(15));
        let eval_states = one.states.broadcast((256, 4)).unwrap().to_owned();
        let before = m.actor_loss(&eval_states, &eval_kappa).unwrap();
        for _ in 0..100 {
            let pass = m.policy_pass(&states, &noise(32, &mut rng)).unwrap();
            m.actor_update(&mut opt, &pass, &states, &cfg).unwrap();
        }
        let after = m.actor_loss(&eval_states, &eval_kappa).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn alpha_equilibrium_and_direction() {
        let cfg = tiny_cfg();
        let mut m = models(3, 16);
        let (_, g) = m.alpha_loss_grad(&Array1::from(vec![1.0, 1.0]), -1.0);
        assert_eq!(g, 0.0);
        let mut opt = Optimizers::new(&m);
        let states = batch(8, 3, &mut seeded(17), false).states;
        let mut pass = m.policy_pass(&states, &Array1::zeros(8)).unwrap();
        // log pi above -H means too little entropy: alpha must rise
        pass.log_prob.fill(3.0);
        let a0 = m.alpha();
        m.alpha_update(&mut opt, &pass, &cfg).unwrap();
        assert!(m.alpha() > a0);
        pass.log_prob.fill(-2.0);
        let a1 = m.alpha();
        m.alpha_update(&mut opt, &pass, &cfg).unwrap();
        m.alpha_update(&mut opt, &pass, &cfg).unwrap();
        assert!(m.alpha() < a1);
    }

    #[test]
    fn alpha_stays_positive_over_many_updates() {
        let cfg = tiny_cfg();
        let mut m = models(3, 18);
        let mut opt = Optimizers::new(&m);
        let mut rng = seeded(19);
        let states = batch(8, 3, &mut rng, false).states;
        let mut pass = m.policy_pass(&states, &Array1::zeros(8)).unwrap();
        for i in 0..10_000 {
            pass.log_prob.fill(if i % 3 == 0 { 4.0 } else { -6.0 });
            m.alpha_update(&mut opt, &pass, &cfg).unwrap();
            assert!(m.alpha() > 0.0 && m.alpha().is_finite());
        }
    }

    #[test]
    fn act_contracts() {
        let mut agent = SacAgent::new(4, BOUNDS, tiny_cfg(), seeded(20)).unwrap();
        let s = [0.3, -0.2, 1.0, 0.5];
        let a = agent.act(&s, true).unwrap();
        let b = agent.act(&s, true).unwrap();
        assert_eq!(a, b);
        for _ in 0..200 {
            let x = agent.act(&s, false).unwrap();
            assert!((BOUNDS.low..=BOUNDS.high).contains(&x.action));
        }
        let mut r1 = seeded(21);
        let mut r2 = seeded(21);
        assert_eq!(agent.models.act(&s, false, &mut r1).unwrap(), agent.models.act(&s, false, &mut r2).unwrap());
    }

    #[test]
    fn polyak_targets_decay_geometrically() {
        let m = models(3, 22);
        let mut target = m.value_targets[0].params().clone();
        let source = m.values[1].params().clone();
        let dist = |a: &ParamVector| {
            a.values().iter().zip(source.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let mut prev = dist(&target);
        for _ in 0..50 {
            polyak_update(&mut target, &source, 0.005).unwrap();
            let d = dist(&target);
            assert_relative_eq!(d / prev, 0.995, epsilon = 1e-9);
            prev = d;
        }
    }

    fn filled_agent(seed: u64) -> SacAgent {
        let mut agent = SacAgent::new(3, BOUNDS, tiny_cfg(), seeded(seed)).unwrap();
        let mut rng = seeded(99);
        let b = batch(20, 3, &mut rng, false);
        for i in 0..20 {
            agent.remember(Transition {
                state: b.states.row(i).to_vec(),
                action: b.actions[i],
                reward: b.rewards[i],
                next_state: b.next_states.row(i).to_vec(),
                done: i % 5 == 4,
            });
        }
        agent
    }

    #[test]
    fn full_update_is_deterministic_and_finite() {
        let mut a = filled_agent(23);
        let mut b = filled_agent(23);
        let sa = a.train_after_episode(25).unwrap().unwrap();
        let sb = b.train_after_episode(25).unwrap().unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a, b);
        assert!(a.models.is_finite() && a.models.alpha() > 0.0);
    }

    #[test]
    fn updates_wait_for_a_full_batch() {
        let mut agent = SacAgent::new(3, BOUNDS, tiny_cfg(), seeded(24)).unwrap();
        assert_eq!(agent.train_after_episode(5).unwrap(), None);
        assert!(matches!(agent.update_step(), Err(SacError::InsufficientData { have: 0, need: 8 })));
    }

    #[test]
    fn nan_guard_reports_stage() {
        let mut agent = filled_agent(25);
        agent.models.critics[0].params_mut().values_mut()[0] = f64::NAN;
        let err = agent.update_step().unwrap_err();
        assert!(matches!(err, SacError::NonFinite { .. }), "{err:?}");
    }
}
