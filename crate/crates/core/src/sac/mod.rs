//! Soft actor-critic learner for a single agent: replay buffer, twin critics,
//! twin value networks with moving-average targets, a Gaussian policy and
//! automatic temperature tuning.

pub mod agent;
pub mod buffer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{NeuralError, Squash};

pub use agent::{AgentModels, Optimizers, SacAgent, UpdateStats};
pub use buffer::{Batch, ReplayBuffer, Transition};

#[derive(Debug, Error, PartialEq)]
pub enum SacError {
    #[error("replay buffer holds {have} transitions, {need} needed")]
    InsufficientData { have: usize, need: usize },
    #[error("non-finite value after {stage} update")]
    NonFinite { stage: &'static str },
    #[error("invalid SAC config: {0}")]
    InvalidConfig(String),
    #[error("corrupt agent state: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    /// Target smoothing coefficient.
    pub zeta: f64,
    pub target_entropy: f64,
    /// Gradient steps after each episode; `None` means one per environment step.
    pub updates_per_episode: Option<usize>,
    pub buffer_capacity: usize,
    pub init_alpha: f64,
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub squash: Squash,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 128,
            lr_actor: 1e-3,
            lr_critic: 1e-2,
            lr_alpha: 1e-2,
            zeta: 0.005,
            target_entropy: -1.0,
            updates_per_episode: None,
            buffer_capacity: 100_000,
            init_alpha: 1.0,
            policy_hidden: vec![128; 4],
            critic_hidden: vec![128; 3],
            value_hidden: vec![128; 3],
            squash: Squash::Clip,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: String| Err(SacError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return bad(format!("zeta {} outside (0, 1)", self.zeta));
        }
        for (name, lr) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic), ("lr_alpha", self.lr_alpha)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} {lr} must be finite and >= 0"));
            }
        }
        if !self.target_entropy.is_finite() {
            return bad("target_entropy must be finite".into());
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive".into());
        }
        if !(self.init_alpha > 0.0 && self.init_alpha.is_finite()) {
            return bad(format!("init_alpha {} must be > 0", self.init_alpha));
        }
        for (name, h) in [
            ("policy_hidden", &self.policy_hidden),
            ("critic_hidden", &self.critic_hidden),
            ("value_hidden", &self.value_hidden),
        ] {
            if h.is_empty() || h.contains(&0) {
                return bad(format!("{name} needs at least one non-zero width"));
            }
        }
        Ok(())
    }
}
