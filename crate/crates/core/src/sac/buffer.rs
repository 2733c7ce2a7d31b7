//! Fixed-capacity FIFO replay buffer.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::SacError;
use crate::neural::{ParamVector, TensorSpec};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Column-major view of sampled transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array1<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Self {
        let dim = items.first().map_or(0, |t| t.state.len());
        let n = items.len();
        let mut states = Array2::zeros((n, dim));
        let mut next_states = Array2::zeros((n, dim));
        for (i, t) in items.iter().enumerate() {
            states.row_mut(i).assign(&ndarray::ArrayView1::from(&t.state));
            next_states.row_mut(i).assign(&ndarray::ArrayView1::from(&t.next_state));
        }
        Self {
            states,
            actions: items.iter().map(|t| t.action).collect(),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states,
            dones: items.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Critic input: each state row with its action appended.
    pub fn state_actions(&self, actions: &Array1<f64>) -> Array2<f64> {
        concat_action(&self.states, actions)
    }
}

pub fn concat_action(states: &Array2<f64>, actions: &Array1<f64>) -> Array2<f64> {
    let (n, d) = states.dim();
    let mut out = Array2::zeros((n, d + 1));
    out.slice_mut(ndarray::s![.., ..d]).assign(states);
    out.column_mut(d).assign(actions);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Slot the next push overwrites once full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), cursor: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Transitions from oldest to newest.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.cursor);
        older.iter().chain(newer.iter())
    }

    /// Uniform sampling with replacement.
    pub fn sample(&self, rng: &mut SeededRng, batch_size: usize) -> Result<Batch, SacError> {
        if self.items.len() < batch_size || batch_size == 0 {
            return Err(SacError::InsufficientData { have: self.items.len(), need: batch_size });
        }
        let picks: Vec<&Transition> =
            (0..batch_size).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect();
        Ok(Batch::from_transitions(&picks))
    }

    /// Serializes contents (raw storage order) for checkpoints.
    pub fn to_params(&self, state_dim: usize) -> ParamVector {
        let n = self.items.len();
        let layout = vec![
            TensorSpec::new("states", &[n, state_dim]),
            TensorSpec::new("actions", &[n]),
            TensorSpec::new("rewards", &[n]),
            TensorSpec::new("next_states", &[n, state_dim]),
            TensorSpec::new("dones", &[n]),
        ];
        let mut values = Vec::with_capacity(n * (2 * state_dim + 3));
        values.extend(self.items.iter().flat_map(|t| t.state.iter().copied()));
        values.extend(self.items.iter().map(|t| t.action));
        values.extend(self.items.iter().map(|t| t.reward));
        values.extend(self.items.iter().flat_map(|t| t.next_state.iter().copied()));
        values.extend(self.items.iter().map(|t| if t.done { 1.0 } else { 0.0 }));
        ParamVector::from_parts(layout, values).expect("layout sized from contents")
    }

    pub fn from_params(capacity: usize, cursor: usize, pv: &ParamVector) -> Result<Self, SacError> {
        let bad = |what: &str| SacError::Corrupt(format!("replay buffer payload: {what}"));
        let shape = |name: &str| {
            pv.layout().iter().find(|s| s.name == name).map(|s| s.shape.clone()).ok_or_else(|| bad(name))
        };
        let s_shape = shape("states")?;
        let [n, dim] = s_shape[..] else { return Err(bad("states rank")) };
        if n > capacity || (n < capacity && cursor != 0) || cursor >= capacity.max(1) {
            return Err(bad("cursor/capacity"));
        }
        let states = pv.tensor("states").ok_or_else(|| bad("states"))?;
        let actions = pv.tensor("actions").ok_or_else(|| bad("actions"))?;
        let rewards = pv.tensor("rewards").ok_or_else(|| bad("rewards"))?;
        let next = pv.tensor("next_states").ok_or_else(|| bad("next_states"))?;
        let dones = pv.tensor("dones").ok_or_else(|| bad("dones"))?;
        if actions.len() != n || rewards.len() != n || dones.len() != n || next.len() != n * dim {
            return Err(bad("lengths"));
        }
        let items = (0..n)
            .map(|i| Transition {
                state: states[i * dim..(i + 1) * dim].to_vec(),
                action: actions[i],
                reward: rewards[i],
                next_state: next[i * dim..(i + 1) * dim].to_vec(),
                done: dones[i] != 0.0,
            })
            .collect();
        Ok(Self { capacity, items, cursor })
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }
}
