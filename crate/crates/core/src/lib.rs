//! Federated soft actor-critic training for real-time EV charging and
//! discharging control.
//!
//! Each simulated EV user is an agent with its own environment and replay
//! buffer. Agents train locally with SAC and exchange only network parameters,
//! which a server averages and broadcasts every round.

pub mod config;
pub mod eval_sim;
pub mod ev_env;
pub mod federation;
pub mod neural;
pub mod price_data;
pub mod rng;
pub mod sac;
