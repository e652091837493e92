//! Experience replay (ER), prioritized replay (pER) and adaptive-memory replay
//! (aER) for TD-learning agents, together with a mean-field ODE model of the
//! replay dynamics and the closed-form solutions it admits on the LineSearch
//! game.
//!
//! Module map:
//!
//! - [`linesearch`]: the 1-D LineSearch game, the linear Q-agent and TD updates.
//! - [`replay`]: bounded FIFO replay memory, uniform and prioritized sampling,
//!   and the adaptive memory-size controller.
//! - [`ode_model`]: fixed-step RK4 and the continuous-time replay dynamics.
//! - [`analytic`]: closed-form and asymptotic solutions of those dynamics.
//! - [`neural_control`]: a small MLP, a DQN-style agent and classic-control
//!   environments.
//! - [`harness`]: experiment configs, sweeps, comparisons and CSV/JSON output.

pub mod analytic;
pub mod error;
pub mod harness;
pub mod linesearch;
pub mod neural_control;
pub mod ode_model;
pub mod replay;
mod transition;

pub use error::{Error, Result};
pub use transition::Transition;
