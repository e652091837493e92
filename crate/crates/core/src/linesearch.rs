//! The LineSearch game and its linear Q-agent.
//!
//! The state is a point on the real line, the reward is linear in the state
//! reached, `r(x) = beta1 * x + beta2`, and the two actions move the state by
//! `+v` or `-v`. The agent approximates `Q(x, a) = theta1 * (x + a) + theta2`,
//! which has no model mismatch with the true action value when `gamma = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::Transition;

/// A LineSearch transition: scalar state, action given by its signed value.
pub type LineSearchTransition = Transition<f64, f64>;

/// Environment reward weights `(beta1, beta2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueWeights {
    beta1: f64,
    beta2: f64,
}

impl TrueWeights {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        ensure_finite("beta1", beta1)?;
        ensure_finite("beta2", beta2)?;
        if beta1 == 0.0 {
            return Err(Error::param("beta1", "a zero reward slope is degenerate"));
        }
        Ok(Self { beta1, beta2 })
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    /// `beta1 * x + beta2`.
    pub fn reward(&self, x: f64) -> f64 {
        self.beta1 * x + self.beta2
    }
}

impl Default for TrueWeights {
    fn default() -> Self {
        Self {
            beta1: 0.1,
            beta2: 0.5,
        }
    }
}

/// Agent weights `(theta1, theta2)` of the linear Q-function.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearTheta {
    pub theta1: f64,
    pub theta2: f64,
}

impl LinearTheta {
    pub fn new(theta1: f64, theta2: f64) -> Self {
        Self { theta1, theta2 }
    }

    /// Weights that sit at the metric offset `d` from `beta`.
    pub fn from_metrics(d: MetricPair, beta: &TrueWeights) -> Self {
        Self {
            theta1: beta.beta1 + d.d1,
            theta2: beta.beta2 + d.d2,
        }
    }
}

/// Metric pair `(theta1 - beta1, theta2 - beta2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricPair {
    pub d1: f64,
    pub d2: f64,
}

impl MetricPair {
    pub fn new(d1: f64, d2: f64) -> Self {
        Self { d1, d2 }
    }

    /// `|d1| + |d2|`.
    pub fn measure(&self) -> f64 {
        measure_m(self.d1, self.d2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchConfig {
    pub weights: TrueWeights,
    /// Action magnitude.
    pub v: f64,
    pub x0: f64,
    pub gamma: f64,
    /// Total number of learning steps `T`.
    pub horizon: usize,
}

impl LineSearchConfig {
    pub fn new(weights: TrueWeights, v: f64, x0: f64, gamma: f64, horizon: usize) -> Result<Self> {
        let cfg = Self {
            weights,
            v,
            x0,
            gamma,
            horizon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("v", self.v)?;
        ensure_finite("x0", self.x0)?;
        if self.v <= 0.0 {
            return Err(Error::param("v", format!("must be positive, got {}", self.v)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::param("gamma", format!("must lie in [0, 1), got {}", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::param("horizon", "must be at least 1"));
        }
        Ok(())
    }

    /// The two actions, `+v` first.
    pub fn actions(&self) -> [f64; 2] {
        [self.v, -self.v]
    }
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            weights: TrueWeights::default(),
            v: 0.01,
            x0: -5.0,
            gamma: 0.0,
            horizon: 1000,
        }
    }
}

pub fn reward(config: &LineSearchConfig, x: f64) -> f64 {
    config.weights.reward(x)
}

/// Moves from `x` by action `a`; the reward is that of the state reached.
///
/// LineSearch has no terminal states, so `terminal` is always `false`; the
/// caller ends the episode at its horizon.
pub fn env_step(config: &LineSearchConfig, x: f64, a: f64) -> Result<LineSearchTransition> {
    if a != config.v && a != -config.v {
        return Err(Error::InvalidAction {
            action: a.to_string(),
            allowed: format!("±{}", config.v),
        });
    }
    let x_next = x + a;
    Ok(Transition::new(x, a, reward(config, x_next), x_next, false))
}

/// `theta1 * (x + a) + theta2`.
pub fn q_value(theta: &LinearTheta, x: f64, a: f64) -> f64 {
    theta.theta1 * (x + a) + theta.theta2
}

/// Greedy action: `+v` when `theta1 >= 0`, `-v` otherwise.
pub fn greedy_action(theta: &LinearTheta, v: f64) -> f64 {
    if theta.theta1 >= 0.0 {
        v
    } else {
        -v
    }
}

/// `max_a Q(x, a)` over `{+v, -v}`, both actions evaluated.
fn max_q(theta: &LinearTheta, x: f64, v: f64) -> f64 {
    q_value(theta, x, v).max(q_value(theta, x, -v))
}

/// TD error `r + gamma * max_a Q(x', a) - Q(x, a)` against the current weights.
/// Terminal transitions do not bootstrap.
pub fn td_error(theta: &LinearTheta, t: &LineSearchTransition, gamma: f64, v: f64) -> f64 {
    let bootstrap = if t.terminal || gamma == 0.0 {
        0.0
    } else {
        gamma * max_q(theta, t.next_state, v)
    };
    t.reward + bootstrap - q_value(theta, t.state, t.action)
}

/// `grad_theta Q(x, a; theta) = (x + a, 1)`.
pub fn q_gradient(t: &LineSearchTransition) -> [f64; 2] {
    [t.state + t.action, 1.0]
}

/// One TD step `theta += alpha * delta * grad Q`.
pub fn td_update(
    theta: &LinearTheta,
    t: &LineSearchTransition,
    alpha: f64,
    gamma: f64,
    v: f64,
) -> LinearTheta {
    let delta = td_error(theta, t, gamma, v);
    let [g1, g2] = q_gradient(t);
    LinearTheta {
        theta1: theta.theta1 + alpha * delta * g1,
        theta2: theta.theta2 + alpha * delta * g2,
    }
}

pub fn metrics(theta: &LinearTheta, beta: &TrueWeights) -> MetricPair {
    MetricPair {
        d1: theta.theta1 - beta.beta1,
        d2: theta.theta2 - beta.beta2,
    }
}

/// Final measure `M = |d1| + |d2|`; smaller is better.
pub fn measure_m(d1_final: f64, d2_final: f64) -> f64 {
    d1_final.abs() + d2_final.abs()
}

/// Stationary weights of the discounted game under the greedy policy:
/// `theta1* = beta1 / (1 - gamma)`,
/// `theta2* = beta2 / (1 - gamma) + gamma * v * |beta1| / (1 - gamma)^2`.
pub fn discounted_fixed_point(beta: &TrueWeights, gamma: f64, v: f64) -> LinearTheta {
    let g = 1.0 - gamma;
    LinearTheta {
        theta1: beta.beta1 / g,
        theta2: beta.beta2 / g + gamma * v * beta.beta1.abs() / (g * g),
    }
}
