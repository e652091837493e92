//! Fully connected Q-network with hand-written backpropagation, a DQN-style
//! replay agent, and the CartPole, MountainCar and Acrobot control tasks.
//!
//! The agent bootstraps from its current weights (no target network) and
//! applies each of the `m` sampled transitions as its own sequential update.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::ode_model::rk4_step;
use crate::replay::{AdjustmentEvent, AerConfig, AerController, ReplayBuffer};
use crate::Transition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Multi-layer perceptron: hidden layers use `activation`, the output layer
/// is linear with one unit per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Scratch space for forward and backward passes, reused across calls.
#[derive(Debug, Clone)]
pub struct Workspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    grad: MlpGradient,
}

impl Mlp {
    /// Network with weights and biases drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::param("layer_sizes", "need at least input and output sizes"));
        }
        if sizes.contains(&0) {
            return Err(Error::param("layer_sizes", "layer sizes must be positive"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                inputs: w[0],
                outputs: w[1],
                w: vec![0.0; w[0] * w[1]],
                b: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                *w = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }

    /// Mutable access to one layer's weights and biases.
    pub fn layer_mut(&mut self, i: usize) -> Option<(&mut [f64], &mut [f64])> {
        self.layers.get_mut(i).map(|l| (l.w.as_mut_slice(), l.b.as_mut_slice()))
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            pre: self.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            post: std::iter::once(vec![0.0; self.input_dim()])
                .chain(self.layers.iter().map(|l| vec![0.0; l.outputs]))
                .collect(),
            delta: self.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            grad: self.zero_gradient(),
        }
    }

    fn zero_gradient(&self) -> MlpGradient {
        MlpGradient {
            weights: self.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            biases: self.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass into `ws`; returns the Q-values.
    pub fn forward_ws<'w>(&self, ws: &'w mut Workspace, input: &[f64]) -> Result<&'w [f64]> {
        self.check_input(input)?;
        ws.post[0].copy_from_slice(input);
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let (before, after) = ws.post.split_at_mut(li + 1);
            let x = &before[li];
            let out = &mut after[0];
            let pre = &mut ws.pre[li];
            for o in 0..l.outputs {
                let row = &l.w[o * l.inputs..(o + 1) * l.inputs];
                let z = l.b[o] + dot(row, x);
                pre[o] = z;
                out[o] = if li == last { z } else { self.activation.apply(z) };
            }
        }
        Ok(&ws.post[self.layers.len()])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut ws = self.workspace();
        Ok(self.forward_ws(&mut ws, input)?.to_vec())
    }

    /// Gradient of `Q[action]` for the input of the last forward pass in `ws`,
    /// written into `ws`.
    fn backprop_ws(&self, ws: &mut Workspace, action: usize) {
        let n = self.layers.len();
        ws.delta[n - 1].iter_mut().for_each(|d| *d = 0.0);
        ws.delta[n - 1][action] = 1.0;
        for li in (0..n).rev() {
            let l = &self.layers[li];
            let x = &ws.post[li];
            let g = &ws.delta[li];
            let gw = &mut ws.grad.weights[li];
            for o in 0..l.outputs {
                let row = &mut gw[o * l.inputs..(o + 1) * l.inputs];
                if g[o] == 0.0 {
                    row.iter_mut().for_each(|r| *r = 0.0);
                } else {
                    for (r, v) in row.iter_mut().zip(x.iter()) {
                        *r = g[o] * v;
                    }
                }
            }
            ws.grad.biases[li].copy_from_slice(g);
            if li > 0 {
                let (lower, upper) = ws.delta.split_at_mut(li);
                let g = &upper[0];
                let prev = &mut lower[li - 1];
                prev.iter_mut().for_each(|p| *p = 0.0);
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        let row = &l.w[o * l.inputs..(o + 1) * l.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += go * w;
                        }
                    }
                }
                for (i, p) in prev.iter_mut().enumerate() {
                    *p *= self.activation.derivative(ws.pre[li - 1][i], ws.post[li][i]);
                }
            }
        }
    }

    /// Gradient of `Q[action](input)` with respect to every weight and bias.
    pub fn gradient(&self, input: &[f64], action: usize) -> Result<MlpGradient> {
        if action >= self.output_dim() {
            return Err(Error::InvalidAction {
                action: action.to_string(),
                allowed: format!("0..{}", self.output_dim()),
            });
        }
        let mut ws = self.workspace();
        self.forward_ws(&mut ws, input)?;
        self.backprop_ws(&mut ws, action);
        Ok(ws.grad)
    }

    /// `params += scale * grad`.
    pub fn apply_gradient(&mut self, grad: &MlpGradient, scale: f64) {
        for (l, (gw, gb)) in self.layers.iter_mut().zip(grad.weights.iter().zip(&grad.biases)) {
            for (w, g) in l.w.iter_mut().zip(gw) {
                *w += scale * g;
            }
            for (b, g) in l.b.iter_mut().zip(gb) {
                *b += scale * g;
            }
        }
    }

    /// TD error of one transition against the current weights. Leaves the
    /// forward pass of `state` in `ws` for a following backward pass.
    pub fn td_error_ws(
        &self,
        ws: &mut Workspace,
        t: &ControlTransition,
        gamma: f64,
    ) -> Result<f64> {
        let bootstrap = if t.terminal || gamma == 0.0 {
            0.0
        } else {
            let q_next = self.forward_ws(ws, &t.next_state)?;
            gamma * q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        let q = self.forward_ws(ws, &t.state)?;
        let q_sa = *q.get(t.action).ok_or_else(|| Error::InvalidAction {
            action: t.action.to_string(),
            allowed: format!("0..{}", q.len()),
        })?;
        Ok(t.reward + bootstrap - q_sa)
    }

    /// One sampled TD update `theta += alpha * delta * grad Q[a]`. Returns delta.
    pub fn td_update_ws(
        &mut self,
        ws: &mut Workspace,
        t: &ControlTransition,
        alpha: f64,
        gamma: f64,
    ) -> Result<f64> {
        let delta = self.td_error_ws(ws, t, gamma)?;
        if delta != 0.0 {
            self.backprop_ws(ws, t.action);
            self.apply_gradient(&ws.grad, alpha * delta);
        }
        Ok(delta)
    }
}

/// Argmax with probability `1 - eps` (ties to the lowest index), otherwise a
/// uniformly random action.
pub fn epsilon_greedy<R: Rng + ?Sized>(q: &[f64], eps: f64, rng: &mut R) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::param("q", "no actions"));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::param("eps", format!("must lie in [0, 1], got {eps}")));
    }
    if rng.gen::<f64>() < eps {
        return Ok(rng.gen_range(0..q.len()));
    }
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    CartPole,
    MountainCar,
    Acrobot,
}

impl EnvKind {
    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::CartPole => 4,
            EnvKind::MountainCar => 2,
            EnvKind::Acrobot => 6,
        }
    }

    pub fn n_actions(self) -> usize {
        match self {
            EnvKind::CartPole => 2,
            EnvKind::MountainCar | EnvKind::Acrobot => 3,
        }
    }

    /// Episode step cap.
    pub fn max_steps(self) -> usize {
        match self {
            EnvKind::CartPole | EnvKind::MountainCar => 200,
            EnvKind::Acrobot => 500,
        }
    }

    /// Inclusive range of per-step rewards.
    pub fn reward_range(self) -> (f64, f64) {
        match self {
            EnvKind::CartPole => (1.0, 1.0),
            EnvKind::MountainCar => (-1.0, -1.0),
            EnvKind::Acrobot => (-1.0, 0.0),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::CartPole => "cartpole",
            EnvKind::MountainCar => "mountaincar",
            EnvKind::Acrobot => "acrobot",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cartpole" => Ok(EnvKind::CartPole),
            "mountaincar" => Ok(EnvKind::MountainCar),
            "acrobot" => Ok(EnvKind::Acrobot),
            other => Err(Error::Config(format!("unknown control environment `{other}`"))),
        }
    }
}

// Cart-pole constants (SI units, Euler integration).
const CP_GRAVITY: f64 = 9.8;
const CP_CART_MASS: f64 = 1.0;
const CP_POLE_MASS: f64 = 0.1;
const CP_HALF_LENGTH: f64 = 0.5;
const CP_FORCE: f64 = 10.0;
const CP_TAU: f64 = 0.02;
const CP_ANGLE_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;
const CP_X_LIMIT: f64 = 2.4;

// Mountain-car constants.
const MC_MIN_POS: f64 = -1.2;
const MC_MAX_POS: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL: f64 = 0.5;
const MC_FORCE: f64 = 0.001;
const MC_GRAVITY: f64 = 0.0025;

// Acrobot constants: two unit links, unit masses, centres of mass at the
// midpoints, unit moments of inertia.
const AB_DT: f64 = 0.2;
const AB_L1: f64 = 1.0;
const AB_M1: f64 = 1.0;
const AB_M2: f64 = 1.0;
const AB_LC1: f64 = 0.5;
const AB_LC2: f64 = 0.5;
const AB_I1: f64 = 1.0;
const AB_I2: f64 = 1.0;
const AB_G: f64 = 9.8;
const AB_MAX_VEL1: f64 = 4.0 * PI;
const AB_MAX_VEL2: f64 = 9.0 * PI;
const AB_TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];

/// Result of one environment step. `terminated` marks a true terminal state;
/// `truncated` marks the step cap, which does not cut the bootstrap.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// A classic-control environment. The physical state is
/// CartPole `(x, x_dot, theta, theta_dot)`, MountainCar `(position, velocity)`,
/// Acrobot `(theta1, theta2, theta1_dot, theta2_dot)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEnv {
    kind: EnvKind,
    state: [f64; 4],
    steps: usize,
    max_steps: usize,
    done: bool,
}

fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut y = x;
    while y > PI {
        y -= two_pi;
    }
    while y < -PI {
        y += two_pi;
    }
    y
}

fn acrobot_derivs(s: &[f64; 4], torque: f64) -> [f64; 4] {
    let [th1, th2, dth1, dth2] = *s;
    let d1 = AB_M1 * AB_LC1 * AB_LC1
        + AB_M2 * (AB_L1 * AB_L1 + AB_LC2 * AB_LC2 + 2.0 * AB_L1 * AB_LC2 * th2.cos())
        + AB_I1
        + AB_I2;
    let d2 = AB_M2 * (AB_LC2 * AB_LC2 + AB_L1 * AB_LC2 * th2.cos()) + AB_I2;
    let phi2 = AB_M2 * AB_LC2 * AB_G * (th1 + th2 - PI / 2.0).cos();
    let phi1 = -AB_M2 * AB_L1 * AB_LC2 * dth2 * dth2 * th2.sin()
        - 2.0 * AB_M2 * AB_L1 * AB_LC2 * dth2 * dth1 * th2.sin()
        + (AB_M1 * AB_LC1 + AB_M2 * AB_L1) * AB_G * (th1 - PI / 2.0).cos()
        + phi2;
    let ddth2 = (torque + d2 / d1 * phi1 - AB_M2 * AB_L1 * AB_LC2 * dth1 * dth1 * th2.sin() - phi2)
        / (AB_M2 * AB_LC2 * AB_LC2 + AB_I2 - d2 * d2 / d1);
    let ddth1 = -(d2 * ddth2 + phi1) / d1;
    [dth1, dth2, ddth1, ddth2]
}

/// Total mechanical energy of an Acrobot state (zero potential at the pivot).
pub fn acrobot_energy(s: &[f64; 4]) -> f64 {
    let [th1, th2, dth1, dth2] = *s;
    let d1 = AB_M1 * AB_LC1 * AB_LC1
        + AB_M2 * (AB_L1 * AB_L1 + AB_LC2 * AB_LC2 + 2.0 * AB_L1 * AB_LC2 * th2.cos())
        + AB_I1
        + AB_I2;
    let d2 = AB_M2 * (AB_LC2 * AB_LC2 + AB_L1 * AB_LC2 * th2.cos()) + AB_I2;
    let d3 = AB_M2 * AB_LC2 * AB_LC2 + AB_I2;
    let kinetic = 0.5 * (d1 * dth1 * dth1 + 2.0 * d2 * dth1 * dth2 + d3 * dth2 * dth2);
    let potential = -AB_G
        * (AB_M1 * AB_LC1 * th1.cos() + AB_M2 * (AB_L1 * th1.cos() + AB_LC2 * (th1 + th2).cos()));
    kinetic + potential
}

impl ControlEnv {
    /// New environment in its all-zero state; call [`ControlEnv::reset`] to
    /// draw a start state.
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            state: [0.0; 4],
            steps: 0,
            max_steps: kind.max_steps(),
            done: false,
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    /// Places the system in `state` and clears the step counter.
    pub fn set_state(&mut self, state: [f64; 4]) -> Result<()> {
        for v in state {
            ensure_finite("state", v)?;
        }
        self.state = state;
        self.steps = 0;
        self.done = false;
        Ok(())
    }

    /// Draws a start state and returns its observation.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.state = match self.kind {
            EnvKind::CartPole | EnvKind::Acrobot => {
                let span = if self.kind == EnvKind::CartPole { 0.05 } else { 0.1 };
                std::array::from_fn(|_| rng.gen_range(-span..span))
            }
            EnvKind::MountainCar => [rng.gen_range(-0.6..-0.4), 0.0, 0.0, 0.0],
        };
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        let s = self.state;
        match self.kind {
            EnvKind::CartPole => s.to_vec(),
            EnvKind::MountainCar => vec![s[0], s[1]],
            EnvKind::Acrobot => vec![s[0].cos(), s[0].sin(), s[1].cos(), s[1].sin(), s[2], s[3]],
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if action >= self.kind.n_actions() {
            return Err(Error::InvalidAction {
                action: action.to_string(),
                allowed: format!("0..{}", self.kind.n_actions()),
            });
        }
        let (reward, terminated) = match self.kind {
            EnvKind::CartPole => self.cartpole_step(action),
            EnvKind::MountainCar => self.mountaincar_step(action),
            EnvKind::Acrobot => self.acrobot_step(action)?,
        };
        self.steps += 1;
        let truncated = !terminated && self.steps >= self.max_steps;
        self.done = terminated || truncated;
        Ok(StepOutcome {
            obs: self.observation(),
            reward,
            terminated,
            truncated,
        })
    }

    fn cartpole_step(&mut self, action: usize) -> (f64, bool) {
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { CP_FORCE } else { -CP_FORCE };
        let total = CP_CART_MASS + CP_POLE_MASS;
        let pml = CP_POLE_MASS * CP_HALF_LENGTH;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pml * theta_dot * theta_dot * sin) / total;
        let theta_acc = (CP_GRAVITY * sin - cos * temp)
            / (CP_HALF_LENGTH * (4.0 / 3.0 - CP_POLE_MASS * cos * cos / total));
        let x_acc = temp - pml * theta_acc * cos / total;
        self.state = [
            x + CP_TAU * x_dot,
            x_dot + CP_TAU * x_acc,
            theta + CP_TAU * theta_dot,
            theta_dot + CP_TAU * theta_acc,
        ];
        let [x, _, theta, _] = self.state;
        let terminated = x.abs() > CP_X_LIMIT || theta.abs() > CP_ANGLE_LIMIT;
        (1.0, terminated)
    }

    fn mountaincar_step(&mut self, action: usize) -> (f64, bool) {
        let [mut pos, mut vel, _, _] = self.state;
        vel += (action as f64 - 1.0) * MC_FORCE - (3.0 * pos).cos() * MC_GRAVITY;
        vel = vel.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
        pos = (pos + vel).clamp(MC_MIN_POS, MC_MAX_POS);
        if pos == MC_MIN_POS && vel < 0.0 {
            vel = 0.0;
        }
        self.state = [pos, vel, 0.0, 0.0];
        (-1.0, pos >= MC_GOAL)
    }

    fn acrobot_step(&mut self, action: usize) -> Result<(f64, bool)> {
        let torque = AB_TORQUES[action];
        let mut rhs = |_t: f64, s: &[f64; 4]| Ok(acrobot_derivs(s, torque));
        let ns = rk4_step(&mut rhs, 0.0, &self.state, AB_DT)?;
        self.state = [
            wrap_angle(ns[0]),
            wrap_angle(ns[1]),
            ns[2].clamp(-AB_MAX_VEL1, AB_MAX_VEL1),
            ns[3].clamp(-AB_MAX_VEL2, AB_MAX_VEL2),
        ];
        let [th1, th2, _, _] = self.state;
        let terminated = -th1.cos() - (th1 + th2).cos() > 1.0;
        Ok((if terminated { 0.0 } else { -1.0 }, terminated))
    }
}

/// Transition stored by the control agent: observation vectors and an action index.
pub type ControlTransition = Transition<Vec<f64>, usize>;

/// Linear exploration decay from `start` to `end` over the first
/// `decay_fraction` of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_fraction: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            decay_fraction: 0.2,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, step: usize, total_steps: usize) -> f64 {
        let span = self.decay_fraction * total_steps as f64;
        let frac = step as f64 / span;
        if span <= 0.0 || frac >= 1.0 {
            return self.end;
        }
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BufferPolicy {
    Fixed { capacity: usize },
    Adaptive(AerConfig),
}

impl BufferPolicy {
    pub fn initial_capacity(&self) -> usize {
        match self {
            BufferPolicy::Fixed { capacity } => *capacity,
            BufferPolicy::Adaptive(cfg) => cfg.n0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Sampled updates per environment step.
    pub m: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epsilon: EpsilonSchedule,
    /// Training length in environment steps; drives the exploration schedule.
    pub total_steps: usize,
    pub buffer: BufferPolicy,
}

impl DqnConfig {
    /// Per-task defaults. `n0` is the (initial) memory size; the adaptive
    /// controller checks the oldest half of it.
    pub fn for_env(kind: EnvKind, n0: usize, adaptive: bool, total_steps: usize) -> Result<Self> {
        let (alpha, gamma, hidden, sample) = match kind {
            EnvKind::CartPole => (2e-5, 0.9, vec![32], 50),
            EnvKind::MountainCar => (6e-4, 0.99, vec![64, 64], 1000),
            EnvKind::Acrobot => (1e-3, 0.99, vec![64, 64], 1000),
        };
        let buffer = if adaptive {
            let n_old = (n0 / 2).max(1);
            BufferPolicy::Adaptive(AerConfig::new(n0, 20.min(n0), n_old, sample.min(n_old))?)
        } else {
            BufferPolicy::Fixed { capacity: n0 }
        };
        Ok(Self {
            alpha,
            gamma,
            m: 50,
            hidden,
            activation: Activation::Tanh,
            epsilon: EpsilonSchedule::default(),
            total_steps,
            buffer,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("alpha", self.alpha)?;
        if self.alpha <= 0.0 {
            return Err(Error::param("alpha", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::param("gamma", format!("must lie in [0, 1), got {}", self.gamma)));
        }
        if self.m == 0 {
            return Err(Error::param("m", "must be at least 1"));
        }
        if self.buffer.initial_capacity() == 0 {
            return Err(Error::param("capacity", "must be at least 1"));
        }
        if let BufferPolicy::Adaptive(cfg) = &self.buffer {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// Summary of one finished episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Global step at which the episode ended.
    pub end_step: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    /// Memory capacity when the episode ended.
    pub capacity: usize,
}

/// One agent, its memory and its environment. Cloning yields an identical,
/// independently evolving copy (including the random stream).
#[derive(Debug, Clone)]
pub struct DqnTrainer {
    cfg: DqnConfig,
    env: ControlEnv,
    net: Mlp,
    ws: Workspace,
    buffer: ReplayBuffer<ControlTransition>,
    aer: Option<AerController>,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    step: usize,
    episode_return: f64,
    episodes: Vec<EpisodeRecord>,
}

impl DqnTrainer {
    pub fn new(kind: EnvKind, cfg: DqnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![kind.obs_dim()];
        sizes.extend(&cfg.hidden);
        sizes.push(kind.n_actions());
        let net = Mlp::new(&sizes, cfg.activation, &mut rng)?;
        let mut env = ControlEnv::new(kind);
        let obs = env.reset(&mut rng);
        let aer = match &cfg.buffer {
            BufferPolicy::Fixed { .. } => None,
            BufferPolicy::Adaptive(a) => Some(AerController::new(*a)?),
        };
        Ok(Self {
            ws: net.workspace(),
            buffer: ReplayBuffer::new(cfg.buffer.initial_capacity())?,
            cfg,
            env,
            net,
            aer,
            rng,
            obs,
            step: 0,
            episode_return: 0.0,
            episodes: Vec::new(),
        })
    }

    pub fn config(&self) -> &DqnConfig {
        &self.cfg
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn buffer(&self) -> &ReplayBuffer<ControlTransition> {
        &self.buffer
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn capacity(&self) -> usize {
        self.buffer.capacity()
    }

    pub fn adjustments(&self) -> &[AdjustmentEvent] {
        self.aer.as_ref().map_or(&[], |a| a.events.as_slice())
    }

    /// Switches the memory rule, keeping everything else. Used to branch a
    /// shared warm-up into fixed and adaptive continuations.
    pub fn set_buffer_policy(&mut self, policy: BufferPolicy) -> Result<()> {
        if policy.initial_capacity() != self.buffer.capacity() {
            return Err(Error::Config(format!(
                "policy starts at capacity {} but the memory holds capacity {}",
                policy.initial_capacity(),
                self.buffer.capacity()
            )));
        }
        self.aer = match &policy {
            BufferPolicy::Fixed { .. } => None,
            BufferPolicy::Adaptive(a) => Some(AerController::new(*a)?),
        };
        self.cfg.buffer = policy;
        Ok(())
    }

    /// One outer iteration: act, store, `m` sampled updates, then the
    /// memory-size check.
    pub fn step(&mut self) -> Result<()> {
        let eps = self.cfg.epsilon.value(self.step, self.cfg.total_steps);
        let q = self.net.forward_ws(&mut self.ws, &self.obs)?;
        let action = epsilon_greedy(q, eps, &mut self.rng)?;
        let out = self.env.step(action)?;
        let next = out.obs.clone();
        self.buffer.push(Transition::new(
            std::mem::replace(&mut self.obs, out.obs),
            action,
            out.reward,
            next,
            out.terminated,
        ));
        self.step += 1;

        for _ in 0..self.cfg.m {
            let i = self.buffer.sample_uniform_index(&mut self.rng)?;
            let t = self.buffer.get(i).ok_or(Error::EmptyBuffer)?;
            self.net.td_update_ws(&mut self.ws, t, self.cfg.alpha, self.cfg.gamma)?;
        }

        if let Some(aer) = self.aer.as_mut() {
            let net = &self.net;
            let ws = &mut self.ws;
            let gamma = self.cfg.gamma;
            // A failed forward pass cannot happen for stored transitions of
            // the right shape; treat it as a NaN so the caller sees an error.
            aer.maybe_adjust(
                self.step,
                &mut self.buffer,
                |t| net.td_error_ws(ws, t, gamma).unwrap_or(f64::NAN),
                &mut self.rng,
            )?;
        }

        self.episode_return += out.reward;
        if out.terminated || out.truncated {
            self.episodes.push(EpisodeRecord {
                episode: self.episodes.len(),
                end_step: self.step,
                ret: self.episode_return,
                capacity: self.buffer.capacity(),
            });
            self.episode_return = 0.0;
            self.obs = self.env.reset(&mut self.rng);
        }
        Ok(())
    }

    /// Steps until `steps_taken() == target`.
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        while self.step < target {
            self.step()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn finite_difference_check(net: &Mlp, input: &[f64], action: usize) -> f64 {
        let g = net.gradient(input, action).unwrap();
        let analytic: Vec<f64> = g
            .weights
            .iter()
            .zip(&g.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let base = net.params_flat();
        let mut probe = net.clone();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            probe.set_params_flat(&p).unwrap();
            let up = probe.forward(input).unwrap()[action];
            p[i] -= 2.0 * h;
            probe.set_params_flat(&p).unwrap();
            let down = probe.forward(input).unwrap()[action];
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[4, 8, 2], Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_forward_and_gradient() {
        let mut net = Mlp::zeros(&[3, 2], Activation::Tanh).unwrap();
        let (w, b) = net.layer_mut(0).unwrap();
        w.copy_from_slice(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        b.copy_from_slice(&[0.1, -0.2]);
        let x = [1.0, -1.0, 2.0];
        let q = net.forward(&x).unwrap();
        assert!((q[0] - (1.0 - 2.0 + 6.0 + 0.1)).abs() < 1e-15);
        assert!((q[1] - (-1.0 - 0.5 - 0.2)).abs() < 1e-15);

        let g = net.gradient(&x, 1).unwrap();
        assert_eq!(g.weights[0], vec![0.0, 0.0, 0.0, 1.0, -1.0, 2.0]);
        assert_eq!(g.biases[0], vec![0.0, 1.0]);
    }

    #[test]
    fn output_row_of_other_actions_has_zero_gradient() {
        let net = Mlp::new(&[4, 16, 3], Activation::Relu, &mut rng(1)).unwrap();
        let g = net.gradient(&[0.3, -0.2, 0.1, 0.9], 2).unwrap();
        let last = g.weights.last().unwrap();
        assert!(last[..2 * 16].iter().all(|&v| v == 0.0));
        assert_eq!(&g.biases.last().unwrap()[..], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::zeros(&[4, 2], Activation::Tanh).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::ShapeMismatch { expected: 4, got: 1 })));
        assert!(net.gradient(&[0.0; 4], 5).is_err());
        assert!(Mlp::zeros(&[4], Activation::Tanh).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(2);
        for (sizes, act) in [
            (vec![4, 32, 2], Activation::Tanh),
            (vec![6, 64, 64, 3], Activation::Tanh),
            (vec![2, 16, 16, 3], Activation::Tanh),
        ] {
            for _ in 0..5 {
                let net = Mlp::new(&sizes, act, &mut r).unwrap();
                let x: Vec<f64> = (0..sizes[0]).map(|_| r.gen_range(-1.0..1.0)).collect();
                let a = r.gen_range(0..*sizes.last().unwrap());
                let worst = finite_difference_check(&net, &x, a);
                assert!(worst <= 1e-4, "{sizes:?}: {worst}");
            }
        }
    }

    #[test]
    fn epsilon_greedy_rules() {
        let mut r = rng(3);
        for _ in 0..100 {
            assert_eq!(epsilon_greedy(&[0.1, 0.7, 0.3], 0.0, &mut r).unwrap(), 1);
            assert_eq!(epsilon_greedy(&[1.0, 1.0], 0.0, &mut r).unwrap(), 0);
        }
        assert!(epsilon_greedy(&[], 0.1, &mut r).is_err());
        assert!(epsilon_greedy(&[1.0], 1.5, &mut r).is_err());

        let draws = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[epsilon_greedy(&[5.0, 0.0, 0.0], 1.0, &mut r).unwrap()] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - p * draws as f64).abs() <= 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn cartpole_one_euler_step() {
        let mut env = ControlEnv::new(EnvKind::CartPole);
        env.set_state([0.0; 4]).unwrap();
        env.step(1).unwrap();
        let total = 1.1;
        let temp = 10.0 / total;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / total));
        let x_acc = temp - 0.05 * theta_acc / total;
        let s = env.state();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 0.02 * x_acc).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
        assert!((s[3] - 0.02 * theta_acc).abs() < 1e-15);
        let out = env.step(0).unwrap();
        assert!((env.state()[0] - 0.02 * 0.02 * x_acc).abs() < 1e-15);
        assert!(env.state()[0].abs() < 0.01 && !out.terminated);
    }

    #[test]
    fn cartpole_terminates_past_angle_limit() {
        let mut env = ControlEnv::new(EnvKind::CartPole);
        env.set_state([0.0, 0.0, 0.25, 0.0]).unwrap();
        let out = env.step(0).unwrap();
        assert!(out.terminated && !out.truncated);
        assert!(matches!(env.step(0), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn cartpole_truncates_at_cap() {
        let mut env = ControlEnv::new(EnvKind::CartPole).with_max_steps(3);
        env.set_state([0.0; 4]).unwrap();
        let mut last = None;
        for i in 0..3 {
            last = Some(env.step(i % 2).unwrap());
        }
        let last = last.unwrap();
        assert!(last.truncated && !last.terminated);
    }

    #[test]
    fn mountaincar_rests_at_valley_bottom() {
        let mut env = ControlEnv::new(EnvKind::MountainCar);
        let bottom = -PI / 6.0;
        env.set_state([bottom, 0.0, 0.0, 0.0]).unwrap();
        for _ in 0..150 {
            let out = env.step(1).unwrap();
            assert_eq!(out.reward, -1.0);
        }
        assert!((env.state()[0] - bottom).abs() < 1e-9);
    }

    #[test]
    fn mountaincar_goal_terminates() {
        let mut env = ControlEnv::new(EnvKind::MountainCar);
        env.set_state([0.49, 0.02, 0.0, 0.0]).unwrap();
        assert!(env.step(2).unwrap().terminated);
    }

    #[test]
    fn acrobot_conserves_energy_without_torque() {
        let mut env = ControlEnv::new(EnvKind::Acrobot);
        let start = [1.0, 0.5, 0.0, 0.0];
        env.set_state(start).unwrap();
        let e0 = acrobot_energy(&start);
        for _ in 0..100 {
            env.step(1).unwrap();
            let e = acrobot_energy(&env.state());
            assert!((e - e0).abs() <= 0.02 * e0.abs(), "{e} vs {e0}");
        }
    }

    #[test]
    fn acrobot_terminal_when_tip_is_high() {
        let mut env = ControlEnv::new(EnvKind::Acrobot);
        env.set_state([PI - 0.01, 0.0, 0.0, 0.0]).unwrap();
        let out = env.step(1).unwrap();
        assert!(out.terminated);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.obs.len(), 6);
    }

    #[test]
    fn rewards_stay_in_documented_ranges() {
        let mut r = rng(4);
        for kind in [EnvKind::CartPole, EnvKind::MountainCar, EnvKind::Acrobot] {
            let mut env = ControlEnv::new(kind);
            env.reset(&mut r);
            let (lo, hi) = kind.reward_range();
            for _ in 0..2000 {
                let out = env.step(r.gen_range(0..kind.n_actions())).unwrap();
                assert!(out.reward >= lo && out.reward <= hi);
                assert_eq!(out.obs.len(), kind.obs_dim());
                if out.terminated || out.truncated {
                    env.reset(&mut r);
                }
            }
        }
    }

    fn small_cfg(capacity: usize, m: usize) -> DqnConfig {
        DqnConfig {
            alpha: 1e-3,
            gamma: 0.9,
            m,
            hidden: vec![8],
            activation: Activation::Relu,
            epsilon: EpsilonSchedule::default(),
            total_steps: 500,
            buffer: BufferPolicy::Fixed { capacity },
        }
    }

    #[test]
    fn capacity_one_is_online_td() {
        // With one slot every sampled update uses the newest transition.
        let mut tr = DqnTrainer::new(EnvKind::CartPole, small_cfg(1, 3), 5).unwrap();
        for _ in 0..20 {
            let before = tr.net.clone();
            tr.step().unwrap();
            let newest = tr.buffer.get(0).unwrap().clone();
            let mut expected = before;
            let mut ws = expected.workspace();
            for _ in 0..3 {
                expected.td_update_ws(&mut ws, &newest, 1e-3, 0.9).unwrap();
            }
            assert_eq!(expected.params_flat(), tr.net.params_flat());
        }
    }

    #[test]
    fn zero_td_error_leaves_weights() {
        let mut net = Mlp::zeros(&[4, 8, 2], Activation::Relu).unwrap();
        let mut ws = net.workspace();
        let t = Transition::new(vec![0.1; 4], 1, 0.0, vec![0.2; 4], false);
        let d = net.td_update_ws(&mut ws, &t, 0.5, 0.9).unwrap();
        assert_eq!(d, 0.0);
        assert!(net.params_flat().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn buffer_counts_steps_until_full() {
        let mut tr = DqnTrainer::new(EnvKind::CartPole, small_cfg(100, 1), 6).unwrap();
        for k in 1..=100 {
            tr.step().unwrap();
            assert_eq!(tr.buffer().len(), k);
        }
        tr.step().unwrap();
        assert_eq!(tr.buffer().len(), 100);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = DqnConfig::for_env(EnvKind::CartPole, 50, true, 300).unwrap();
        let mut a = DqnTrainer::new(EnvKind::CartPole, cfg.clone(), 7).unwrap();
        let mut b = DqnTrainer::new(EnvKind::CartPole, cfg, 7).unwrap();
        a.run_until(300).unwrap();
        b.run_until(300).unwrap();
        assert_eq!(a.net().params_flat(), b.net().params_flat());
        assert_eq!(a.episodes(), b.episodes());
        assert_eq!(a.adjustments(), b.adjustments());
    }

    #[test]
    fn fork_matches_uninterrupted_run() {
        let cfg = DqnConfig::for_env(EnvKind::CartPole, 40, true, 200).unwrap();
        let mut whole = DqnTrainer::new(EnvKind::CartPole, cfg.clone(), 8).unwrap();
        whole.run_until(200).unwrap();

        let fixed = DqnConfig::for_env(EnvKind::CartPole, 40, false, 200).unwrap();
        let mut pre = DqnTrainer::new(EnvKind::CartPole, fixed, 8).unwrap();
        pre.run_until(39).unwrap();
        let mut branch = pre.clone();
        branch.set_buffer_policy(cfg.buffer).unwrap();
        branch.run_until(200).unwrap();
        assert_eq!(whole.net().params_flat(), branch.net().params_flat());
        assert_eq!(whole.adjustments(), branch.adjustments());
    }

    #[test]
    fn epsilon_schedule() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0, 1000), 1.0);
        assert!((s.value(100, 1000) - 0.525).abs() < 1e-12);
        assert_eq!(s.value(200, 1000), 0.05);
        assert_eq!(s.value(900, 1000), 0.05);
    }

    #[test]
    fn env_kind_parsing() {
        assert_eq!("CartPole".parse::<EnvKind>().unwrap(), EnvKind::CartPole);
        assert_eq!(EnvKind::Acrobot.to_string(), "acrobot");
        assert!("pong".parse::<EnvKind>().is_err());
    }

    proptest! {
        #[test]
        fn forward_is_finite_for_bounded_input(seed in 0u64..1000, relu in any::<bool>()) {
            let act = if relu { Activation::Relu } else { Activation::Tanh };
            let mut r = rng(seed);
            let net = Mlp::new(&[6, 64, 64, 3], act, &mut r).unwrap();
            let x: Vec<f64> = (0..6).map(|_| r.gen_range(-10.0..10.0)).collect();
            prop_assert!(net.forward(&x).unwrap().iter().all(|v| v.is_finite()));
        }
    }
}
