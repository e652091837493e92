//! Continuous-time model of replay learning on LineSearch.
//!
//! Replaying `m` uniformly drawn transitions per step from a window of the
//! last `n(t) = min(t, N)` steps moves the weights, on average, by
//! `m * alpha / n * integral over the window of delta * grad Q`. Under a greedy
//! policy with `theta1 > 0` the visited states are `x(t') = x0 + v t'`, which
//! makes the window integrals polynomial in `t` and gives the closed
//! coefficient form in [`er_rhs_gamma0`]. The history-based right-hand sides
//! ([`memory_window_rhs`], [`per_rhs`]) evaluate the same integrals by
//! quadrature over a recorded state trajectory instead.
//!
//! Time is measured in learning steps. A window sample at time `t'` stands
//! for the transition whose reached state is `x(t')`, so its feature is
//! `(x(t'), 1)` and its reward `r(x(t'))`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::linesearch::{LinearTheta, MetricPair, TrueWeights};

/// Fixed-step classical Runge-Kutta output: the state at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const D: usize> {
    pub times: Vec<f64>,
    pub states: Vec<[f64; D]>,
}

fn axpy<const D: usize>(y: &[f64; D], a: f64, k: &[f64; D]) -> [f64; D] {
    std::array::from_fn(|i| y[i] + a * k[i])
}

/// One classical RK4 step of size `h` from `(t, y)`.
pub fn rk4_step<const D: usize, F>(rhs: &mut F, t: f64, y: &[f64; D], h: f64) -> Result<[f64; D]>
where
    F: FnMut(f64, &[f64; D]) -> Result<[f64; D]>,
{
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + 0.5 * h, &axpy(y, 0.5 * h, &k1))?;
    let k3 = rhs(t + 0.5 * h, &axpy(y, 0.5 * h, &k2))?;
    let k4 = rhs(t + h, &axpy(y, h, &k3))?;
    Ok(std::array::from_fn(|i| {
        y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    }))
}

fn grid_len(t0: f64, t1: f64, h: f64) -> Result<usize> {
    ensure_finite("t0", t0)?;
    ensure_finite("t1", t1)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("h", format!("step must be positive, got {h}")));
    }
    if t1 <= t0 {
        return Err(Error::param("t1", format!("must exceed t0 = {t0}, got {t1}")));
    }
    // Tolerate round-off so that (t1 - t0) / h that is "really" an integer
    // does not produce a sliver step at the end.
    Ok((((t1 - t0) / h) - 1e-9).ceil().max(1.0) as usize)
}

/// RK4 over `[t0, t1]` with a fallible right-hand side. Samples every `h`;
/// the last step is shortened to land on `t1`. Grid times are computed as
/// `t0 + i h` so they do not accumulate round-off.
pub fn rk4_integrate_with<const D: usize, F>(
    mut rhs: F,
    y0: [f64; D],
    t0: f64,
    t1: f64,
    h: f64,
) -> Result<Trajectory<D>>
where
    F: FnMut(f64, &[f64; D]) -> Result<[f64; D]>,
{
    let steps = grid_len(t0, t1, h)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(y0);
    let mut y = y0;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let t_next = if i + 1 == steps { t1 } else { t0 + (i + 1) as f64 * h };
        y = rk4_step(&mut rhs, t, &y, t_next - t)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: t_next });
        }
        times.push(t_next);
        states.push(y);
    }
    Ok(Trajectory { times, states })
}

/// RK4 with an infallible right-hand side. Fails only on non-finite states.
pub fn rk4_integrate<const D: usize, F>(
    mut rhs: F,
    y0: [f64; D],
    t0: f64,
    t1: f64,
    h: f64,
) -> Result<Trajectory<D>>
where
    F: FnMut(f64, &[f64; D]) -> [f64; D],
{
    rk4_integrate_with(|t, y| Ok(rhs(t, y)), y0, t0, t1, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeParams {
    /// Minibatch size.
    pub m: usize,
    pub alpha: f64,
    /// Memory size `N`.
    pub memory: usize,
    pub v: f64,
    pub x0: f64,
    pub gamma: f64,
    pub beta: TrueWeights,
}

impl Default for OdeParams {
    fn default() -> Self {
        Self {
            m: 5,
            alpha: 0.01,
            memory: 100,
            v: 0.01,
            x0: -5.0,
            gamma: 0.0,
            beta: TrueWeights::default(),
        }
    }
}

impl OdeParams {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("alpha", self.alpha)?;
        ensure_finite("v", self.v)?;
        ensure_finite("x0", self.x0)?;
        if self.m == 0 {
            return Err(Error::param("m", "must be at least 1"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::param("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if self.memory == 0 {
            return Err(Error::param("memory", "must be at least 1"));
        }
        if self.v <= 0.0 {
            return Err(Error::param("v", format!("must be positive, got {}", self.v)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::param("gamma", format!("must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    /// `m * alpha`.
    pub fn rate(&self) -> f64 {
        self.m as f64 * self.alpha
    }

    /// Effective window `n(t) = min(t, N)`.
    pub fn window(&self, t: f64) -> f64 {
        t.clamp(0.0, self.memory as f64)
    }

    /// State reached at time `t` under the greedy policy with `theta1 > 0`.
    pub fn state_at(&self, t: f64) -> f64 {
        self.x0 + self.v * t
    }
}

/// Theory curve: metric values on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl OdeSolution {
    pub fn from_trajectory(traj: &Trajectory<2>) -> Self {
        Self {
            times: traj.times.clone(),
            d1: traj.states.iter().map(|s| s[0]).collect(),
            d2: traj.states.iter().map(|s| s[1]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<MetricPair> {
        let i = self.len().checked_sub(1)?;
        Some(MetricPair::new(self.d1[i], self.d2[i]))
    }

    /// Linear interpolation at `t`; `None` outside the grid.
    pub fn value_at(&self, t: f64) -> Option<MetricPair> {
        let (first, last) = (*self.times.first()?, *self.times.last()?);
        if !(first..=last).contains(&t) {
            return None;
        }
        let j = self.times.partition_point(|&s| s < t);
        if self.times[j] == t || j == 0 {
            return Some(MetricPair::new(self.d1[j], self.d2[j]));
        }
        let (ta, tb) = (self.times[j - 1], self.times[j]);
        let w = (t - ta) / (tb - ta);
        Some(MetricPair::new(
            self.d1[j - 1] + w * (self.d1[j] - self.d1[j - 1]),
            self.d2[j - 1] + w * (self.d2[j] - self.d2[j - 1]),
        ))
    }

    /// Values at integer steps `0..=t_end`.
    pub fn at_integer_steps(&self, t_end: usize) -> Result<Vec<MetricPair>> {
        (0..=t_end)
            .map(|t| {
                self.value_at(t as f64)
                    .ok_or_else(|| Error::GridMismatch(format!("t = {t} is outside the solution grid")))
            })
            .collect()
    }
}

/// Window-averaged coefficients of the LineSearch metric dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoeffSetB {
    pub b10: f64,
    pub b11: f64,
    pub b12: f64,
    pub b20: f64,
    pub b21: f64,
    pub b22: f64,
}

impl CoeffSetB {
    /// `b10 + b11 t + b12 t^2`: the window mean of `x^2`, times `m alpha`.
    pub fn quadratic(&self, t: f64) -> f64 {
        self.b10 + t * (self.b11 + t * self.b12)
    }

    /// `b20 + b21 t`: the window mean of `x`, times `m alpha`.
    pub fn linear(&self, t: f64) -> f64 {
        self.b20 + self.b21 * t
    }
}

/// Coefficients for effective window `n`.
pub fn coeffs_b(params: &OdeParams, n: f64) -> CoeffSetB {
    let (c, v, x0) = (params.rate(), params.v, params.x0);
    CoeffSetB {
        b10: c * (n * n * v * v / 3.0 + x0 * x0 - n * v * x0),
        b11: c * (2.0 * v * x0 - n * v * v),
        b12: c * v * v,
        b20: c * (x0 - n * v / 2.0),
        b21: c * v,
        b22: c,
    }
}

/// Metric derivatives for uniform replay with `gamma = 0`.
pub fn er_rhs_gamma0(t: f64, d: MetricPair, params: &OdeParams) -> MetricPair {
    let b = coeffs_b(params, params.window(t));
    let (q, l) = (b.quadratic(t), b.linear(t));
    MetricPair::new(-q * d.d1 - l * d.d2, -l * d.d1 - b.b22 * d.d2)
}

/// Weight derivatives for uniform replay with discount `gamma`. Written in raw
/// weights because of the `|theta1|` term coming from the greedy bootstrap.
pub fn er_rhs_gamma(t: f64, theta: LinearTheta, params: &OdeParams) -> LinearTheta {
    let b = coeffs_b(params, params.window(t));
    let (q, l) = (b.quadratic(t), b.linear(t));
    let g = params.gamma;
    let slope = (1.0 - g) * theta.theta1 - params.beta.beta1();
    let intercept = (1.0 - g) * theta.theta2 - g * params.v * theta.theta1.abs() - params.beta.beta2();
    LinearTheta::new(-q * slope - l * intercept, -l * slope - b.b22 * intercept)
}

/// Uniform replay with the slope metric held at zero: `d2' = -m alpha d2`.
pub fn fixed_slope_rhs(_t: f64, d2: f64, params: &OdeParams) -> f64 {
    -params.rate() * d2
}

/// Uniform replay with the intercept metric held at zero.
pub fn fixed_intercept_rhs(t: f64, d1: f64, params: &OdeParams) -> f64 {
    -coeffs_b(params, params.window(t)).quadratic(t) * d1
}

// Four-point Gauss-Legendre nodes and weights on [-1, 1]; exact for
// polynomials up to degree 7, which covers every prioritized integrand here.
const GL_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// Prioritized (exponent 2) replay with `gamma = 0` on the linear greedy
/// trajectory: `m alpha * int delta^3 grad Q / int delta^2`, integrated
/// exactly. A window with `delta == 0` throughout yields zero.
pub fn per_rhs_closed(t: f64, d: MetricPair, params: &OdeParams) -> MetricPair {
    let n = params.window(t);
    let c = params.rate();
    if n <= 0.0 {
        let y = params.state_at(t);
        let delta = -(d.d1 * y + d.d2);
        return MetricPair::new(c * delta * y, c * delta);
    }
    let lo = t - n;
    let nodes: [(f64, f64); 4] = std::array::from_fn(|i| {
        let y = params.state_at(lo + 0.5 * (GL_NODES[i] + 1.0) * n);
        (y, -(d.d1 * y + d.d2))
    });
    // The ratio is homogeneous of degree one in delta; rescale so tiny errors
    // late in training do not underflow when squared.
    let scale = nodes.iter().fold(0.0f64, |a, &(_, e)| a.max(e.abs()));
    if scale == 0.0 {
        return MetricPair::default();
    }
    let (mut num1, mut num2, mut den) = (0.0, 0.0, 0.0);
    for (&(y, delta), w) in nodes.iter().zip(GL_WEIGHTS) {
        let u = delta / scale;
        let u2 = u * u;
        num1 += w * u2 * u * y;
        num2 += w * u2 * u;
        den += w * u2;
    }
    MetricPair::new(c * scale * num1 / den, c * scale * num2 / den)
}

/// Exploration rule for the mean state drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Greedy,
    EpsilonGreedy(f64),
}

/// Mean drift `dx/dt` of the LineSearch state. Greedy moves at `sign(theta1) v`
/// (ties to `+v`); with exploration rate `eps` the random half of the moves
/// averages to zero, leaving `(1 - eps) sign(theta1) v`.
pub fn state_derivative(theta: &LinearTheta, policy: Policy, v: f64) -> f64 {
    let sign = if theta.theta1 >= 0.0 { 1.0 } else { -1.0 };
    match policy {
        Policy::Greedy => sign * v,
        Policy::EpsilonGreedy(eps) => (1.0 - eps) * sign * v,
    }
}

/// Recorded reached-state trajectory `x(t')`, ascending in time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateHistory {
    times: Vec<f64>,
    states: Vec<f64>,
}

impl StateHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a point; times must increase.
    pub fn push(&mut self, t: f64, x: f64) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(Error::GridMismatch(format!(
                    "history time {t} does not follow {last}"
                )));
            }
        }
        self.times.push(t);
        self.states.push(x);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Quadrature nodes `(t', x(t'))` covering `[lo, t]`: the interpolated
    /// lower boundary, recorded points strictly inside, and the head `(t, x_now)`.
    fn window_nodes(&self, lo: f64, t: f64, x_now: f64) -> Result<Vec<(f64, f64)>> {
        let first = *self.times.first().ok_or(Error::EmptyWindow { t })?;
        if lo < first - 1e-12 {
            return Err(Error::EmptyWindow { t });
        }
        let start = self.times.partition_point(|&s| s <= lo);
        let end = self.times.partition_point(|&s| s < t);
        let x_lo = if start == 0 {
            self.states[0]
        } else if start == self.times.len() {
            // Window lies between the last record and the head.
            let (ta, xa) = (self.times[start - 1], self.states[start - 1]);
            if t > ta {
                xa + (x_now - xa) * (lo - ta) / (t - ta)
            } else {
                x_now
            }
        } else {
            let (ta, tb) = (self.times[start - 1], self.times[start]);
            let (xa, xb) = (self.states[start - 1], self.states[start]);
            xa + (xb - xa) * (lo - ta) / (tb - ta)
        };
        let mut nodes = Vec::with_capacity(end.saturating_sub(start) + 2);
        nodes.push((lo, x_lo));
        for i in start..end {
            if self.times[i] > lo {
                nodes.push((self.times[i], self.states[i]));
            }
        }
        nodes.push((t, x_now));
        Ok(nodes)
    }
}

/// TD error of the window sample whose reached state is `y`.
fn window_td(theta: &LinearTheta, y: f64, params: &OdeParams) -> f64 {
    let q_sa = theta.theta1 * y + theta.theta2;
    let bootstrap = if params.gamma == 0.0 {
        0.0
    } else {
        let plus = theta.theta1 * (y + params.v) + theta.theta2;
        let minus = theta.theta1 * (y - params.v) + theta.theta2;
        params.gamma * plus.max(minus)
    };
    params.beta.reward(y) + bootstrap - q_sa
}

fn trapezoid<F: FnMut(f64) -> [f64; 3]>(nodes: &[(f64, f64)], mut f: F) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut prev = f(nodes[0].1);
    for w in nodes.windows(2) {
        let dt = w[1].0 - w[0].0;
        let cur = f(w[1].1);
        for i in 0..3 {
            acc[i] += 0.5 * dt * (prev[i] + cur[i]);
        }
        prev = cur;
    }
    acc
}

/// Uniform-replay weight derivative by trapezoid quadrature over the recorded
/// window `[t - n(t), t]`, divided by `n(t)`. `x_now` is the state at `t`;
/// `history` must cover the lower end of the window. A zero-length window
/// gives the instantaneous update `m alpha delta grad Q`.
pub fn memory_window_rhs(
    t: f64,
    theta: &LinearTheta,
    x_now: f64,
    history: &StateHistory,
    params: &OdeParams,
) -> Result<LinearTheta> {
    let n = params.window(t);
    let c = params.rate();
    if n <= 0.0 {
        let delta = window_td(theta, x_now, params);
        return Ok(LinearTheta::new(c * delta * x_now, c * delta));
    }
    let nodes = history.window_nodes(t - n, t, x_now)?;
    let [s1, s2, _] = trapezoid(&nodes, |y| {
        let delta = window_td(theta, y, params);
        [delta * y, delta, 0.0]
    });
    Ok(LinearTheta::new(c * s1 / n, c * s2 / n))
}

/// Prioritized (exponent 2) weight derivative by trapezoid quadrature:
/// `m alpha * int delta^3 grad Q / int delta^2`. Zero when `delta` vanishes
/// on the whole window.
pub fn per_rhs(
    t: f64,
    theta: &LinearTheta,
    x_now: f64,
    history: &StateHistory,
    params: &OdeParams,
) -> Result<LinearTheta> {
    let n = params.window(t);
    let c = params.rate();
    if n <= 0.0 {
        let delta = window_td(theta, x_now, params);
        return Ok(LinearTheta::new(c * delta * x_now, c * delta));
    }
    let nodes = history.window_nodes(t - n, t, x_now)?;
    let scale = nodes
        .iter()
        .fold(0.0f64, |a, &(_, y)| a.max(window_td(theta, y, params).abs()));
    if scale == 0.0 {
        return Ok(LinearTheta::default());
    }
    let [s1, s2, den] = trapezoid(&nodes, |y| {
        let u = window_td(theta, y, params) / scale;
        let u2 = u * u;
        [u2 * u * y, u2 * u, u2]
    });
    Ok(LinearTheta::new(c * scale * s1 / den, c * scale * s2 / den))
}

/// Which replay rule drives the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayRule {
    Uniform,
    Prioritized,
}

/// Metric trajectory for uniform replay using the closed coefficients. Uses
/// the raw-weight form when `gamma > 0`.
pub fn integrate_er(params: &OdeParams, d0: MetricPair, t_end: f64, h: f64) -> Result<OdeSolution> {
    params.validate()?;
    let traj = if params.gamma == 0.0 {
        rk4_integrate(
            |t, y: &[f64; 2]| {
                let d = er_rhs_gamma0(t, MetricPair::new(y[0], y[1]), params);
                [d.d1, d.d2]
            },
            [d0.d1, d0.d2],
            0.0,
            t_end,
            h,
        )?
    } else {
        let beta = params.beta;
        let theta0 = LinearTheta::from_metrics(d0, &beta);
        let mut traj = rk4_integrate(
            |t, y: &[f64; 2]| {
                let d = er_rhs_gamma(t, LinearTheta::new(y[0], y[1]), params);
                [d.theta1, d.theta2]
            },
            [theta0.theta1, theta0.theta2],
            0.0,
            t_end,
            h,
        )?;
        for s in &mut traj.states {
            *s = [s[0] - beta.beta1(), s[1] - beta.beta2()];
        }
        traj
    };
    Ok(OdeSolution::from_trajectory(&traj))
}

/// Metric trajectory for prioritized replay on the linear greedy trajectory
/// (`gamma = 0`).
pub fn integrate_per(params: &OdeParams, d0: MetricPair, t_end: f64, h: f64) -> Result<OdeSolution> {
    params.validate()?;
    if params.gamma != 0.0 {
        return Err(Error::param(
            "gamma",
            "the closed prioritized model needs gamma = 0; use integrate_memory_window",
        ));
    }
    let traj = rk4_integrate(
        |t, y: &[f64; 2]| {
            let d = per_rhs_closed(t, MetricPair::new(y[0], y[1]), params);
            [d.d1, d.d2]
        },
        [d0.d1, d0.d2],
        0.0,
        t_end,
        h,
    )?;
    Ok(OdeSolution::from_trajectory(&traj))
}

/// Joint integration of weights and state, with the window integrals taken
/// over the recorded state trajectory. Handles any `gamma`, either replay
/// rule, and either policy; the state follows [`state_derivative`].
pub fn integrate_memory_window(
    params: &OdeParams,
    d0: MetricPair,
    t_end: f64,
    h: f64,
    rule: ReplayRule,
    policy: Policy,
) -> Result<OdeSolution> {
    params.validate()?;
    let steps = grid_len(0.0, t_end, h)?;
    let beta = params.beta;
    let theta0 = LinearTheta::from_metrics(d0, &beta);
    let mut history = StateHistory::new();
    let mut y = [theta0.theta1, theta0.theta2, params.x0];
    let mut sol = OdeSolution {
        times: vec![0.0],
        d1: vec![d0.d1],
        d2: vec![d0.d2],
    };
    for i in 0..steps {
        let t = i as f64 * h;
        let t_next = if i + 1 == steps { t_end } else { (i + 1) as f64 * h };
        history.push(t, y[2])?;
        let mut rhs = |s: f64, z: &[f64; 3]| -> Result<[f64; 3]> {
            let theta = LinearTheta::new(z[0], z[1]);
            let dtheta = match rule {
                ReplayRule::Uniform => memory_window_rhs(s, &theta, z[2], &history, params)?,
                ReplayRule::Prioritized => per_rhs(s, &theta, z[2], &history, params)?,
            };
            Ok([dtheta.theta1, dtheta.theta2, state_derivative(&theta, policy, params.v)])
        };
        y = rk4_step(&mut rhs, t, &y, t_next - t)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: t_next });
        }
        sol.times.push(t_next);
        sol.d1.push(y[0] - beta.beta1());
        sol.d2.push(y[1] - beta.beta2());
    }
    Ok(sol)
}

/// Which metric is held at zero in the one-dimensional reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pinned {
    /// `d1 = 0`, only the intercept metric evolves.
    Slope,
    /// `d2 = 0`, only the slope metric evolves.
    Intercept,
}

/// One-dimensional reduction with one metric pinned at zero. Returns the free
/// metric's trajectory. `gamma` is ignored (taken as zero).
pub fn integrate_pinned(
    params: &OdeParams,
    pinned: Pinned,
    initial: f64,
    t_end: f64,
    h: f64,
    rule: ReplayRule,
) -> Result<Trajectory<1>> {
    params.validate()?;
    rk4_integrate(
        |t, y: &[f64; 1]| {
            let d = match pinned {
                Pinned::Slope => MetricPair::new(0.0, y[0]),
                Pinned::Intercept => MetricPair::new(y[0], 0.0),
            };
            let rate = match (rule, pinned) {
                (ReplayRule::Uniform, Pinned::Slope) => return [fixed_slope_rhs(t, y[0], params)],
                (ReplayRule::Uniform, Pinned::Intercept) => return [fixed_intercept_rhs(t, y[0], params)],
                (ReplayRule::Prioritized, _) => per_rhs_closed(t, d, params),
            };
            [match pinned {
                Pinned::Slope => rate.d2,
                Pinned::Intercept => rate.d1,
            }]
        },
        [initial],
        0.0,
        t_end,
        h,
    )
}
