//! Experiment orchestration: flat JSON configs, seeded LineSearch runs,
//! theory curves, memory/minibatch sweeps, ER-vs-pER maps, adaptive-memory
//! runs, control-task training, and CSV/JSON output.
//!
//! Repeated seeds and sweep cells run on a rayon pool whose size can be set
//! with `MEMREPLAY_WORKERS`. Results are collected in input order and reduced
//! sequentially, so outputs do not depend on scheduling.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{beginning_stage, last_stage, AnalyticParams, StageEstimate};
use crate::error::{ensure_finite, Error, Result};
use crate::linesearch::{
    env_step, greedy_action, metrics, td_error, LineSearchConfig, LineSearchTransition, LinearTheta,
    MetricPair, TrueWeights,
};
use crate::neural_control::{Activation, BufferPolicy, DqnConfig, DqnTrainer, EnvKind, EpisodeRecord};
use crate::ode_model::{
    integrate_er, integrate_memory_window, integrate_per, OdeParams, OdeSolution, Policy, ReplayRule,
};
use crate::replay::{AdjustmentEvent, AerConfig, AerController, Direction, PrioritizationConfig, ReplayBuffer};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "MEMREPLAY_WORKERS";

/// Half-width of the band in which ER and pER count as "similar".
pub const SIMILARITY_BAND: f64 = 1.5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Simulate,
    Ode,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    #[default]
    LineSearch,
    CartPole,
    MountainCar,
    Acrobot,
}

impl Environment {
    /// The control task behind this environment, if any.
    pub fn control(self) -> Option<EnvKind> {
        match self {
            Environment::LineSearch => None,
            Environment::CartPole => Some(EnvKind::CartPole),
            Environment::MountainCar => Some(EnvKind::MountainCar),
            Environment::Acrobot => Some(EnvKind::Acrobot),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayKind {
    #[default]
    Er,
    Per,
    Aer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalyticStage {
    #[default]
    Beginning,
    Last,
}

/// Fully resolved replay rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplayPolicy {
    Er,
    Per(PrioritizationConfig),
    Aer(AerConfig),
}

/// Flat key-value experiment description. Every field has a default; unset
/// optional hyperparameters fall back to per-environment defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub environment: Environment,
    pub replay: ReplayKind,
    /// Priority exponent for `per`.
    pub beta_exp: f64,
    /// Adjustment interval and capacity step for `aer`.
    pub aer_k: usize,
    /// Oldest-window size; defaults to half the initial memory.
    pub aer_n_old: Option<usize>,
    /// Entries sampled from the oldest window.
    pub aer_sample_count: Option<usize>,
    pub m: Option<usize>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    /// Memory size (initial size for `aer`).
    pub memory: Option<usize>,
    pub v: f64,
    pub x0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub d1_0: f64,
    pub d2_0: f64,
    /// LineSearch learning steps `T`.
    pub horizon: usize,
    /// ODE step size.
    pub h: f64,
    pub seed: u64,
    pub repetitions: usize,
    pub sweep_memory: Vec<usize>,
    pub sweep_m: Vec<usize>,
    pub stage: AnalyticStage,
    pub stage_d1: f64,
    pub stage_d2: f64,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    /// Control-task training length in environment steps.
    pub total_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Simulate,
            environment: Environment::LineSearch,
            replay: ReplayKind::Er,
            beta_exp: 2.0,
            aer_k: 20,
            aer_n_old: None,
            aer_sample_count: None,
            m: None,
            alpha: None,
            gamma: None,
            memory: None,
            v: 0.01,
            x0: -5.0,
            beta1: 0.1,
            beta2: 0.5,
            d1_0: -0.1,
            d2_0: 0.5,
            horizon: 1000,
            h: 0.1,
            seed: 0,
            repetitions: 1,
            sweep_memory: (1..=20).map(|i| 50 * i).collect(),
            sweep_m: (1..=10).map(|i| 5 * i).collect(),
            stage: AnalyticStage::Beginning,
            stage_d1: 0.05,
            stage_d2: 0.01,
            hidden: None,
            activation: None,
            total_steps: 20_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::param("repetitions", "must be at least 1"));
        }
        let control = self.environment.control();
        if control.is_some() && self.mode != Mode::Simulate {
            return Err(Error::Config(format!(
                "{:?} mode needs the linesearch environment",
                self.mode
            )));
        }
        if control.is_some() && self.replay == ReplayKind::Per {
            return Err(Error::Config("control tasks support er and aer replay only".into()));
        }
        if self.mode == Mode::Ode && self.replay == ReplayKind::Aer {
            return Err(Error::Config("the ODE model covers er and per replay only".into()));
        }
        for (name, v) in [
            ("v", self.v),
            ("x0", self.x0),
            ("d1_0", self.d1_0),
            ("d2_0", self.d2_0),
            ("stage_d1", self.stage_d1),
            ("stage_d2", self.stage_d2),
        ] {
            ensure_finite(name, v)?;
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::param("h", "must be positive"));
        }
        if self.sweep_memory.contains(&0) || self.sweep_m.contains(&0) {
            return Err(Error::param("sweep", "grid values must be positive"));
        }
        PrioritizationConfig::new(self.beta_exp)?;
        match control {
            None => {
                self.line_search_config()?;
                self.ode_params(self.memory(), self.m(), self.alpha())?;
                if self.replay == ReplayKind::Aer {
                    self.aer_config(self.memory(), self.memory() / 2)?;
                }
            }
            Some(kind) => {
                self.dqn_config(kind)?;
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<TrueWeights> {
        TrueWeights::new(self.beta1, self.beta2)
    }

    pub fn m(&self) -> usize {
        self.m.unwrap_or(5)
    }

    /// Step size for single-curve runs.
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.01)
    }

    /// Step size for sweeps.
    pub fn sweep_alpha(&self) -> f64 {
        self.alpha.unwrap_or(1e-3)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(0.0)
    }

    pub fn memory(&self) -> usize {
        self.memory.unwrap_or(100)
    }

    pub fn initial_metrics(&self) -> MetricPair {
        MetricPair::new(self.d1_0, self.d2_0)
    }

    pub fn line_search_config(&self) -> Result<LineSearchConfig> {
        LineSearchConfig::new(self.weights()?, self.v, self.x0, self.gamma(), self.horizon)
    }

    pub fn ode_params(&self, memory: usize, m: usize, alpha: f64) -> Result<OdeParams> {
        let p = OdeParams {
            m,
            alpha,
            memory,
            v: self.v,
            x0: self.x0,
            gamma: self.gamma(),
            beta: self.weights()?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn analytic_params(&self) -> Result<AnalyticParams> {
        let p = AnalyticParams {
            m: self.m(),
            alpha: self.alpha(),
            memory: self.memory(),
            v: self.v,
            x0: self.x0,
            d1_0: self.d1_0,
            d2_0: self.d2_0,
        };
        p.validate()?;
        Ok(p)
    }

    fn aer_config(&self, n0: usize, default_sample: usize) -> Result<AerConfig> {
        let n_old = self.aer_n_old.unwrap_or((n0 / 2).max(1));
        let sample = self.aer_sample_count.unwrap_or(default_sample.min(n_old));
        AerConfig::new(n0, self.aer_k, n_old, sample)
    }

    /// Replay rule for a LineSearch run with the given (initial) memory size.
    pub fn replay_policy(&self, memory: usize) -> Result<ReplayPolicy> {
        Ok(match self.replay {
            ReplayKind::Er => ReplayPolicy::Er,
            ReplayKind::Per => ReplayPolicy::Per(PrioritizationConfig::new(self.beta_exp)?),
            ReplayKind::Aer => ReplayPolicy::Aer(self.aer_config(memory, memory / 2)?),
        })
    }

    pub fn line_search_run(&self) -> Result<LineSearchRun> {
        self.line_search_run_with(self.memory(), self.m(), self.alpha())
    }

    pub fn line_search_run_with(&self, memory: usize, m: usize, alpha: f64) -> Result<LineSearchRun> {
        let run = LineSearchRun {
            game: self.line_search_config()?,
            m,
            alpha,
            memory,
            replay: self.replay_policy(memory)?,
            d0: self.initial_metrics(),
        };
        run.validate()?;
        Ok(run)
    }

    /// Agent settings for a control task; explicit fields override the
    /// per-task defaults.
    pub fn dqn_config(&self, kind: EnvKind) -> Result<DqnConfig> {
        let n0 = self.memory();
        let mut cfg = DqnConfig::for_env(kind, n0, false, self.total_steps)?;
        if self.replay == ReplayKind::Aer {
            let default_sample = match DqnConfig::for_env(kind, n0, true, self.total_steps)?.buffer {
                BufferPolicy::Adaptive(a) => a.sample_count,
                BufferPolicy::Fixed { .. } => n0 / 2,
            };
            cfg.buffer = BufferPolicy::Adaptive(self.aer_config(n0, default_sample)?);
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(h) = &self.hidden {
            cfg.hidden = h.clone();
        }
        if let Some(a) = self.activation {
            cfg.activation = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seeds used for the repetitions: `seed, seed + 1, ...`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

fn worker_count() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(s) if !s.trim().is_empty() => {
            let n: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{s}`")))?;
            if n == 0 {
                return Err(Error::Config(format!("{WORKERS_ENV} must be at least 1")));
            }
            Ok(Some(n))
        }
        _ => Ok(None),
    }
}

/// Maps `f` over `items` on the worker pool, keeping input order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// One simulated LineSearch agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchRun {
    pub game: LineSearchConfig,
    pub m: usize,
    pub alpha: f64,
    /// Memory size (initial size under `aer`).
    pub memory: usize,
    pub replay: ReplayPolicy,
    pub d0: MetricPair,
}

impl LineSearchRun {
    pub fn validate(&self) -> Result<()> {
        self.game.validate()?;
        ensure_finite("alpha", self.alpha)?;
        if self.alpha <= 0.0 {
            return Err(Error::param("alpha", "must be positive"));
        }
        if self.m == 0 {
            return Err(Error::param("m", "must be at least 1"));
        }
        if self.memory == 0 {
            return Err(Error::param("memory", "must be at least 1"));
        }
        if let ReplayPolicy::Aer(a) = &self.replay {
            if a.n0 != self.memory {
                return Err(Error::Config(format!(
                    "aer initial size {} differs from memory {}",
                    a.n0, self.memory
                )));
            }
        }
        Ok(())
    }
}

/// Per-step record of one simulated run; index `t` holds the values after
/// step `t` (index 0 is the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub capacity: Vec<usize>,
    pub events: Vec<AdjustmentEvent>,
}

impl RunTrace {
    pub fn final_measure(&self) -> f64 {
        let i = self.d1.len() - 1;
        MetricPair::new(self.d1[i], self.d2[i]).measure()
    }
}

/// Runs the replay loop on LineSearch: act greedily, store the transition,
/// apply `m` sequentially sampled TD updates, then (under `aer`) the
/// memory-size check.
pub fn simulate_linesearch(run: &LineSearchRun, seed: u64) -> Result<RunTrace> {
    run.validate()?;
    let game = &run.game;
    let (beta, v, gamma) = (game.weights, game.v, game.gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = LinearTheta::from_metrics(run.d0, &beta);
    let mut buffer: ReplayBuffer<LineSearchTransition> = ReplayBuffer::new(run.memory)?;
    let mut aer = match run.replay {
        ReplayPolicy::Aer(a) => Some(AerController::new(a)?),
        _ => None,
    };
    let mut x = game.x0;
    let cap = game.horizon + 1;
    let mut trace = RunTrace {
        d1: Vec::with_capacity(cap),
        d2: Vec::with_capacity(cap),
        capacity: Vec::with_capacity(cap),
        events: Vec::new(),
    };
    trace.d1.push(run.d0.d1);
    trace.d2.push(run.d0.d2);
    trace.capacity.push(buffer.capacity());

    for t in 1..=game.horizon {
        let a = greedy_action(&theta, v);
        let tr = env_step(game, x, a)?;
        x = tr.next_state;
        buffer.push(tr);
        for _ in 0..run.m {
            let i = match &run.replay {
                ReplayPolicy::Per(p) => {
                    let th = theta;
                    buffer.sample_prioritized_index(|e| td_error(&th, e, gamma, v), p, &mut rng)?
                }
                _ => buffer.sample_uniform_index(&mut rng)?,
            };
            let e = buffer.get(i).ok_or(Error::EmptyBuffer)?;
            let delta = td_error(&theta, e, gamma, v);
            theta.theta1 += run.alpha * delta * (e.state + e.action);
            theta.theta2 += run.alpha * delta;
        }
        if let Some(c) = aer.as_mut() {
            let th = theta;
            c.maybe_adjust(t, &mut buffer, |e| td_error(&th, e, gamma, v), &mut rng)?;
        }
        let d = metrics(&theta, &beta);
        if !(d.d1.is_finite() && d.d2.is_finite()) {
            return Err(Error::NonFinite { t: t as f64 });
        }
        trace.d1.push(d.d1);
        trace.d2.push(d.d2);
        trace.capacity.push(buffer.capacity());
    }
    if let Some(c) = aer {
        trace.events = c.events;
    }
    Ok(trace)
}

/// Runs one agent per seed on the worker pool.
pub fn simulate_seeds(run: &LineSearchRun, seeds: &[u64]) -> Result<Vec<RunTrace>> {
    par_map(seeds, |&s| simulate_linesearch(run, s))
}

/// Metric trace on a time grid, optionally with the memory capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub t: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub capacity: Option<Vec<f64>>,
}

impl Trace {
    /// Seed average of simulated runs, summed in the given order.
    pub fn average(runs: &[RunTrace]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::param("runs", "nothing to average"))?;
        let len = first.d1.len();
        if runs.iter().any(|r| r.d1.len() != len) {
            return Err(Error::GridMismatch("runs have different lengths".into()));
        }
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&RunTrace, usize) -> f64| -> Vec<f64> {
            (0..len)
                .map(|i| runs.iter().map(|r| f(r, i)).sum::<f64>() / n)
                .collect()
        };
        Ok(Self {
            t: (0..len).map(|i| i as f64).collect(),
            d1: mean(&|r, i| r.d1[i]),
            d2: mean(&|r, i| r.d2[i]),
            capacity: Some(mean(&|r, i| r.capacity[i] as f64)),
        })
    }

    pub fn from_solution(sol: &OdeSolution) -> Self {
        Self {
            t: sol.times.clone(),
            d1: sol.d1.clone(),
            d2: sol.d2.clone(),
            capacity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Largest absolute deviation of each metric from `sol`, over trace
    /// times inside `[from, to]`.
    pub fn sup_deviation(&self, sol: &OdeSolution, from: f64, to: f64) -> Result<MetricPair> {
        let mut dev = MetricPair::new(0.0, 0.0);
        for (i, &t) in self.t.iter().enumerate() {
            if t < from || t > to {
                continue;
            }
            let s = sol
                .value_at(t)
                .ok_or_else(|| Error::GridMismatch(format!("t = {t} is outside the theory grid")))?;
            dev.d1 = dev.d1.max((self.d1[i] - s.d1).abs());
            dev.d2 = dev.d2.max((self.d2[i] - s.d2).abs());
        }
        Ok(dev)
    }
}

/// Seed-averaged simulated trace for a LineSearch config.
pub fn run_linesearch(cfg: &ExperimentConfig) -> Result<Trace> {
    cfg.validate()?;
    if cfg.environment != Environment::LineSearch || cfg.mode != Mode::Simulate {
        return Err(Error::Config("run needs mode = simulate and environment = linesearch".into()));
    }
    let run = cfg.line_search_run()?;
    let mut trace = Trace::average(&simulate_seeds(&run, &cfg.seeds())?)?;
    if !matches!(run.replay, ReplayPolicy::Aer(_)) {
        trace.capacity = None;
    }
    Ok(trace)
}

/// Theory curve for one parameter set. Uniform replay with `gamma = 0` and
/// `gamma > 0` and prioritized replay with `gamma = 0` use closed window
/// integrals; prioritized replay with `gamma > 0` integrates over the
/// recorded state history.
pub fn integrate_theory(
    params: &OdeParams,
    d0: MetricPair,
    t_end: f64,
    h: f64,
    rule: ReplayRule,
) -> Result<OdeSolution> {
    match rule {
        ReplayRule::Uniform => integrate_er(params, d0, t_end, h),
        ReplayRule::Prioritized if params.gamma == 0.0 => integrate_per(params, d0, t_end, h),
        ReplayRule::Prioritized => {
            integrate_memory_window(params, d0, t_end, h, ReplayRule::Prioritized, Policy::Greedy)
        }
    }
}

fn replay_rule(kind: ReplayKind) -> Result<ReplayRule> {
    match kind {
        ReplayKind::Er => Ok(ReplayRule::Uniform),
        ReplayKind::Per => Ok(ReplayRule::Prioritized),
        ReplayKind::Aer => Err(Error::Config("the ODE model covers er and per replay only".into())),
    }
}

/// Integrated theory curve for a LineSearch config.
pub fn run_ode(cfg: &ExperimentConfig) -> Result<OdeSolution> {
    cfg.validate()?;
    if cfg.environment != Environment::LineSearch {
        return Err(Error::Config("ode needs environment = linesearch".into()));
    }
    let params = cfg.ode_params(cfg.memory(), cfg.m(), cfg.alpha())?;
    integrate_theory(
        &params,
        cfg.initial_metrics(),
        cfg.horizon as f64,
        cfg.h,
        replay_rule(cfg.replay)?,
    )
}

/// Closed-form stage approximation at integer times `0..=horizon`.
pub fn run_analytic(cfg: &ExperimentConfig) -> Result<Trace> {
    cfg.validate()?;
    if cfg.environment != Environment::LineSearch {
        return Err(Error::Config("analytic needs environment = linesearch".into()));
    }
    let p = cfg.analytic_params()?;
    let stage = StageEstimate {
        d1_1: cfg.stage_d1,
        d2_1: cfg.stage_d2,
    };
    let mut out = Trace {
        t: Vec::new(),
        d1: Vec::new(),
        d2: Vec::new(),
        capacity: None,
    };
    for i in 0..=cfg.horizon {
        let t = i as f64;
        let d = match cfg.stage {
            AnalyticStage::Beginning => beginning_stage(t, &p),
            AnalyticStage::Last => last_stage(t, &p, &stage)?,
        };
        out.t.push(t);
        out.d1.push(d.d1);
        out.d2.push(d.d2);
    }
    Ok(out)
}

/// Axes of a memory-size by minibatch-size sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub memory: Vec<usize>,
    pub m: Vec<usize>,
}

impl SweepGrid {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            memory: cfg.sweep_memory.clone(),
            m: cfg.sweep_m.clone(),
        }
    }

    fn cells(&self) -> Vec<(usize, usize)> {
        self.m
            .iter()
            .flat_map(|&m| self.memory.iter().map(move |&n| (m, n)))
            .collect()
    }
}

/// Final measure `M` per `(m, N)` cell; `m_matrix[i][j]` belongs to
/// `m_values[i]` and `n_values[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub n_values: Vec<usize>,
    pub m_values: Vec<usize>,
    pub m_matrix: Vec<Vec<f64>>,
    /// Optional second matrix on the same grid (for differencing).
    pub second: Option<Vec<Vec<f64>>>,
}

impl SweepResult {
    pub fn get(&self, m: usize, n: usize) -> Option<f64> {
        let i = self.m_values.iter().position(|&x| x == m)?;
        let j = self.n_values.iter().position(|&x| x == n)?;
        Some(self.m_matrix[i][j])
    }

    pub fn row(&self, m: usize) -> Option<&[f64]> {
        let i = self.m_values.iter().position(|&x| x == m)?;
        Some(&self.m_matrix[i])
    }

    fn from_cells(grid: &SweepGrid, values: Vec<f64>) -> Self {
        let width = grid.memory.len();
        Self {
            n_values: grid.memory.clone(),
            m_values: grid.m.clone(),
            m_matrix: values.chunks(width.max(1)).map(<[f64]>::to_vec).collect(),
            second: None,
        }
    }
}

/// Measure `M = |d1| + |d2|` at `t = horizon` for every grid cell. In `ode`
/// mode the theory curve is integrated; in `simulate` mode the measure is
/// averaged over the configured seeds. The step size defaults to `1e-3`.
pub fn sweep_measure(grid: &SweepGrid, cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.environment != Environment::LineSearch || cfg.mode == Mode::Analytic {
        return Err(Error::Config("sweeps need environment = linesearch and mode = ode or simulate".into()));
    }
    let alpha = cfg.sweep_alpha();
    let cells = grid.cells();
    let values = match cfg.mode {
        Mode::Ode => {
            let rule = replay_rule(cfg.replay)?;
            par_map(&cells, |&(m, n)| {
                let p = cfg.ode_params(n, m, alpha)?;
                let sol = integrate_theory(&p, cfg.initial_metrics(), cfg.horizon as f64, cfg.h, rule)?;
                Ok(sol.last().ok_or(Error::EmptyWindow { t: 0.0 })?.measure())
            })?
        }
        _ => {
            let seeds = cfg.seeds();
            par_map(&cells, |&(m, n)| {
                let run = cfg.line_search_run_with(n, m, alpha)?;
                let ms = seeds
                    .iter()
                    .map(|&s| simulate_linesearch(&run, s).map(|r| r.final_measure()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ms.iter().sum::<f64>() / ms.len() as f64)
            })?
        }
    };
    Ok(SweepResult::from_cells(grid, values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ErBetter,
    PerBetter,
    Similar,
}

impl Verdict {
    /// Classifies `M_ER - M_pER`; positive means prioritized replay helps.
    pub fn classify(diff: f64, band: f64) -> Self {
        if diff.abs() < band {
            Verdict::Similar
        } else if diff > 0.0 {
            Verdict::PerBetter
        } else {
            Verdict::ErBetter
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::ErBetter => "er_better",
            Verdict::PerBetter => "per_better",
            Verdict::Similar => "similar",
        }
    }
}

/// Signed difference `M_ER - M_pER` per cell with its classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMap {
    pub n_values: Vec<usize>,
    pub m_values: Vec<usize>,
    pub er: Vec<Vec<f64>>,
    pub per: Vec<Vec<f64>>,
    pub diff: Vec<Vec<f64>>,
    pub verdict: Vec<Vec<Verdict>>,
}

/// Verdict counts over a region of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerdictCounts {
    pub er_better: usize,
    pub per_better: usize,
    pub similar: usize,
}

impl VerdictCounts {
    pub fn total(&self) -> usize {
        self.er_better + self.per_better + self.similar
    }
}

impl ComparisonMap {
    /// Counts verdicts over cells where `keep(N, m)` holds.
    pub fn region_counts(&self, keep: impl Fn(usize, usize) -> bool) -> VerdictCounts {
        let mut c = VerdictCounts::default();
        for (i, &m) in self.m_values.iter().enumerate() {
            for (j, &n) in self.n_values.iter().enumerate() {
                if !keep(n, m) {
                    continue;
                }
                match self.verdict[i][j] {
                    Verdict::ErBetter => c.er_better += 1,
                    Verdict::PerBetter => c.per_better += 1,
                    Verdict::Similar => c.similar += 1,
                }
            }
        }
        c
    }
}

/// Differences two sweeps taken on the same grid.
pub fn difference_map(er: &SweepResult, per: &SweepResult, band: f64) -> Result<ComparisonMap> {
    if er.n_values != per.n_values || er.m_values != per.m_values {
        return Err(Error::GridMismatch(format!(
            "N axes {:?} vs {:?}, m axes {:?} vs {:?}",
            er.n_values, per.n_values, er.m_values, per.m_values
        )));
    }
    let diff: Vec<Vec<f64>> = er
        .m_matrix
        .iter()
        .zip(&per.m_matrix)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let verdict = diff
        .iter()
        .map(|row| row.iter().map(|&d| Verdict::classify(d, band)).collect())
        .collect();
    Ok(ComparisonMap {
        n_values: er.n_values.clone(),
        m_values: er.m_values.clone(),
        er: er.m_matrix.clone(),
        per: per.m_matrix.clone(),
        diff,
        verdict,
    })
}

/// Runs the ER and pER sweeps for `cfg` and differences them.
pub fn compare_per(grid: &SweepGrid, cfg: &ExperimentConfig) -> Result<ComparisonMap> {
    let er = sweep_measure(grid, &ExperimentConfig { replay: ReplayKind::Er, ..cfg.clone() })?;
    let per = sweep_measure(grid, &ExperimentConfig { replay: ReplayKind::Per, ..cfg.clone() })?;
    difference_map(&er, &per, SIMILARITY_BAND)
}

/// Adaptive-memory LineSearch runs, one per seed, each with its capacity
/// trace and adjustment log.
pub fn run_aer(cfg: &ExperimentConfig) -> Result<Vec<RunTrace>> {
    let cfg = ExperimentConfig {
        replay: ReplayKind::Aer,
        ..cfg.clone()
    };
    cfg.validate()?;
    if cfg.environment != Environment::LineSearch {
        return Err(Error::Config("run_aer on control tasks goes through run_dqn".into()));
    }
    simulate_seeds(&cfg.line_search_run()?, &cfg.seeds())
}

/// Final measure of a fixed-memory run and an adaptive run from the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AerOutcome {
    pub seed: u64,
    pub fixed_measure: f64,
    pub aer_measure: f64,
    pub final_capacity: usize,
}

impl AerOutcome {
    pub fn aer_wins(&self) -> bool {
        self.aer_measure < self.fixed_measure
    }
}

/// Fixed memory `N` against adaptive memory starting from `N`, seed by seed.
pub fn aer_vs_fixed(cfg: &ExperimentConfig) -> Result<Vec<AerOutcome>> {
    let fixed = ExperimentConfig {
        replay: ReplayKind::Er,
        ..cfg.clone()
    }
    .line_search_run()?;
    let adaptive = ExperimentConfig {
        replay: ReplayKind::Aer,
        ..cfg.clone()
    }
    .line_search_run()?;
    par_map(&cfg.seeds(), |&seed| {
        let f = simulate_linesearch(&fixed, seed)?;
        let a = simulate_linesearch(&adaptive, seed)?;
        Ok(AerOutcome {
            seed,
            fixed_measure: f.final_measure(),
            aer_measure: a.final_measure(),
            final_capacity: *a.capacity.last().unwrap_or(&0),
        })
    })
}

/// Episode log and adjustment log of one control-task run.
#[derive(Debug, Clone, PartialEq)]
pub struct DqnRun {
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub events: Vec<AdjustmentEvent>,
}

/// Trains one agent per seed on a control task.
pub fn run_dqn(cfg: &ExperimentConfig) -> Result<Vec<DqnRun>> {
    cfg.validate()?;
    let kind = cfg
        .environment
        .control()
        .ok_or_else(|| Error::Config("dqn needs a control environment".into()))?;
    let dqn = cfg.dqn_config(kind)?;
    par_map(&cfg.seeds(), |&seed| {
        let mut tr = DqnTrainer::new(kind, dqn.clone(), seed)?;
        tr.run_until(dqn.total_steps)?;
        Ok(DqnRun {
            seed,
            episodes: tr.episodes().to_vec(),
            events: tr.adjustments().to_vec(),
        })
    })
}

/// Fixed and adaptive continuations of one shared warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct ForkOutcome {
    pub seed: u64,
    /// Last step shared by both branches.
    pub fork_step: usize,
    /// Mean return of episodes ending after the fork.
    pub fixed_mean_return: f64,
    pub aer_mean_return: f64,
    pub fixed_episodes: usize,
    pub aer_episodes: usize,
    pub final_capacity: usize,
    pub events: Vec<AdjustmentEvent>,
}

impl ForkOutcome {
    pub fn aer_wins(&self) -> bool {
        self.aer_mean_return >= self.fixed_mean_return
    }
}

fn mean_return_after(episodes: &[EpisodeRecord], step: usize) -> Result<(f64, usize)> {
    let after: Vec<f64> = episodes
        .iter()
        .filter(|e| e.end_step > step)
        .map(|e| e.ret)
        .collect();
    if after.is_empty() {
        return Err(Error::Config(format!("no episode finished after step {step}")));
    }
    Ok((after.iter().sum::<f64>() / after.len() as f64, after.len()))
}

/// Trains with fixed memory `aer.n0` up to the last step before any memory
/// adjustment could fire, clones the agent, and continues one copy with fixed
/// memory and the other with adaptive memory until `fixed.total_steps`.
pub fn fork_compare(kind: EnvKind, fixed: &DqnConfig, aer: AerConfig, seed: u64) -> Result<ForkOutcome> {
    aer.validate()?;
    if fixed.buffer != (BufferPolicy::Fixed { capacity: aer.n0 }) {
        return Err(Error::Config(format!(
            "baseline memory must be fixed at the adaptive initial size {}",
            aer.n0
        )));
    }
    let fork_step = (aer.n0 - 1).min(fixed.total_steps);
    let mut base = DqnTrainer::new(kind, fixed.clone(), seed)?;
    base.run_until(fork_step)?;
    let mut adaptive = base.clone();
    adaptive.set_buffer_policy(BufferPolicy::Adaptive(aer))?;
    base.run_until(fixed.total_steps)?;
    adaptive.run_until(fixed.total_steps)?;
    let (f_mean, f_n) = mean_return_after(base.episodes(), fork_step)?;
    let (a_mean, a_n) = mean_return_after(adaptive.episodes(), fork_step)?;
    Ok(ForkOutcome {
        seed,
        fork_step,
        fixed_mean_return: f_mean,
        aer_mean_return: a_mean,
        fixed_episodes: f_n,
        aer_episodes: a_n,
        final_capacity: adaptive.capacity(),
        events: adaptive.adjustments().to_vec(),
    })
}

/// [`fork_compare`] for each seed on the worker pool.
pub fn fork_compare_seeds(
    kind: EnvKind,
    fixed: &DqnConfig,
    aer: AerConfig,
    seeds: &[u64],
) -> Result<Vec<ForkOutcome>> {
    par_map(seeds, |&s| fork_compare(kind, fixed, aer, s))
}

/// Output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown format `{other}` (csv or json)"))),
        }
    }
}

/// One table cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => format_float(*x),
            Cell::Text(s) => s.clone(),
        }
    }

    fn render_json(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) if x.is_finite() => format_float(*x),
            Cell::Float(_) => "null".into(),
            Cell::Text(s) => json_string(s),
        }
    }
}

/// 17 significant digits in scientific notation; parses back to the same bits.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_else(|_| "\"\"".into())
}

/// Column-named rows; the common shape behind every emitted result.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.columns)?;
        for row in &self.rows {
            wr.write_record(row.iter().map(Cell::render))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Array of objects keyed by column name.
    pub fn write_json<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "[")?;
        for (i, row) in self.rows.iter().enumerate() {
            let fields: Vec<String> = self
                .columns
                .iter()
                .zip(row)
                .map(|(c, v)| format!("{}:{}", json_string(c), v.render_json()))
                .collect();
            let sep = if i + 1 == self.rows.len() { "" } else { "," };
            writeln!(w, "  {{{}}}{sep}", fields.join(","))?;
        }
        writeln!(w, "]")?;
        w.flush()
    }
}

/// Anything that can be written as a table.
pub trait ToTable {
    fn to_table(&self) -> Table;
}

fn capacity_cell(x: f64) -> Cell {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        Cell::Int(x as i64)
    } else {
        Cell::Float(x)
    }
}

impl ToTable for Trace {
    fn to_table(&self) -> Table {
        let mut t = Table::new(if self.capacity.is_some() {
            &["t", "d1", "d2", "N"]
        } else {
            &["t", "d1", "d2"]
        });
        for i in 0..self.len() {
            let mut row = vec![Cell::Float(self.t[i]), Cell::Float(self.d1[i]), Cell::Float(self.d2[i])];
            if let Some(c) = &self.capacity {
                row.push(capacity_cell(c[i]));
            }
            t.rows.push(row);
        }
        t
    }
}

impl ToTable for OdeSolution {
    fn to_table(&self) -> Table {
        Trace::from_solution(self).to_table()
    }
}

impl ToTable for SweepResult {
    fn to_table(&self) -> Table {
        let mut t = Table::new(if self.second.is_some() {
            &["N", "m", "M", "M2"]
        } else {
            &["N", "m", "M"]
        });
        for (i, &m) in self.m_values.iter().enumerate() {
            for (j, &n) in self.n_values.iter().enumerate() {
                let mut row = vec![Cell::Int(n as i64), Cell::Int(m as i64), Cell::Float(self.m_matrix[i][j])];
                if let Some(s) = &self.second {
                    row.push(Cell::Float(s[i][j]));
                }
                t.rows.push(row);
            }
        }
        t
    }
}

impl ToTable for ComparisonMap {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["N", "m", "M_er", "M_per", "diff", "verdict"]);
        for (i, &m) in self.m_values.iter().enumerate() {
            for (j, &n) in self.n_values.iter().enumerate() {
                t.rows.push(vec![
                    Cell::Int(n as i64),
                    Cell::Int(m as i64),
                    Cell::Float(self.er[i][j]),
                    Cell::Float(self.per[i][j]),
                    Cell::Float(self.diff[i][j]),
                    Cell::Text(self.verdict[i][j].as_str().into()),
                ]);
            }
        }
        t
    }
}

impl ToTable for [DqnRun] {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["seed", "episode", "end_step", "return", "capacity"]);
        for run in self {
            for e in &run.episodes {
                t.rows.push(vec![
                    Cell::Int(run.seed as i64),
                    Cell::Int(e.episode as i64),
                    Cell::Int(e.end_step as i64),
                    Cell::Float(e.ret),
                    Cell::Int(e.capacity as i64),
                ]);
            }
        }
        t
    }
}

impl ToTable for [AdjustmentEvent] {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["step", "direction", "N", "delta_old"]);
        for e in self {
            t.rows.push(vec![
                Cell::Int(e.step as i64),
                Cell::Text(
                    match e.direction {
                        Direction::Enlarge => "enlarge",
                        Direction::Shrink => "shrink",
                    }
                    .into(),
                ),
                Cell::Int(e.capacity as i64),
                Cell::Float(e.delta_old_new),
            ]);
        }
        t
    }
}

impl ToTable for [AerOutcome] {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&["seed", "M_fixed", "M_aer", "final_N"]);
        for o in self {
            t.rows.push(vec![
                Cell::Int(o.seed as i64),
                Cell::Float(o.fixed_measure),
                Cell::Float(o.aer_measure),
                Cell::Int(o.final_capacity as i64),
            ]);
        }
        t
    }
}

impl ToTable for [ForkOutcome] {
    fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "seed",
            "fork_step",
            "fixed_mean_return",
            "aer_mean_return",
            "fixed_episodes",
            "aer_episodes",
            "final_N",
        ]);
        for o in self {
            t.rows.push(vec![
                Cell::Int(o.seed as i64),
                Cell::Int(o.fork_step as i64),
                Cell::Float(o.fixed_mean_return),
                Cell::Float(o.aer_mean_return),
                Cell::Int(o.fixed_episodes as i64),
                Cell::Int(o.aer_episodes as i64),
                Cell::Int(o.final_capacity as i64),
            ]);
        }
        t
    }
}

/// Writes `result` to `path`, or to stdout when `path` is `None`.
pub fn emit<T: ToTable + ?Sized>(result: &T, path: Option<&Path>, format: Format) -> Result<()> {
    let table = result.to_table();
    let label = path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf);
    let io_err = |source| Error::Io {
        path: label.clone(),
        source,
    };
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err)?)),
        None => Box::new(io::stdout().lock()),
    };
    match format {
        Format::Csv => table.write_csv(sink).map_err(|source| Error::Csv {
            path: label.clone(),
            source,
        }),
        Format::Json => table.write_json(sink).map_err(io_err),
    }
}

/// Reads a CSV file written by [`emit`] back into header and string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let rows = rd
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(csv_err)?;
    Ok((header, rows))
}
