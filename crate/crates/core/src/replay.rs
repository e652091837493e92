//! Bounded FIFO replay memory with uniform and prioritized sampling, and the
//! adaptive memory-size (aER) controller.
//!
//! Entries carry a global insertion index so that "the k oldest" is always
//! well defined even after the capacity changes.

use std::collections::VecDeque;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    entries: VecDeque<(u64, T)>,
    next_index: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("capacity", "must be at least 1"));
        }
        Ok(Self {
            capacity,
            // Large buffers grow on demand rather than reserving up front.
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            next_index: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// Appends `t`, evicting the oldest entry first when at capacity.
    /// Returns the evicted entry, if any.
    pub fn push(&mut self, t: T) -> Option<T> {
        let evicted = if self.entries.len() >= self.capacity {
            self.entries.pop_front().map(|(_, e)| e)
        } else {
            None
        };
        self.entries.push_back((self.next_index, t));
        self.next_index += 1;
        evicted
    }

    /// Changes the capacity; shrinking below the current size drops the
    /// oldest entries.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<()> {
        if capacity == 0 {
            return Err(Error::param("capacity", "must be at least 1"));
        }
        self.capacity = capacity;
        while self.entries.len() > capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Removes and returns up to `k` oldest entries, oldest first.
    pub fn evict_oldest(&mut self, k: usize) -> Vec<T> {
        let k = k.min(self.entries.len());
        self.entries.drain(..k).map(|(_, e)| e).collect()
    }

    /// Entry at position `i`, counted from the oldest.
    pub fn get(&self, i: usize) -> Option<&T> {
        self.entries.get(i).map(|(_, e)| e)
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &T> + '_ {
        self.entries.iter().map(|(_, e)| e)
    }

    /// Global insertion indices, oldest first.
    pub fn insertion_indices(&self) -> impl ExactSizeIterator<Item = u64> + '_ {
        self.entries.iter().map(|(i, _)| *i)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Position of a uniformly drawn entry.
    pub fn sample_uniform_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok(rng.gen_range(0..self.entries.len()))
    }

    /// One entry drawn uniformly; repeated calls sample with replacement.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&T> {
        let i = self.sample_uniform_index(rng)?;
        Ok(&self.entries[i].1)
    }

    /// Sampling probabilities `|delta_i|^beta / sum_j |delta_j|^beta`, with
    /// TD errors recomputed now. All-zero errors give the uniform distribution.
    pub fn priority_probabilities<F>(&self, td: F, cfg: &PrioritizationConfig) -> Result<Vec<f64>>
    where
        F: FnMut(&T) -> f64,
    {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let w = self.priority_weights(td, cfg)?;
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / total).collect())
    }

    /// Position of an entry drawn with probability proportional to `|delta|^beta`.
    pub fn sample_prioritized_index<F, R>(
        &self,
        td: F,
        cfg: &PrioritizationConfig,
        rng: &mut R,
    ) -> Result<usize>
    where
        F: FnMut(&T) -> f64,
        R: Rng + ?Sized,
    {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let w = self.priority_weights(td, cfg)?;
        let dist = WeightedIndex::new(&w)
            .map_err(|e| Error::param("td_error", format!("bad priority weights: {e}")))?;
        Ok(dist.sample(rng))
    }

    pub fn sample_prioritized<F, R>(&self, td: F, cfg: &PrioritizationConfig, rng: &mut R) -> Result<&T>
    where
        F: FnMut(&T) -> f64,
        R: Rng + ?Sized,
    {
        let i = self.sample_prioritized_index(td, cfg, rng)?;
        Ok(&self.entries[i].1)
    }

    /// Unnormalized weights. Magnitudes are divided by the largest one before
    /// exponentiation, so huge TD errors do not overflow and a common rescale
    /// of all errors leaves the weights unchanged.
    fn priority_weights<F>(&self, mut td: F, cfg: &PrioritizationConfig) -> Result<Vec<f64>>
    where
        F: FnMut(&T) -> f64,
    {
        let mags: Vec<f64> = self.entries.iter().map(|(_, e)| td(e).abs()).collect();
        let max = mags.iter().copied().fold(0.0f64, f64::max);
        if mags.iter().any(|m| !m.is_finite()) {
            return Err(Error::param("td_error", "non-finite TD error in buffer"));
        }
        if max == 0.0 {
            return Ok(vec![1.0; mags.len()]);
        }
        let w: Vec<f64> = mags.iter().map(|m| (m / max).powf(cfg.beta_exp)).collect();
        if w.iter().sum::<f64>() > 0.0 {
            Ok(w)
        } else {
            Ok(vec![1.0; mags.len()])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrioritizationConfig {
    /// Exponent on `|delta|`; 0 is uniform sampling.
    pub beta_exp: f64,
}

impl PrioritizationConfig {
    pub fn new(beta_exp: f64) -> Result<Self> {
        ensure_finite("beta_exp", beta_exp)?;
        if beta_exp < 0.0 {
            return Err(Error::param("beta_exp", format!("must be >= 0, got {beta_exp}")));
        }
        Ok(Self { beta_exp })
    }
}

impl Default for PrioritizationConfig {
    fn default() -> Self {
        Self { beta_exp: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AerConfig {
    /// Initial capacity.
    pub n0: usize,
    /// Adjustment interval in steps, and the capacity step.
    pub k: usize,
    /// Number of oldest entries examined.
    pub n_old: usize,
    /// How many of the `n_old` oldest are sampled for the TD sum.
    pub sample_count: usize,
}

impl AerConfig {
    pub fn new(n0: usize, k: usize, n_old: usize, sample_count: usize) -> Result<Self> {
        let cfg = Self {
            n0,
            k,
            n_old,
            sample_count,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n0 < self.k {
            return Err(Error::param("k", format!("need n0 >= k >= 1, got n0 = {}, k = {}", self.n0, self.k)));
        }
        if self.sample_count == 0 || self.sample_count > self.n_old || self.n_old > self.n0 {
            return Err(Error::param(
                "n_old",
                format!(
                    "need 1 <= sample_count <= n_old <= n0, got {} <= {} <= {}",
                    self.sample_count, self.n_old, self.n0
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AerState {
    /// Reference sum of `|delta|` over the oldest window.
    pub delta_old: f64,
    pub capacity: usize,
}

impl AerState {
    pub fn new(cfg: &AerConfig) -> Self {
        Self {
            delta_old: 0.0,
            capacity: cfg.n0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Enlarge,
    Shrink,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentEvent {
    pub step: usize,
    pub direction: Direction,
    /// Capacity after the adjustment.
    pub capacity: usize,
    /// The fresh estimate that triggered the decision.
    pub delta_old_new: f64,
}

/// Sum of `|delta|` over `sample_count` entries drawn without replacement
/// from the `n_old` oldest. With `sample_count == n_old` this is the exact sum
/// and consumes no randomness.
///
/// After shrinks the buffer may hold fewer than `n_old` entries; the window
/// and sample are then clipped to the buffer size.
pub fn old_td_magnitude<T, F, R>(
    buffer: &ReplayBuffer<T>,
    mut td: F,
    cfg: &AerConfig,
    rng: &mut R,
) -> Result<f64>
where
    F: FnMut(&T) -> f64,
    R: Rng + ?Sized,
{
    if !buffer.is_full() {
        return Err(Error::BufferNotFull {
            len: buffer.len(),
            capacity: buffer.capacity(),
        });
    }
    let window = cfg.n_old.min(buffer.len());
    let count = cfg.sample_count.min(window);
    if count == window {
        return Ok((0..window).map(|i| td(&buffer.entries[i].1).abs()).sum());
    }
    Ok(rand::seq::index::sample(rng, window, count)
        .into_iter()
        .map(|i| td(&buffer.entries[i].1).abs())
        .sum())
}

/// Enlarge-or-shrink decision. Enlarges when the fresh estimate exceeds the
/// stored one or the capacity is already down to `k`; otherwise drops the `k`
/// oldest entries and re-measures the stored reference on the new oldest window.
pub fn aer_adjust<T, F, R>(
    state: &mut AerState,
    buffer: &mut ReplayBuffer<T>,
    delta_old_new: f64,
    mut td: F,
    cfg: &AerConfig,
    rng: &mut R,
) -> Result<Direction>
where
    F: FnMut(&T) -> f64,
    R: Rng + ?Sized,
{
    if delta_old_new > state.delta_old || state.capacity == cfg.k {
        state.capacity += cfg.k;
        buffer.set_capacity(state.capacity)?;
        state.delta_old = delta_old_new;
        Ok(Direction::Enlarge)
    } else {
        state.capacity -= cfg.k;
        buffer.evict_oldest(cfg.k);
        buffer.set_capacity(state.capacity)?;
        state.delta_old = old_td_magnitude(buffer, &mut td, cfg, rng)?;
        Ok(Direction::Shrink)
    }
}

/// Drives the aER schedule: fires at steps that are multiples of `k` while
/// the buffer is full, and keeps a log of adjustments.
#[derive(Debug, Clone)]
pub struct AerController {
    pub cfg: AerConfig,
    pub state: AerState,
    pub events: Vec<AdjustmentEvent>,
}

impl AerController {
    pub fn new(cfg: AerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            state: AerState::new(&cfg),
            cfg,
            events: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.state.capacity
    }

    /// Call once per step `t` (1-based), after that step's TD updates.
    pub fn maybe_adjust<T, F, R>(
        &mut self,
        t: usize,
        buffer: &mut ReplayBuffer<T>,
        mut td: F,
        rng: &mut R,
    ) -> Result<Option<AdjustmentEvent>>
    where
        F: FnMut(&T) -> f64,
        R: Rng + ?Sized,
    {
        if t % self.cfg.k != 0 || !buffer.is_full() {
            return Ok(None);
        }
        let fresh = old_td_magnitude(buffer, &mut td, &self.cfg, rng)?;
        let direction = aer_adjust(&mut self.state, buffer, fresh, &mut td, &self.cfg, rng)?;
        let event = AdjustmentEvent {
            step: t,
            direction,
            capacity: self.state.capacity,
            delta_old_new: fresh,
        };
        self.events.push(event);
        Ok(Some(event))
    }
}
