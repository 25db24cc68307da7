//! Gaussian rewards computed from cohort loss traces, and the per-client
//! running-average weights that estimate each client's expected reward.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClientId, Scalar};

/// Losses a client observed at each of its `S` local iterations in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace<T> {
    pub client: ClientId,
    pub values: Vec<T>,
}

impl<T: Scalar> LossTrace<T> {
    pub fn new(client: ClientId, values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("loss trace must hold at least one iteration"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::domain(format!("loss trace of client {client} holds {v}; losses must be finite and non-negative")));
        }
        Ok(Self { client, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-iteration mean and unbiased standard deviation of a cohort's losses.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLossStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub cohort_size: usize,
}

pub fn compute_round_stats<T: Scalar>(traces: &[LossTrace<T>]) -> Result<RoundLossStats<T>> {
    if traces.len() < 2 {
        return Err(Error::CohortTooSmall { got: traces.len(), need: 2 });
    }
    let len = traces[0].len();
    if let Some(t) = traces.iter().find(|t| t.len() != len) {
        return Err(Error::shape(format!("loss trace of client {} has {} iterations, expected {len}", t.client, t.len())));
    }
    let n = T::of_usize(traces.len());
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for s in 0..len {
        let first = traces[0].values[s];
        // Coincident losses: pin the mean to the shared value so that each
        // client sits exactly on it, not one rounding step away.
        if traces.iter().all(|t| t.values[s] == first) {
            mean.push(first);
            std.push(T::zero());
            continue;
        }
        let m = traces.iter().map(|t| t.values[s]).sum::<T>() / n;
        let ss: T = traces
            .iter()
            .map(|t| {
                let d = t.values[s] - m;
                d * d
            })
            .sum();
        mean.push(m);
        std.push((ss / (n - T::one())).sqrt());
    }
    Ok(RoundLossStats { mean, std, cohort_size: traces.len() })
}

/// Gaussian-kernel reward of each iteration's loss against the cohort mean.
///
/// A zero cohort spread is the `σ → 0` limit of the kernel: reward 1 on the
/// mean and 0 off it.
pub fn gaussian_rewards<T: Scalar>(trace: &LossTrace<T>, stats: &RoundLossStats<T>) -> Result<Vec<T>> {
    if trace.len() != stats.mean.len() || stats.mean.len() != stats.std.len() {
        return Err(Error::shape(format!("trace has {} iterations but cohort statistics have {}", trace.len(), stats.mean.len())));
    }
    let two = T::of(2.0);
    Ok(trace
        .values
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(&l, (&m, &sd))| {
            if sd == T::zero() {
                if l == m {
                    T::one()
                } else {
                    T::zero()
                }
            } else {
                let d = l - m;
                (-(d * d) / (two * sd * sd)).exp()
            }
        })
        .collect())
}

/// Mean reward over the local iterations of one round (`ω`).
pub fn average_reward<T: Scalar>(rewards: &[T]) -> Result<T> {
    if rewards.is_empty() {
        return Err(Error::shape("cannot average an empty reward sequence"));
    }
    Ok(rewards.iter().copied().sum::<T>() / T::of_usize(rewards.len()))
}

/// Step-size sequence used by the running-average estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// Constant step `α ∈ (0, 1)`.
    Constant(f64),
    /// `α_t = 1/(t+1)` for the `t`-th update (1-based) of a client: square
    /// summable but not summable.
    Harmonic,
}

impl StepSchedule {
    /// Step for the next update of an estimator already updated `updates` times.
    pub fn step(&self, updates: u64) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::Harmonic => 1.0 / (updates as f64 + 2.0),
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("step size {alpha} must lie in (0, 1)")))
    }
}

/// Running estimates `γ_k` of each client's expected reward.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianWeightState<T> {
    pub gamma: BTreeMap<ClientId, T>,
    pub sample_count: BTreeMap<ClientId, u64>,
}

impl<T: Scalar> GaussianWeightState<T> {
    pub fn new(clients: impl IntoIterator<Item = ClientId>) -> Self {
        let mut state = Self { gamma: BTreeMap::new(), sample_count: BTreeMap::new() };
        for c in clients {
            state.gamma.insert(c, T::zero());
            state.sample_count.insert(c, 0);
        }
        state
    }

    /// Current weight of a client; zero for clients never sampled.
    pub fn weight(&self, client: ClientId) -> T {
        self.gamma.get(&client).copied().unwrap_or_else(T::zero)
    }

    pub fn samples(&self, client: ClientId) -> u64 {
        self.sample_count.get(&client).copied().unwrap_or(0)
    }

    /// `γ ← (1−α)γ + αω`, evaluated as `γ + α(ω − γ)` so fixed points are exact.
    pub fn update_weight(&mut self, client: ClientId, omega: T, alpha: T) -> Result<()> {
        check_alpha(alpha.to_f64_lossy())?;
        if !omega.is_finite() {
            return Err(Error::domain(format!("reward {omega} of client {client} is not finite")));
        }
        let g = self.gamma.entry(client).or_insert_with(T::zero);
        *g += alpha * (omega - *g);
        *self.sample_count.entry(client).or_insert(0) += 1;
        Ok(())
    }

    /// Update following a step schedule, using the client's own update count as `t`.
    pub fn update_scheduled(&mut self, client: ClientId, omega: T, schedule: StepSchedule) -> Result<()> {
        let alpha = T::of(schedule.step(self.samples(client)));
        self.update_weight(client, omega, alpha)
    }

    /// Restrict the state to a subset of clients.
    pub fn retain(&self, members: &[ClientId]) -> Self {
        let mut out = Self::default();
        for &c in members {
            out.gamma.insert(c, self.weight(c));
            out.sample_count.insert(c, self.samples(c));
        }
        out
    }
}
