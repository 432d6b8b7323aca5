//! Deep Q-learning: replay buffer, periodically synced target network,
//! linearly decayed epsilon-greedy exploration.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::networks::QNetwork;
use crate::error::{Error, Result};
use crate::fusion::EncodedObservation;
use crate::nncore::{huber, mse, AdamConfig, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QLoss {
    Huber,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Environment steps between target-network syncs.
    pub target_sync_interval: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the total step budget over which epsilon decays.
    pub epsilon_decay_fraction: f64,
    /// No updates until the buffer holds this many transitions.
    pub warmup_steps: usize,
    pub loss: QLoss,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            gamma: 0.99,
            lr: 1e-3,
            batch_size: 32,
            buffer_capacity: 10_000,
            target_sync_interval: 250,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            warmup_steps: 200,
            loss: QLoss::Huber,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("dqn: {m}")));
        if !(0.0..1.0).contains(&self.gamma) {
            return err("gamma must lie in [0, 1)");
        }
        if !(self.lr > 0.0) {
            return err("lr must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return err("need 0 < batch_size <= buffer_capacity");
        }
        if self.target_sync_interval == 0 {
            return err("target_sync_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_end)
            || !(0.0..=1.0).contains(&self.epsilon_start)
            || self.epsilon_end > self.epsilon_start
        {
            return err("need 0 <= epsilon_end <= epsilon_start <= 1");
        }
        if !(self.epsilon_decay_fraction > 0.0 && self.epsilon_decay_fraction <= 1.0) {
            return err("epsilon_decay_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// One experience. `next_state == None` marks a terminal transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: EncodedObservation,
    pub action: usize,
    pub reward: f64,
    pub next_state: Option<EncodedObservation>,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.next_state.is_none()
    }
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, batch: usize, rng: &mut R) -> Vec<&'a Transition> {
        (0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// Linear decay from `epsilon_start` to `epsilon_end` over the first
/// `epsilon_decay_fraction * total_steps` steps, constant afterwards.
pub fn epsilon_at(config: &DqnConfig, global_step: u64, total_steps: u64) -> f64 {
    let span = (config.epsilon_decay_fraction * total_steps.max(1) as f64).max(1.0);
    let progress = (global_step as f64 / span).min(1.0);
    config.epsilon_start + progress * (config.epsilon_end - config.epsilon_start)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy over precomputed Q-values. Always draws one uniform for the
/// explore decision and, when exploring, one action index.
pub fn dqn_act<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

/// Bootstrapped regression targets: `r` for terminal transitions, otherwise
/// `r + gamma * max_a Q_target(s', a)`.
pub fn dqn_targets(
    net: &QNetwork,
    target: &ParameterSet,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>> {
    let next: Vec<&EncodedObservation> = batch.iter().filter_map(|t| t.next_state.as_ref()).collect();
    let next_q = if next.is_empty() || gamma == 0.0 {
        None
    } else {
        Some(net.forward(target, &next)?.0)
    };
    let k = net.action_count();
    let mut row = 0;
    Ok(batch
        .iter()
        .map(|t| match (&t.next_state, &next_q) {
            (Some(_), Some(q)) => {
                let best = q.data()[row * k..(row + 1) * k]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                row += 1;
                t.reward + gamma * best
            }
            _ => t.reward,
        })
        .collect())
}

/// One gradient step on a uniformly sampled minibatch. `step` is the Adam
/// step count (>= 1). Target parameters are not modified.
pub fn dqn_update<R: Rng + ?Sized>(
    net: &QNetwork,
    online: &mut ParameterSet,
    target: &ParameterSet,
    buffer: &ReplayBuffer,
    config: &DqnConfig,
    step: u64,
    rng: &mut R,
) -> Result<f64> {
    let needed = config.batch_size.max(config.warmup_steps);
    if buffer.len() < needed {
        return Err(Error::InvalidInput(format!(
            "replay buffer holds {} transitions, need {needed}",
            buffer.len()
        )));
    }
    let batch = buffer.sample(config.batch_size, rng);
    let targets = dqn_targets(net, target, &batch, config.gamma)?;
    let states: Vec<&EncodedObservation> = batch.iter().map(|t| &t.state).collect();
    let (q, cache) = net.forward(online, &states)?;
    let k = net.action_count();
    let chosen: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, t)| q.data()[i * k + t.action])
        .collect();
    let pred = Tensor::row(chosen);
    let target_t = Tensor::row(targets);
    let out = match config.loss {
        QLoss::Huber => huber(&pred, &target_t, 1.0)?,
        QLoss::Mse => mse(&pred, &target_t)?,
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!("dqn loss {} at update {step}", out.loss)));
    }
    let mut grad_q = Tensor::zeros(q.shape().to_vec());
    for (i, t) in batch.iter().enumerate() {
        grad_q.data_mut()[i * k + t.action] = out.grad.data()[i];
    }
    online.zero_grad();
    net.backward(online, &cache, &grad_q)?;
    if !online.grads_finite() {
        return Err(Error::NonFinite(format!("dqn gradient at update {step}")));
    }
    online.adam_update(&config.adam(), step);
    Ok(out.loss)
}

/// Copies online parameters into the target network.
pub fn target_sync(online: &ParameterSet, target: &mut ParameterSet) -> Result<()> {
    target.copy_values_from(online)
}
