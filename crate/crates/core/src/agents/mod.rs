//! DQN and PPO agents over fused observations, plus the episode loops that
//! drive them through a [`TrajectoryEnv`].

mod dqn;
mod networks;
mod ppo;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dqn::{
    argmax, dqn_act, dqn_targets, dqn_update, epsilon_at, target_sync, DqnConfig, QLoss, ReplayBuffer, Transition,
};
pub use networks::{PolicyValueCache, PolicyValueNet, QCache, QNetwork, HEAD_HIDDEN};
pub use ppo::{
    compute_gae, normalize_advantages, ppo_loss, ppo_update, sample_categorical, PpoConfig, PpoLossTerms,
    RolloutBatch,
};

use crate::env::{episode_stats, EpisodeStats, Observation, StepOutcome, TrajectoryEnv};
use crate::error::{Error, Result};
use crate::fusion::{CaptionEncoder, EncodedObservation, EncoderConfig, VisualShape, Vocabulary};
use crate::nncore::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Dqn,
    Ppo,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::Ppo => "ppo",
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(AgentKind::Dqn),
            "ppo" => Ok(AgentKind::Ppo),
            other => Err(Error::Config(format!("unknown agent {other:?} (expected dqn or ppo)"))),
        }
    }
}

/// What both agents need to build their networks.
#[derive(Debug, Clone)]
pub struct AgentSetup {
    pub encoder: EncoderConfig,
    pub visual_shape: VisualShape,
    pub vocab: Arc<Vocabulary>,
    pub action_count: usize,
}

impl AgentSetup {
    pub fn caption_encoder(&self) -> CaptionEncoder {
        CaptionEncoder::new(self.vocab.clone(), self.encoder.max_caption_len)
    }
}

/// One row of the per-update training log. `aux` is epsilon for DQN and
/// policy entropy for PPO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub aux: f64,
}

pub fn encode_observation(obs: &Observation, captions: &mut CaptionEncoder) -> EncodedObservation {
    EncodedObservation {
        visual: obs.visual.clone(),
        caption_ids: captions.encode(&obs.caption),
    }
}

/// Something that can act without exploration.
pub trait GreedyPolicy {
    fn greedy_action(&self, obs: &EncodedObservation) -> Result<usize>;
    fn parameters(&self) -> &ParameterSet;
}

pub struct DqnAgent {
    pub net: QNetwork,
    pub online: ParameterSet,
    pub target: ParameterSet,
    pub buffer: ReplayBuffer,
    pub config: DqnConfig,
    global_step: u64,
    updates: u64,
}

impl DqnAgent {
    pub fn new<R: Rng + ?Sized>(setup: &AgentSetup, config: DqnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut online = ParameterSet::new();
        let net = QNetwork::new(
            &mut online,
            &setup.encoder,
            setup.visual_shape,
            setup.vocab.len(),
            setup.action_count,
            rng,
        )?;
        let target = online.clone();
        Ok(DqnAgent {
            net,
            online,
            target,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            config,
            global_step: 0,
            updates: 0,
        })
    }

    /// Plays `episodes` training episodes, learning after every step once the
    /// buffer is warm. Epsilon decays over this call's expected step count.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        env: &mut TrajectoryEnv,
        captions: &mut CaptionEncoder,
        episodes: usize,
        rng: &mut R,
        log: &mut Vec<TrainLogRow>,
    ) -> Result<Vec<EpisodeStats>> {
        let total_steps = ((episodes as f64 * env.mean_episode_len()).round() as u64).max(1);
        let start = self.global_step;
        let threshold = env.config().completion_threshold;
        let warm = self.config.batch_size.max(self.config.warmup_steps);
        let mut stats = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut state = encode_observation(&env.reset()?, captions);
            let mut outcomes: Vec<StepOutcome> = Vec::new();
            loop {
                let epsilon = epsilon_at(&self.config, self.global_step - start, total_steps);
                let q = self.net.q_values(&self.online, &state)?;
                let action = dqn_act(&q, epsilon, rng);
                let (next, outcome) = env.step(action)?;
                outcomes.push(outcome);
                let next_state = next.as_ref().map(|o| encode_observation(o, captions));
                self.buffer.push(Transition {
                    state: state.clone(),
                    action,
                    reward: outcome.reward,
                    next_state: next_state.clone(),
                });
                self.global_step += 1;
                if self.buffer.len() >= warm {
                    self.updates += 1;
                    let loss = dqn_update(
                        &self.net,
                        &mut self.online,
                        &self.target,
                        &self.buffer,
                        &self.config,
                        self.updates,
                        rng,
                    )?;
                    log.push(TrainLogRow {
                        step: self.global_step,
                        loss,
                        aux: epsilon,
                    });
                }
                if self.global_step.is_multiple_of(self.config.target_sync_interval) {
                    target_sync(&self.online, &mut self.target)?;
                }
                match next_state {
                    Some(s) => state = s,
                    None => break,
                }
            }
            stats.push(episode_stats(&outcomes, threshold)?);
        }
        Ok(stats)
    }
}

impl GreedyPolicy for DqnAgent {
    fn greedy_action(&self, obs: &EncodedObservation) -> Result<usize> {
        Ok(argmax(&self.net.q_values(&self.online, obs)?))
    }

    fn parameters(&self) -> &ParameterSet {
        &self.online
    }
}

pub struct PpoAgent {
    pub net: PolicyValueNet,
    pub params: ParameterSet,
    pub config: PpoConfig,
    adam_step: u64,
}

impl PpoAgent {
    pub fn new<R: Rng + ?Sized>(setup: &AgentSetup, config: PpoConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let net = PolicyValueNet::new(
            &mut params,
            &setup.encoder,
            setup.visual_shape,
            setup.vocab.len(),
            setup.action_count,
            rng,
        )?;
        Ok(PpoAgent {
            net,
            params,
            config,
            adam_step: 0,
        })
    }

    fn update<R: Rng + ?Sized>(
        &mut self,
        rollout: &mut RolloutBatch,
        bootstrap: f64,
        rng: &mut R,
        log: &mut Vec<TrainLogRow>,
        step: u64,
    ) -> Result<()> {
        rollout.finish(self.config.gamma, self.config.lambda, bootstrap)?;
        let terms = ppo_update(&self.net, &mut self.params, rollout, &self.config, &mut self.adam_step, rng)?;
        log.push(TrainLogRow {
            step,
            loss: terms.total,
            aux: terms.entropy,
        });
        rollout.clear();
        Ok(())
    }

    /// Plays `episodes` training episodes with sampled actions, updating each
    /// time `rollout_length` steps have accumulated. A partial rollout left at
    /// the end is used for one final update.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        env: &mut TrajectoryEnv,
        captions: &mut CaptionEncoder,
        episodes: usize,
        rng: &mut R,
        log: &mut Vec<TrainLogRow>,
    ) -> Result<Vec<EpisodeStats>> {
        let threshold = env.config().completion_threshold;
        let mut rollout = RolloutBatch::default();
        let mut stats = Vec::with_capacity(episodes);
        let mut step: u64 = 0;
        for _ in 0..episodes {
            let mut state = encode_observation(&env.reset()?, captions);
            let mut outcomes = Vec::new();
            loop {
                let (logits, values, _) = self.net.forward(&self.params, &[&state])?;
                let (action, log_prob) = sample_categorical(logits.data(), rng);
                let (next, outcome) = env.step(action)?;
                outcomes.push(outcome);
                step += 1;
                rollout.push(state, action, log_prob, values[0]);
                rollout.record(outcome.reward, outcome.done);
                let next_state = next.as_ref().map(|o| encode_observation(o, captions));
                if rollout.len() == self.config.rollout_length {
                    let bootstrap = match &next_state {
                        Some(s) => self.net.forward(&self.params, &[s])?.1[0],
                        None => 0.0,
                    };
                    self.update(&mut rollout, bootstrap, rng, log, step)?;
                }
                match next_state {
                    Some(s) => state = s,
                    None => break,
                }
            }
            stats.push(episode_stats(&outcomes, threshold)?);
        }
        if !rollout.is_empty() {
            // the last recorded step always ends an episode here
            self.update(&mut rollout, 0.0, rng, log, step)?;
        }
        Ok(stats)
    }
}

impl GreedyPolicy for PpoAgent {
    fn greedy_action(&self, obs: &EncodedObservation) -> Result<usize> {
        let (logits, _, _) = self.net.forward(&self.params, &[obs])?;
        Ok(argmax(logits.data()))
    }

    fn parameters(&self) -> &ParameterSet {
        &self.params
    }
}

/// Greedy evaluation over `episodes` episodes; no learning, no randomness.
pub fn evaluate(
    policy: &dyn GreedyPolicy,
    env: &mut TrajectoryEnv,
    captions: &mut CaptionEncoder,
    episodes: usize,
) -> Result<Vec<EpisodeStats>> {
    let threshold = env.config().completion_threshold;
    let mut stats = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset()?;
        let mut outcomes = Vec::new();
        loop {
            let action = policy.greedy_action(&encode_observation(&obs, captions))?;
            let (next, outcome) = env.step(action)?;
            outcomes.push(outcome);
            match next {
                Some(o) => obs = o,
                None => break,
            }
        }
        stats.push(episode_stats(&outcomes, threshold)?);
    }
    Ok(stats)
}

/// Completed episodes over all episodes; 0 when there are none.
pub fn completion_rate(stats: &[EpisodeStats]) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.iter().filter(|s| s.completed).count() as f64 / stats.len() as f64
}

pub fn mean_cumulative_reward(stats: &[EpisodeStats]) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.iter().map(|s| s.cumulative_reward).sum::<f64>() / stats.len() as f64
}
