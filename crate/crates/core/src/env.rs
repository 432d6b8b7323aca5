//! Replayed-trajectory environment. Each episode is a fixed sequence of
//! captioned steps; the agent's action is scored against the step's
//! ground-truth action but never changes which state comes next.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, DatasetMode, StepVisual, SynthConfig, Synthetic};
use crate::error::{Error, Result};
use crate::fusion::{VisualInput, VisualShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seed")]
pub enum EpisodeOrder {
    Sequential,
    /// Reshuffled at every pass over the episodes, from this seed.
    Shuffled(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryEnvConfig {
    pub reward_correct: f64,
    pub reward_incorrect: f64,
    /// Minimum step accuracy for an episode to count as completed.
    pub completion_threshold: f64,
    pub episode_order: EpisodeOrder,
}

impl Default for TrajectoryEnvConfig {
    fn default() -> Self {
        TrajectoryEnvConfig {
            reward_correct: 1.0,
            reward_incorrect: 0.0,
            completion_threshold: 0.8,
            episode_order: EpisodeOrder::Sequential,
        }
    }
}

impl TrajectoryEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.completion_threshold > 0.0 && self.completion_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "completion_threshold must lie in (0, 1], got {}",
                self.completion_threshold
            )));
        }
        if !self.reward_correct.is_finite() || !self.reward_incorrect.is_finite() {
            return Err(Error::Config("rewards must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub visual: VisualInput,
    pub caption: Arc<str>,
    pub step_index: usize,
    pub episode_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub correct: bool,
}

#[derive(Debug, Clone)]
struct PreparedStep {
    visual: VisualInput,
    caption: Arc<str>,
    action: usize,
}

#[derive(Debug, Clone)]
struct PreparedEpisode {
    id: usize,
    steps: Vec<PreparedStep>,
}

/// Dataset converted into shared, network-ready steps.
#[derive(Debug, Clone)]
pub struct EpisodeStore {
    episodes: Vec<PreparedEpisode>,
    action_count: usize,
    visual_shape: VisualShape,
}

impl EpisodeStore {
    /// `root` resolves relative image paths; only image-mode datasets need it.
    pub fn new(dataset: &Dataset, root: Option<&Path>) -> Result<Arc<Self>> {
        let mut image_dims: Option<(usize, usize)> = None;
        let mut episodes = Vec::with_capacity(dataset.episodes.len());
        for ep in &dataset.episodes {
            let mut steps = Vec::with_capacity(ep.steps.len());
            for s in &ep.steps {
                let visual = match &s.visual {
                    StepVisual::Features(v) => VisualInput::Features(Arc::new(v.clone())),
                    StepVisual::Image(rel) => {
                        let root = root.ok_or_else(|| {
                            Error::InvalidInput("image-mode dataset needs its root directory".into())
                        })?;
                        let img = dataset::load_image(root, rel)?;
                        let dims = (img.shape()[1], img.shape()[2]);
                        match image_dims {
                            None => image_dims = Some(dims),
                            Some(d) if d != dims => {
                                return Err(Error::Invariant(format!(
                                    "image {rel} is {}x{}, expected {}x{}",
                                    dims.0, dims.1, d.0, d.1
                                )))
                            }
                            Some(_) => {}
                        }
                        VisualInput::Image(Arc::new(img))
                    }
                };
                steps.push(PreparedStep {
                    visual,
                    caption: Arc::from(s.caption.as_str()),
                    action: s.action,
                });
            }
            episodes.push(PreparedEpisode { id: ep.episode_id, steps });
        }
        let visual_shape = match dataset.manifest.mode {
            DatasetMode::Features => VisualShape::Features(dataset.manifest.feature_dim),
            DatasetMode::Images => {
                let (height, width) = image_dims.unwrap_or((1, 1));
                VisualShape::Image { height, width }
            }
        };
        Ok(Arc::new(EpisodeStore {
            episodes,
            action_count: dataset.manifest.action_count,
            visual_shape,
        }))
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn visual_shape(&self) -> VisualShape {
        self.visual_shape
    }

    /// Ground-truth action of a step, by store index.
    pub fn ground_truth(&self, episode: usize, step: usize) -> usize {
        self.episodes[episode].steps[step].action
    }

    pub fn episode_len(&self, episode: usize) -> usize {
        self.episodes[episode].steps.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cursor {
    NeedsReset,
    At { slot: usize, step: usize },
}

/// Single-owner replay environment over a subset of an [`EpisodeStore`].
#[derive(Debug, Clone)]
pub struct TrajectoryEnv {
    store: Arc<EpisodeStore>,
    config: TrajectoryEnvConfig,
    /// Store indices this environment plays, in base order.
    episodes: Vec<usize>,
    order: Vec<usize>,
    next: usize,
    shuffle_rng: Option<ChaCha8Rng>,
    cursor: Cursor,
}

impl TrajectoryEnv {
    pub fn new(store: Arc<EpisodeStore>, config: TrajectoryEnvConfig) -> Result<Self> {
        let all = (0..store.len()).collect();
        Self::with_episodes(store, all, config)
    }

    /// Plays only the listed store indices.
    pub fn with_episodes(
        store: Arc<EpisodeStore>,
        episodes: Vec<usize>,
        config: TrajectoryEnvConfig,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(&bad) = episodes.iter().find(|&&i| i >= store.len()) {
            return Err(Error::InvalidInput(format!("episode index {bad} out of range")));
        }
        let shuffle_rng = match config.episode_order {
            EpisodeOrder::Sequential => None,
            EpisodeOrder::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let mut env = TrajectoryEnv {
            store,
            config,
            order: Vec::new(),
            episodes,
            next: 0,
            shuffle_rng,
            cursor: Cursor::NeedsReset,
        };
        env.new_pass();
        Ok(env)
    }

    /// Convenience constructor from a loaded dataset.
    pub fn from_dataset(dataset: &Dataset, root: Option<&Path>, config: TrajectoryEnvConfig) -> Result<Self> {
        Self::new(EpisodeStore::new(dataset, root)?, config)
    }

    fn new_pass(&mut self) {
        self.order = self.episodes.clone();
        if let Some(rng) = &mut self.shuffle_rng {
            self.order.shuffle(rng);
        }
        self.next = 0;
    }

    pub fn config(&self) -> &TrajectoryEnvConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<EpisodeStore> {
        &self.store
    }

    pub fn action_count(&self) -> usize {
        self.store.action_count
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    /// Mean step count over the episodes this environment plays.
    pub fn mean_episode_len(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        let total: usize = self.episodes.iter().map(|&e| self.store.episode_len(e)).sum();
        total as f64 / self.episodes.len() as f64
    }

    fn observation(&self, slot: usize, step: usize) -> Observation {
        let ep = &self.store.episodes[slot];
        let s = &ep.steps[step];
        Observation {
            visual: s.visual.clone(),
            caption: s.caption.clone(),
            step_index: step,
            episode_id: ep.id,
        }
    }

    /// Moves to step 0 of the next episode, wrapping around after the last.
    pub fn reset(&mut self) -> Result<Observation> {
        if self.episodes.is_empty() {
            return Err(Error::InvalidInput("environment has no episodes".into()));
        }
        if self.next >= self.order.len() {
            self.new_pass();
        }
        let slot = self.order[self.next];
        self.next += 1;
        self.cursor = Cursor::At { slot, step: 0 };
        Ok(self.observation(slot, 0))
    }

    /// Ground-truth action of the current step, if an episode is in progress.
    pub fn current_ground_truth(&self) -> Option<usize> {
        match self.cursor {
            Cursor::At { slot, step } => Some(self.store.ground_truth(slot, step)),
            Cursor::NeedsReset => None,
        }
    }

    /// Scores `action` and advances. Returns `None` as the observation after
    /// the final step of the episode.
    pub fn step(&mut self, action: usize) -> Result<(Option<Observation>, StepOutcome)> {
        let Cursor::At { slot, step } = self.cursor else {
            return Err(Error::InvalidInput("step called without an active episode; call reset".into()));
        };
        if action >= self.store.action_count {
            return Err(Error::InvalidInput(format!(
                "action {action} out of range [0, {})",
                self.store.action_count
            )));
        }
        let correct = action == self.store.ground_truth(slot, step);
        let reward = if correct {
            self.config.reward_correct
        } else {
            self.config.reward_incorrect
        };
        let done = step + 1 == self.store.episode_len(slot);
        let next = if done {
            self.cursor = Cursor::NeedsReset;
            None
        } else {
            self.cursor = Cursor::At {
                slot,
                step: step + 1,
            };
            Some(self.observation(slot, step + 1))
        };
        Ok((next, StepOutcome { reward, done, correct }))
    }
}

/// Per-episode summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub cumulative_reward: f64,
    pub completed: bool,
    pub accuracy: f64,
}

pub fn episode_stats(outcomes: &[StepOutcome], threshold: f64) -> Result<EpisodeStats> {
    if outcomes.is_empty() {
        return Err(Error::InvalidInput("episode_stats needs at least one outcome".into()));
    }
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let accuracy = correct as f64 / outcomes.len() as f64;
    Ok(EpisodeStats {
        cumulative_reward: outcomes.iter().map(|o| o.reward).sum(),
        completed: accuracy >= threshold,
        accuracy,
    })
}

/// Environment over a freshly generated aliased dataset, plus the generator's
/// ground truth (prototypes and alias mask).
pub fn make_aliased_env(
    action_count: usize,
    alias_fraction: f64,
    steps: usize,
    episodes: usize,
    seed: u64,
    feature_dim: usize,
) -> Result<(TrajectoryEnv, Synthetic)> {
    let config = SynthConfig {
        episode_count: episodes,
        steps_per_episode: steps,
        action_count,
        feature_dim,
        alias_fraction,
        ..SynthConfig::default()
    };
    let synth = dataset::generate_synthetic(&config, seed)?;
    let env = TrajectoryEnv::from_dataset(&synth.dataset, None, TrajectoryEnvConfig::default())?;
    Ok((env, synth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(order: EpisodeOrder) -> TrajectoryEnv {
        let (env, synth) = make_aliased_env(4, 0.5, 5, 6, 3, 4).unwrap();
        let config = TrajectoryEnvConfig {
            episode_order: order,
            ..TrajectoryEnvConfig::default()
        };
        drop(env);
        TrajectoryEnv::from_dataset(&synth.dataset, None, config).unwrap()
    }

    #[test]
    fn sequential_reset_walks_episodes_in_order() {
        let mut e = env(EpisodeOrder::Sequential);
        let obs = e.reset().unwrap();
        assert_eq!((obs.episode_id, obs.step_index), (0, 0));
        for _ in 0..5 {
            let gt = e.current_ground_truth().unwrap();
            e.step(gt).unwrap();
        }
        assert_eq!(e.reset().unwrap().episode_id, 1);
    }

    #[test]
    fn shuffled_order_is_seeded() {
        let ids = |mut e: TrajectoryEnv| -> Vec<usize> {
            (0..12).map(|_| e.reset().unwrap().episode_id).collect()
        };
        let a = ids(env(EpisodeOrder::Shuffled(7)));
        assert_eq!(a, ids(env(EpisodeOrder::Shuffled(7))));
        let mut first_pass = a[..6].to_vec();
        first_pass.sort();
        assert_eq!(first_pass, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn rewards_and_termination() {
        let mut e = env(EpisodeOrder::Sequential);
        e.reset().unwrap();
        let gt = e.current_ground_truth().unwrap();
        let (_, right) = e.step(gt).unwrap();
        assert_eq!((right.reward, right.correct, right.done), (1.0, true, false));
        let gt = e.current_ground_truth().unwrap();
        let (_, wrong) = e.step((gt + 1) % 4).unwrap();
        assert_eq!((wrong.reward, wrong.correct), (0.0, false));
        e.step(0).unwrap();
        e.step(0).unwrap();
        let (obs, last) = e.step(0).unwrap();
        assert!(last.done && obs.is_none());
        assert!(e.step(0).is_err());
        e.reset().unwrap();
        assert!(e.step(4).is_err());
    }

    #[test]
    fn stats_threshold_rule() {
        let mk = |n_correct: usize, n: usize| -> Vec<StepOutcome> {
            (0..n)
                .map(|i| StepOutcome {
                    reward: if i < n_correct { 1.0 } else { 0.0 },
                    done: i + 1 == n,
                    correct: i < n_correct,
                })
                .collect()
        };
        let all = episode_stats(&mk(20, 20), 0.8).unwrap();
        assert_eq!((all.cumulative_reward, all.accuracy, all.completed), (20.0, 1.0, true));
        let s15 = episode_stats(&mk(15, 20), 0.8).unwrap();
        assert_eq!((s15.accuracy, s15.completed), (0.75, false));
        assert!(episode_stats(&mk(16, 20), 0.8).unwrap().completed);
        assert!(episode_stats(&[], 0.8).is_err());
    }

    #[test]
    fn threshold_must_be_in_unit_interval() {
        for bad in [0.0, 1.5, f64::NAN] {
            let c = TrajectoryEnvConfig {
                completion_threshold: bad,
                ..TrajectoryEnvConfig::default()
            };
            assert!(c.validate().is_err());
        }
    }
}
