//! Experiment harness: configuration files, seeded training runs, ablation
//! matrices and the report writers behind the command-line tool.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::{
    compare_csv, compare_rows, emit_curve, eval_captions, load_run_summary, moving_average, read_external_rows,
    read_rewards_csv, render_compare_table, CaptionComparison, CompareRow, CurveSeries, ABSENT,
};

use crate::agents::{
    completion_rate, evaluate, mean_cumulative_reward, AgentKind, AgentSetup, DqnAgent, DqnConfig, GreedyPolicy,
    PpoAgent, PpoConfig, TrainLogRow,
};
use crate::dataset::{generate_synthetic, load_dataset, write_dataset, Dataset, SynthConfig};
use crate::env::{EpisodeOrder, EpisodeStats, EpisodeStore, TrajectoryEnv, TrajectoryEnvConfig};
use crate::error::{Error, Result};
use crate::fusion::{EncoderConfig, FusionMode, Vocabulary};
use crate::textmetrics::{evaluate_caption_file, EvalOptions, MetricReport};

pub const REWARDS_FILE: &str = "rewards.csv";
pub const REWARDS_HEADER: &str = "episode,cum_reward,accuracy,completed";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CURVE_FILE: &str = "reward_curve.svg";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory. When absent a synthetic dataset is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_synth_seed")]
    pub synth_seed: u64,
}

fn default_synth_seed() -> u64 {
    42
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synth_seed: default_synth_seed(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionLink {
    /// Caption corpus scored and attached to the run's summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub curve: bool,
    pub curve_window: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            curve: true,
            curve_window: 5,
        }
    }
}

fn default_training_episodes() -> usize {
    200
}

fn default_eval_episodes() -> usize {
    20
}

/// One experiment. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_agent")]
    pub agent: AgentKind,
    #[serde(default)]
    pub mode: FusionMode,
    #[serde(default = "default_training_episodes")]
    pub training_episodes: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Row name in comparison tables; defaults to `<agent>-<mode>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Not echoed and not hashed: identical experiments written to different
    /// places share a hash.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub env: TrajectoryEnvConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub dqn: DqnConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub captions: CaptionLink,
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_agent() -> AgentKind {
    AgentKind::Dqn
}

impl ExperimentConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut table = toml::Table::new();
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        Self::from_table(table).expect("default config is valid")
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Parses TOML text with `key.path=value` overrides applied on top.
    /// Relative paths inside the file resolve against `base_dir`.
    pub fn parse(text: &str, overrides: &[String], base_dir: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message().trim())))?;
        if let Some(base) = base_dir {
            for (section, key) in [("data", "path"), ("captions", "corpus")] {
                if let Some(toml::Value::String(p)) = table.get_mut(section).and_then(|s| s.get_mut(key)) {
                    if Path::new(p.as_str()).is_relative() {
                        *p = base.join(&*p).to_string_lossy().into_owned();
                    }
                }
            }
            if let Some(toml::Value::String(p)) = table.get_mut("output_dir") {
                if Path::new(p.as_str()).is_relative() {
                    *p = base.join(&*p).to_string_lossy().into_owned();
                }
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.encoder.validate()?;
        self.dqn.validate()?;
        self.ppo.validate()?;
        self.synth.validate().map_err(|e| Error::Config(format!("synth: {e}")))?;
        if self.report.curve_window == 0 {
            return Err(Error::Config("report.curve_window must be positive".into()));
        }
        for p in [&self.data.path, &self.captions.corpus].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.agent, self.mode))
    }

    /// Canonical TOML of everything that affects results.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

/// Sets `dotted.key` in a TOML table. The value is parsed as TOML when it can
/// be and taken as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Headline numbers of one run; written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub agent: AgentKind,
    pub mode: FusionMode,
    pub seed: u64,
    pub config_hash: String,
    pub training_episodes: usize,
    pub eval_episodes: usize,
    /// Completed evaluation episodes over evaluation episodes.
    pub completion_rate: f64,
    /// Mean cumulative reward over evaluation episodes.
    pub mean_cum_reward: f64,
    pub eval_mean_accuracy: f64,
    /// Mean cumulative reward over the first and last tenth of training.
    pub train_first_tenth_reward: Option<f64>,
    pub train_last_tenth_reward: Option<f64>,
    pub caption_metrics: Option<MetricReport>,
}

/// Everything a run produced, before anything touches the disk.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub train: Vec<EpisodeStats>,
    pub eval: Vec<EpisodeStats>,
    pub log: Vec<TrainLogRow>,
    /// `epsilon` for DQN, `entropy` for PPO.
    pub log_aux_name: &'static str,
    pub checkpoint: String,
    pub vocab: String,
    pub config_toml: String,
}

impl RunResult {
    /// Training episodes first, then evaluation episodes, indexed from 0.
    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeStats> {
        self.train.iter().chain(&self.eval)
    }

    pub fn rewards_csv(&self) -> String {
        let mut out = format!("{REWARDS_HEADER}\n");
        for (i, s) in self.episodes().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{}\n",
                s.cumulative_reward,
                s.accuracy,
                u8::from(s.completed)
            ));
        }
        out
    }

    pub fn train_log_csv(&self) -> String {
        let mut out = format!("step,loss,{}\n", self.log_aux_name);
        for r in &self.log {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.aux));
        }
        out
    }
}

fn tenth(stats: &[EpisodeStats], last: bool) -> Option<f64> {
    if stats.is_empty() {
        return None;
    }
    let n = stats.len().div_ceil(10);
    let slice = if last { &stats[stats.len() - n..] } else { &stats[..n] };
    Some(mean_cumulative_reward(slice))
}

/// Loads the configured dataset or generates the synthetic one. The second
/// element is the root used to resolve image paths.
pub fn prepare_dataset(config: &ExperimentConfig) -> Result<(Dataset, Option<PathBuf>)> {
    match &config.data.path {
        Some(p) => Ok((load_dataset(p)?, Some(p.clone()))),
        None => Ok((generate_synthetic(&config.synth, config.data.synth_seed)?.dataset, None)),
    }
}

/// Trains and evaluates one configuration in memory. Evaluation uses the last
/// `eval_episodes` episodes of the dataset; training cycles through the rest.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let (dataset, root) = prepare_dataset(config)?;
    let n = dataset.episodes.len();
    if config.eval_episodes > n {
        return Err(Error::Config(format!(
            "eval_episodes {} exceeds the dataset's {n} episodes",
            config.eval_episodes
        )));
    }
    let split = n - config.eval_episodes;
    if config.training_episodes > 0 && split == 0 {
        return Err(Error::Config("no episodes left for training after the evaluation split".into()));
    }
    let store = EpisodeStore::new(&dataset, root.as_deref())?;
    let captions: Vec<&str> = dataset
        .episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.caption.as_str()))
        .collect();
    let vocab = Arc::new(Vocabulary::build(&captions, 1));
    let setup = AgentSetup {
        encoder: EncoderConfig {
            mode: config.mode,
            ..config.encoder.clone()
        },
        visual_shape: store.visual_shape(),
        vocab: vocab.clone(),
        action_count: store.action_count(),
    };
    let mut train_env = TrajectoryEnv::with_episodes(store.clone(), (0..split).collect(), config.env.clone())?;
    let eval_config = TrajectoryEnvConfig {
        episode_order: EpisodeOrder::Sequential,
        ..config.env.clone()
    };
    let mut eval_env = TrajectoryEnv::with_episodes(store, (split..n).collect(), eval_config)?;
    let mut caption_encoder = setup.caption_encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();

    let (train, eval, checkpoint, aux) = match config.agent {
        AgentKind::Dqn => {
            let mut agent = DqnAgent::new(&setup, config.dqn.clone(), &mut rng)?;
            let train = if config.training_episodes > 0 {
                agent.train(&mut train_env, &mut caption_encoder, config.training_episodes, &mut rng, &mut log)?
            } else {
                Vec::new()
            };
            let eval = evaluate(&agent, &mut eval_env, &mut caption_encoder, config.eval_episodes)?;
            (train, eval, agent.parameters().to_checkpoint(), "epsilon")
        }
        AgentKind::Ppo => {
            let mut agent = PpoAgent::new(&setup, config.ppo.clone(), &mut rng)?;
            let train = if config.training_episodes > 0 {
                agent.train(&mut train_env, &mut caption_encoder, config.training_episodes, &mut rng, &mut log)?
            } else {
                Vec::new()
            };
            let eval = evaluate(&agent, &mut eval_env, &mut caption_encoder, config.eval_episodes)?;
            (train, eval, agent.parameters().to_checkpoint(), "entropy")
        }
    };

    let caption_metrics = match &config.captions.corpus {
        Some(p) => Some(evaluate_caption_file(p, EvalOptions::default())?),
        None => None,
    };
    let eval_mean_accuracy = if eval.is_empty() {
        0.0
    } else {
        eval.iter().map(|s| s.accuracy).sum::<f64>() / eval.len() as f64
    };
    let summary = RunSummary {
        label: config.label(),
        agent: config.agent,
        mode: config.mode,
        seed: config.seed,
        config_hash: config.hash(),
        training_episodes: train.len(),
        eval_episodes: eval.len(),
        completion_rate: completion_rate(&eval),
        mean_cum_reward: mean_cumulative_reward(&eval),
        eval_mean_accuracy,
        train_first_tenth_reward: tenth(&train, false),
        train_last_tenth_reward: tenth(&train, true),
        caption_metrics,
    };
    Ok(RunResult {
        summary,
        train,
        eval,
        log,
        log_aux_name: aux,
        checkpoint,
        vocab: vocab.to_file_string(),
        config_toml: config.to_toml(),
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(result: &RunResult, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let s = &result.summary;
    write_text(
        &dir.join(CONFIG_ECHO_FILE),
        &format!("# config_hash = {}\n# seed = {}\n{}", s.config_hash, s.seed, result.config_toml),
    )?;
    write_text(&dir.join(REWARDS_FILE), &result.rewards_csv())?;
    let mut summary = serde_json::to_string_pretty(s).map_err(|e| Error::InvalidInput(e.to_string()))?;
    summary.push('\n');
    write_text(&dir.join(SUMMARY_FILE), &summary)?;
    write_text(&dir.join(CHECKPOINT_FILE), &result.checkpoint)?;
    write_text(&dir.join(VOCAB_FILE), &result.vocab)?;
    write_text(&dir.join(TRAIN_LOG_FILE), &result.train_log_csv())?;
    if config.report.curve {
        let series = CurveSeries {
            label: s.label.clone(),
            rewards: result.episodes().map(|e| e.cumulative_reward).collect(),
        };
        let svg = emit_curve(&[series], config.report.curve_window)?;
        let note = format!("<!-- config_hash {} seed {} -->\n", s.config_hash, s.seed);
        write_text(&dir.join(CURVE_FILE), &format!("{note}{svg}"))?;
    }
    Ok(())
}

/// Runs one experiment and writes it to `dir`.
pub fn cmd_train(config: &ExperimentConfig, dir: &Path) -> Result<RunResult> {
    let result = run_experiment(config)?;
    write_run(&result, config, dir)?;
    Ok(result)
}

/// Runs the three fusion modes with the base config's seed and budgets, each
/// into `dir/<mode>`, and writes the combined report.
pub fn cmd_ablate(base: &ExperimentConfig, dir: &Path) -> Result<Vec<RunResult>> {
    create_dir(dir)?;
    let mut results = Vec::with_capacity(3);
    for mode in FusionMode::ALL {
        let config = ExperimentConfig {
            mode,
            label: None,
            ..base.clone()
        };
        results.push(cmd_train(&config, &dir.join(mode.as_str()))?);
    }
    write_text(&dir.join(ABLATION_CSV), &ablation_csv(&results))?;
    write_text(&dir.join(ABLATION_TABLE), &ablation_table(&results))?;
    if base.report.curve {
        let series: Vec<CurveSeries> = results
            .iter()
            .map(|r| CurveSeries {
                label: r.summary.mode.to_string(),
                rewards: r.episodes().map(|e| e.cumulative_reward).collect(),
            })
            .collect();
        write_text(&dir.join(CURVE_FILE), &emit_curve(&series, base.report.curve_window)?)?;
    }
    Ok(results)
}

pub fn ablation_csv(results: &[RunResult]) -> String {
    let mut out = String::from("mode,completion_rate,mean_cum_reward,seed,config_hash\n");
    for r in results {
        let s = &r.summary;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.mode, s.completion_rate, s.mean_cum_reward, s.seed, s.config_hash
        ));
    }
    out
}

pub fn ablation_table(results: &[RunResult]) -> String {
    let mut out = format!(
        "{:<12} {:>16} {:>16} {:>8}  {}\n",
        "mode", "completion rate", "mean cum reward", "seed", "config hash"
    );
    for r in results {
        let s = &r.summary;
        out.push_str(&format!(
            "{:<12} {:>16.3} {:>16.3} {:>8}  {}\n",
            s.mode.as_str(),
            s.completion_rate,
            s.mean_cum_reward,
            s.seed,
            s.config_hash
        ));
    }
    out
}

/// Generates and writes a synthetic dataset; returns a one-line summary.
pub fn cmd_gen_synth(config: &SynthConfig, seed: u64, dir: &Path) -> Result<String> {
    let synth = generate_synthetic(config, seed)?;
    write_dataset(&synth.dataset, dir)?;
    let m = &synth.dataset.manifest;
    let steps: usize = synth.dataset.episodes.iter().map(|e| e.steps.len()).sum();
    Ok(format!(
        "{}: {} episodes, {steps} steps, {} actions, feature_dim {}, seed {seed}, tree {}",
        m.name,
        m.episode_count,
        m.action_count,
        m.feature_dim,
        tree_hash(dir)?
    ))
}

/// SHA-256 over every file under `dir` (sorted relative paths and contents).
pub fn tree_hash(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, base, out)?;
            } else {
                let rel = path.strip_prefix(base).unwrap_or(&path);
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
