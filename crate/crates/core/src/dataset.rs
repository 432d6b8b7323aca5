//! Captioned-trajectory datasets: schema, on-disk layout, validation and the
//! seeded synthetic generator with aliased visual states.
//!
//! Layout:
//!
//! ```text
//! <root>/manifest.json          name, episode_count, action_count, feature_dim, mode, seed
//! <root>/episodes/ep0000.jsonl  one step per line: step, visual | image, caption, action
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPISODES_DIR: &str = "episodes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Features,
    Images,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub episode_count: usize,
    pub action_count: usize,
    pub feature_dim: usize,
    pub mode: DatasetMode,
    pub seed: Option<u64>,
}

/// The visual half of an observation: a feature vector or a relative image path.
#[derive(Debug, Clone, PartialEq)]
pub enum StepVisual {
    Features(Vec<f64>),
    Image(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_index: usize,
    pub visual: StepVisual,
    pub caption: String,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<EpisodeRecord>,
}

/// Wire form of one episode line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visual: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    caption: String,
    action: usize,
}

/// One line of a caption corpus: a candidate caption and its references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: u64,
    pub candidate: String,
    pub references: Vec<String>,
}

pub fn episode_file_name(episode_id: usize) -> String {
    format!("ep{episode_id:04}.jsonl")
}

fn parse_episode_file_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("ep")?.strip_suffix(".jsonl")?;
    if digits.len() < 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl DatasetManifest {
    fn check(&self) -> Vec<Error> {
        let mut out = Vec::new();
        if self.action_count < 2 {
            out.push(Error::Invariant(format!(
                "manifest action_count must be >= 2, got {}",
                self.action_count
            )));
        }
        if self.episode_count == 0 {
            out.push(Error::Invariant("manifest episode_count must be positive".into()));
        }
        match self.mode {
            DatasetMode::Features if self.feature_dim == 0 => out.push(Error::Invariant(
                "feature mode requires a positive feature_dim".into(),
            )),
            DatasetMode::Images if self.feature_dim != 0 => out.push(Error::Invariant(
                "image mode requires feature_dim = 0".into(),
            )),
            _ => {}
        }
        out
    }
}

fn check_step(manifest: &DatasetManifest, step: &StepRecord, at: &str) -> Vec<Error> {
    let mut out = Vec::new();
    if step.action >= manifest.action_count {
        out.push(Error::Invariant(format!(
            "{at}: action {} out of range [0, {})",
            step.action, manifest.action_count
        )));
    }
    match (&step.visual, manifest.mode) {
        (StepVisual::Features(v), DatasetMode::Features) => {
            if v.len() != manifest.feature_dim {
                out.push(Error::Invariant(format!(
                    "{at}: visual has length {}, manifest feature_dim is {}",
                    v.len(),
                    manifest.feature_dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                out.push(Error::Invariant(format!("{at}: visual has non-finite values")));
            }
        }
        (StepVisual::Image(p), DatasetMode::Images) => {
            if Path::new(p).is_absolute() || p.is_empty() {
                out.push(Error::Invariant(format!(
                    "{at}: image path must be a non-empty relative path"
                )));
            }
        }
        (StepVisual::Features(_), DatasetMode::Images) => out.push(Error::Invariant(format!(
            "{at}: visual vector present in an image-mode dataset"
        ))),
        (StepVisual::Image(_), DatasetMode::Features) => out.push(Error::Invariant(format!(
            "{at}: image path present in a feature-mode dataset"
        ))),
    }
    out
}

fn check_episode(manifest: &DatasetManifest, episode: &EpisodeRecord) -> Vec<Error> {
    let name = episode_file_name(episode.episode_id);
    if episode.steps.is_empty() {
        return vec![Error::Invariant(format!("{name}: episode has no steps"))];
    }
    let mut out = Vec::new();
    for (expected, step) in episode.steps.iter().enumerate() {
        let at = format!("{name} step {}", step.step_index);
        if step.step_index != expected {
            out.push(Error::Invariant(format!(
                "{name}: step indices must be contiguous from 0, found {} at position {expected}",
                step.step_index
            )));
        }
        out.extend(check_step(manifest, step, &at));
    }
    out
}

/// Checks every in-memory invariant; returns all violations.
pub fn check_dataset(dataset: &Dataset) -> Vec<Error> {
    let mut out = dataset.manifest.check();
    if dataset.manifest.episode_count != dataset.episodes.len() {
        out.push(Error::Invariant(format!(
            "manifest episode_count is {}, but {} episodes are present",
            dataset.manifest.episode_count,
            dataset.episodes.len()
        )));
    }
    for pair in dataset.episodes.windows(2) {
        if pair[0].episode_id >= pair[1].episode_id {
            out.push(Error::Invariant(format!(
                "episode ids must be unique and ascending ({} then {})",
                pair[0].episode_id, pair[1].episode_id
            )));
        }
    }
    for ep in &dataset.episodes {
        out.extend(check_episode(&dataset.manifest, ep));
    }
    out
}

fn parse_step_line(file: &Path, line_no: usize, line: &str) -> Result<StepRecord> {
    let schema = |message: String| Error::Schema {
        file: file.to_path_buf(),
        line: line_no,
        message,
    };
    let raw: StepLine = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
    let visual = match (raw.visual, raw.image) {
        (Some(v), None) => StepVisual::Features(v),
        (None, Some(p)) => StepVisual::Image(p),
        (Some(_), Some(_)) => {
            return Err(schema(
                "exactly one of `visual` and `image` must be present, found both".into(),
            ))
        }
        (None, None) => {
            return Err(schema(
                "exactly one of `visual` and `image` must be present, found neither".into(),
            ))
        }
    };
    Ok(StepRecord {
        step_index: raw.step,
        visual,
        caption: raw.caption,
        action: raw.action,
    })
}

fn read_episode(path: &Path, episode_id: usize, violations: &mut Vec<Error>) -> Option<EpisodeRecord> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) => {
            violations.push(Error::io(path, e));
            return None;
        }
    };
    let mut steps = Vec::new();
    let mut ok = true;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                violations.push(Error::io(path, e));
                return None;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match parse_step_line(path, idx + 1, &line) {
            Ok(step) => steps.push(step),
            Err(e) => {
                ok = false;
                violations.push(e);
            }
        }
    }
    ok.then_some(EpisodeRecord { episode_id, steps })
}

fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        file: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Reads and checks a dataset, collecting every violation found.
fn scan_dataset(root: &Path) -> (Option<Dataset>, Vec<Error>) {
    let mut violations = Vec::new();
    let manifest = match read_manifest(root) {
        Ok(m) => m,
        Err(e) => return (None, vec![e]),
    };
    let dir = root.join(EPISODES_DIR);
    let entries = match fs::read_dir(&dir) {
        Ok(rd) => rd,
        Err(e) => return (None, vec![Error::io(&dir, e)]),
    };
    let mut files = Vec::new();
    for entry in entries {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                violations.push(Error::io(&dir, e));
                continue;
            }
        };
        let name = entry.file_name().to_string_lossy().into_owned();
        match parse_episode_file_name(&name) {
            Some(id) => files.push((id, entry.path())),
            None => violations.push(Error::Invariant(format!(
                "unexpected file in {EPISODES_DIR}/: {name}"
            ))),
        }
    }
    files.sort();

    let mut episodes = Vec::with_capacity(files.len());
    let mut all_parsed = true;
    for (id, path) in &files {
        match read_episode(path, *id, &mut violations) {
            Some(ep) => episodes.push(ep),
            None => all_parsed = false,
        }
    }
    if !all_parsed {
        // episode count check would only repeat the parse failures
        violations.extend(manifest.check());
        return (None, violations);
    }
    let dataset = Dataset {
        manifest,
        episodes,
    };
    violations.extend(check_dataset(&dataset));
    if violations.is_empty() {
        (Some(dataset), violations)
    } else {
        (None, violations)
    }
}

/// Loads and fully validates a dataset; episodes come back in ascending id order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let (dataset, mut violations) = scan_dataset(root);
    match dataset {
        Some(d) => Ok(d),
        None => Err(violations.remove(0)),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes the dataset layout under `root`, replacing any existing episode files.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    if let Some(first) = check_dataset(dataset).into_iter().next() {
        return Err(first);
    }
    let dir = root.join(EPISODES_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if parse_episode_file_name(&entry.file_name().to_string_lossy()).is_some() {
            fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }

    let mut manifest = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    manifest.push('\n');
    write_file(&root.join(MANIFEST_FILE), manifest.as_bytes())?;

    for ep in &dataset.episodes {
        let mut out = String::new();
        for step in &ep.steps {
            let (visual, image) = match &step.visual {
                StepVisual::Features(v) => (Some(v.clone()), None),
                StepVisual::Image(p) => (None, Some(p.clone())),
            };
            let line = StepLine {
                step: step.step_index,
                visual,
                image,
                caption: step.caption.clone(),
                action: step.action,
            };
            out.push_str(
                &serde_json::to_string(&line).map_err(|e| Error::InvalidInput(e.to_string()))?,
            );
            out.push('\n');
        }
        write_file(&dir.join(episode_file_name(ep.episode_id)), out.as_bytes())?;
    }
    Ok(())
}

/// Outcome of [`validate_schema`]; empty iff the target loads cleanly.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Error>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok: no violations");
        }
        writeln!(f, "{} violation(s):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

/// Validates a dataset directory, or a caption-corpus JSONL file when `path`
/// is a regular file.
pub fn validate_schema(path: &Path) -> ValidationReport {
    if path.is_file() {
        return ValidationReport {
            violations: scan_caption_corpus(path).1,
        };
    }
    ValidationReport {
        violations: scan_dataset(path).1,
    }
}

fn scan_caption_corpus(path: &Path) -> (Vec<CaptionRecord>, Vec<Error>) {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) => return (Vec::new(), vec![Error::io(path, e)]),
    };
    let mut records = Vec::new();
    let mut violations = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = match line {
            Ok(l) => l,
            Err(e) => return (records, vec![Error::io(path, e)]),
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CaptionRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => violations.push(Error::Schema {
                file: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            }),
        }
    }
    (records, violations)
}

/// Reads a caption-corpus JSONL file (`id`, `candidate`, `references`).
pub fn read_caption_corpus(path: &Path) -> Result<Vec<CaptionRecord>> {
    let (records, mut violations) = scan_caption_corpus(path);
    if violations.is_empty() {
        Ok(records)
    } else {
        Err(violations.remove(0))
    }
}

pub fn write_caption_corpus(records: &[CaptionRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Loads a PNG as a `[3, H, W]` tensor with channel values scaled to [0, 1].
pub fn load_image(root: &Path, relative: &str) -> Result<Tensor> {
    let path = root.join(relative);
    let img = image::open(&path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Parameters of the synthetic aliased-state generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub name: String,
    pub episode_count: usize,
    pub steps_per_episode: usize,
    pub action_count: usize,
    pub feature_dim: usize,
    /// Fraction of steps whose visual carries no information about the action.
    pub alias_fraction: f64,
    /// Standard deviation of the isotropic noise added to every prototype.
    pub noise_std: f64,
    /// Fraction of steps whose caption names a uniformly drawn action instead
    /// of the true one. Zero keeps captions exact.
    pub caption_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic-aliased".into(),
            episode_count: 120,
            steps_per_episode: 20,
            action_count: 4,
            feature_dim: 16,
            alias_fraction: 0.5,
            noise_std: 0.3,
            caption_noise: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alias_fraction) {
            return Err(Error::InvalidInput(format!(
                "alias_fraction must lie in [0, 1], got {}",
                self.alias_fraction
            )));
        }
        if self.action_count < 2 {
            return Err(Error::InvalidInput(format!(
                "action_count must be >= 2, got {}",
                self.action_count
            )));
        }
        if self.episode_count == 0 || self.steps_per_episode == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidInput(
                "episode_count, steps_per_episode and feature_dim must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.caption_noise) {
            return Err(Error::InvalidInput(format!(
                "caption_noise must lie in [0, 1], got {}",
                self.caption_noise
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidInput("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

const CAPTION_TEMPLATES: [&str; 8] = [
    "the robot picks up the red block",
    "the robot places the block in the bowl",
    "the robot opens the top drawer",
    "the robot pushes the cup to the left",
    "the robot closes the microwave door",
    "the robot wipes the table with the towel",
    "the robot flips the pot lid",
    "the robot moves the spoon into the pan",
];

/// The caption used for steps whose ground-truth action is `action`.
pub fn caption_for_action(action: usize) -> String {
    CAPTION_TEMPLATES
        .get(action)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("the robot performs primitive {action}"))
}

/// Rounds to 9 significant decimal digits so written files are short and exact.
pub fn quantize(x: f64) -> f64 {
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Generated dataset together with the ground truth used to build it.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// One prototype per action class, followed by the shared aliased prototype.
    pub prototypes: Vec<Vec<f64>>,
    /// `aliased[e][t]` is true when step t of episode e used the aliased prototype.
    pub aliased: Vec<Vec<bool>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Deterministic synthetic dataset: class-prototype visuals (a fraction
/// `alias_fraction` replaced by one shared prototype) and captions that name
/// the ground-truth action, except for a `caption_noise` fraction.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Synthetic> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..=config.action_count)
        .map(|_| normal_vec(&mut rng, config.feature_dim, 1.0))
        .collect();
    let aliased_proto = config.action_count;

    let mut episodes = Vec::with_capacity(config.episode_count);
    let mut aliased = Vec::with_capacity(config.episode_count);
    for episode_id in 0..config.episode_count {
        let mut steps = Vec::with_capacity(config.steps_per_episode);
        let mut mask = Vec::with_capacity(config.steps_per_episode);
        for step_index in 0..config.steps_per_episode {
            let action = rng.random_range(0..config.action_count);
            let is_aliased = rng.random::<f64>() < config.alias_fraction;
            let proto = &prototypes[if is_aliased { aliased_proto } else { action }];
            let noise = normal_vec(&mut rng, config.feature_dim, config.noise_std);
            let visual = proto
                .iter()
                .zip(&noise)
                .map(|(p, n)| quantize(p + n))
                .collect();
            // no extra draws when captions are exact, so such datasets do not
            // depend on this knob
            let named = if config.caption_noise > 0.0 && rng.random::<f64>() < config.caption_noise {
                rng.random_range(0..config.action_count)
            } else {
                action
            };
            steps.push(StepRecord {
                step_index,
                visual: StepVisual::Features(visual),
                caption: caption_for_action(named),
                action,
            });
            mask.push(is_aliased);
        }
        episodes.push(EpisodeRecord { episode_id, steps });
        aliased.push(mask);
    }

    Ok(Synthetic {
        dataset: Dataset {
            manifest: DatasetManifest {
                name: config.name.clone(),
                episode_count: config.episode_count,
                action_count: config.action_count,
                feature_dim: config.feature_dim,
                mode: DatasetMode::Features,
                seed: Some(seed),
            },
            episodes,
        },
        prototypes,
        aliased,
    })
}

/// Expected step accuracy of the best policy that sees only the visual input.
pub fn visual_only_ceiling(action_count: usize, alias_fraction: f64) -> f64 {
    (1.0 - alias_fraction) + alias_fraction / action_count as f64
}

/// Expected step accuracy of the best policy that sees only the caption.
pub fn text_only_ceiling(action_count: usize, caption_noise: f64) -> f64 {
    (1.0 - caption_noise) + caption_noise / action_count as f64
}

/// Index of the nearest prototype (squared Euclidean), ties to the lowest index.
pub fn nearest_prototype(prototypes: &[Vec<f64>], visual: &[f64]) -> usize {
    let dist = |p: &Vec<f64>| -> f64 { p.iter().zip(visual).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in prototypes.iter().enumerate() {
        let d = dist(p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
