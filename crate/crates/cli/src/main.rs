//! `fusionrl` command-line harness.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fusionrl_core::agents::AgentKind;
use fusionrl_core::dataset::{validate_schema, SynthConfig};
use fusionrl_core::fusion::FusionMode;
use fusionrl_core::harness::{self, CurveSeries, ExperimentConfig};
use fusionrl_core::textmetrics::{BleuOptions, EvalOptions};

#[derive(Parser)]
#[command(name = "fusionrl", version, about = "Multimodal RL experiments on captioned trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Train and evaluate one agent.
    Train(RunArgs),
    /// Run multimodal, visual-only and text-only with the same seed and budget.
    Ablate(RunArgs),
    /// Score two caption corpora side by side.
    EvalCaptions(EvalCaptionsArgs),
    /// Merge run summaries and external rows into one comparison table.
    Compare(CompareArgs),
    /// Draw moving-average reward curves from rewards.csv files.
    Curve(CurveArgs),
    /// Check a dataset directory or caption-corpus file against the schema.
    Validate {
        path: PathBuf,
    },
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Fraction of steps with an uninformative visual.
    #[arg(long, short = 'q')]
    alias_fraction: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Fraction of steps whose caption names a random action.
    #[arg(long)]
    caption_noise: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agent: Option<AgentKind>,
    #[arg(long)]
    mode: Option<FusionMode>,
    #[arg(long)]
    training_episodes: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Caption corpus to score and attach to the run summary.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Any config key, e.g. `--set dqn.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalCaptionsArgs {
    before: PathBuf,
    after: PathBuf,
    /// Report metrics on a 0-100 scale.
    #[arg(long)]
    scale100: bool,
    #[arg(long)]
    smoothing: bool,
    #[arg(long, default_value_t = 4)]
    max_n: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// summary.json files, or run directories containing one.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// CSV of extra rows: framework,completion_rate,cum_reward[,bleu,meteor,rouge_l].
    #[arg(long)]
    external: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

fn config_from(args: &RunArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut overrides = Vec::new();
    let mut set = |k: &str, v: String| overrides.push(format!("{k}={v}"));
    if let Some(s) = args.seed {
        set("seed", s.to_string());
    }
    if let Some(a) = args.agent {
        set("agent", format!("\"{a}\""));
    }
    if let Some(m) = args.mode {
        set("mode", format!("\"{m}\""));
    }
    if let Some(n) = args.training_episodes {
        set("training_episodes", n.to_string());
    }
    if let Some(n) = args.eval_episodes {
        set("eval_episodes", n.to_string());
    }
    if let Some(p) = &args.dataset {
        set("data.path", toml_string(p));
    }
    if let Some(p) = &args.captions {
        set("captions.corpus", toml_string(p));
    }
    overrides.extend(args.overrides.iter().cloned());
    let config = match &args.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::parse("", &overrides, None)?,
    };
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| fusionrl_core::Error::Config("no output directory: pass --out or set output_dir".into()))?;
    Ok((config, out))
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

fn gen_synth(args: GenSynthArgs) -> anyhow::Result<()> {
    let d = SynthConfig::default();
    let config = SynthConfig {
        name: args.name.unwrap_or(d.name),
        episode_count: args.episodes.unwrap_or(d.episode_count),
        steps_per_episode: args.steps.unwrap_or(d.steps_per_episode),
        action_count: args.actions.unwrap_or(d.action_count),
        feature_dim: args.feature_dim.unwrap_or(d.feature_dim),
        alias_fraction: args.alias_fraction.unwrap_or(d.alias_fraction),
        noise_std: args.noise_std.unwrap_or(d.noise_std),
        caption_noise: args.caption_noise.unwrap_or(d.caption_noise),
    };
    println!("{}", harness::cmd_gen_synth(&config, args.seed, &args.out)?);
    Ok(())
}

fn train(args: RunArgs) -> anyhow::Result<()> {
    let (config, out) = config_from(&args)?;
    let result = harness::cmd_train(&config, &out)?;
    let s = &result.summary;
    println!(
        "{}: completion rate {:.3}, mean cumulative reward {:.3}, eval accuracy {:.3} (seed {}, config {})",
        s.label, s.completion_rate, s.mean_cum_reward, s.eval_mean_accuracy, s.seed, s.config_hash
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn ablate(args: RunArgs) -> anyhow::Result<()> {
    let (config, out) = config_from(&args)?;
    let results = harness::cmd_ablate(&config, &out)?;
    print!("{}", harness::ablation_table(&results));
    println!("wrote {}", out.join(harness::ABLATION_CSV).display());
    Ok(())
}

fn eval_captions(args: EvalCaptionsArgs) -> anyhow::Result<()> {
    if args.max_n == 0 {
        return Err(fusionrl_core::Error::InvalidInput("--max-n must be positive".into()).into());
    }
    let options = EvalOptions {
        bleu: BleuOptions {
            max_n: args.max_n,
            smoothing: args.smoothing,
        },
    };
    let cmp = harness::eval_captions(&args.before, &args.after, options)?;
    let scale = if args.scale100 { 100.0 } else { 1.0 };
    print!("{}", cmp.table(scale));
    if let Some(out) = &args.out {
        std::fs::write(out, cmp.csv(scale)).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn compare(args: CompareArgs) -> anyhow::Result<()> {
    let mut runs = Vec::new();
    for p in &args.results {
        let file = if p.is_dir() { p.join(harness::SUMMARY_FILE) } else { p.clone() };
        runs.push(harness::load_run_summary(&file)?);
    }
    let external = match &args.external {
        Some(p) => harness::read_external_rows(p)?,
        None => Vec::new(),
    };
    let rows = harness::compare_rows(&runs, external);
    print!("{}", harness::render_compare_table(&rows));
    if let Some(out) = &args.out {
        std::fs::write(out, harness::compare_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn curve(args: CurveArgs) -> anyhow::Result<()> {
    let mut series = Vec::new();
    for p in &args.inputs {
        series.push(CurveSeries {
            label: p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            rewards: harness::read_rewards_csv(p)?,
        });
    }
    let svg = harness::emit_curve(&series, args.window)?;
    std::fs::write(&args.out, svg).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn validate(path: &Path) -> anyhow::Result<()> {
    let report = validate_schema(path);
    println!("{report}");
    if !report.is_valid() {
        bail!(fusionrl_core::Error::InvalidInput(format!(
            "{}: {} violation(s)",
            path.display(),
            report.violations.len()
        )));
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fusionrl_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::EvalCaptions(a) => eval_captions(a),
        Command::Compare(a) => compare(a),
        Command::Curve(a) => curve(a),
        Command::Validate { path } => validate(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
