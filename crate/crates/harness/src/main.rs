use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use reed_pbrl::config::{ExperimentConfig, RewardSource};
use reed_pbrl::metrics::final_return;
use reed_pbrl::{output, server};
use reed_pbrl_core::reed::ReedMode;
use reed_pbrl_core::rewardnet::RewardArch;
use reed_pbrl_core::teachers::Strategy;

#[derive(Parser)]
#[command(name = "reed-pbrl", version, about = "Preference-based RL with dynamics-aware reward learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and reward model from preference feedback.
    Run(RunArgs),
    /// Train a fresh policy against a frozen reward checkpoint.
    Reuse(ReuseArgs),
    /// Plot the mean learning curve of one or more run directories.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Quick,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Saf,
    Legacy,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "point-mass")]
    env: String,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// oracle, skip, myopic, equal, mistake or noisy.
    #[arg(long, default_value = "oracle")]
    teacher: String,
    /// none, distill or contrast.
    #[arg(long, default_value = "contrast")]
    reed: String,
    /// Total preference queries.
    #[arg(long)]
    feedback: Option<usize>,
    #[arg(long)]
    queries_per_session: Option<usize>,
    /// Policy steps between feedback sessions.
    #[arg(long)]
    session_interval: Option<usize>,
    /// Policy-training steps after pretraining.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    segment_len: Option<usize>,
    #[arg(long)]
    episode_len: Option<usize>,
    #[arg(long, value_enum)]
    reward_arch: Option<Arch>,
    /// Train on the true reward instead (upper-bound reference run).
    #[arg(long)]
    ground_truth: bool,
    /// Collect labels through the HTTP API.
    #[arg(long)]
    human: bool,
    #[arg(long, env = "REED_PBRL_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReuseArgs {
    /// Run directory, its checkpoint directory, or a reward directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Used when no run manifest is found next to the checkpoint.
    #[arg(long, default_value = "point-mass")]
    env: String,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "learning_curve.svg")]
    out: PathBuf,
}

fn build_config(a: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut c = match a.preset {
        Preset::Desk => ExperimentConfig::desk(&a.env, a.seed)?,
        Preset::Quick => ExperimentConfig::quick(&a.env, a.seed)?,
    };
    c.teacher.strategy = a.teacher.parse::<Strategy>()?;
    c.reed.mode = a.reed.parse::<ReedMode>()?;
    if let Some(v) = a.feedback {
        c.feedback = v;
    }
    if let Some(v) = a.queries_per_session {
        c.queries_per_session = v;
    }
    if let Some(v) = a.session_interval {
        c.session_interval = v;
    }
    if let Some(v) = a.steps {
        c.total_steps = v;
    }
    if let Some(v) = a.pretrain_steps {
        c.pretrain.steps = v;
        c.pretrain.seed_steps = c.pretrain.seed_steps.min(v);
    }
    if let Some(v) = a.segment_len {
        c.segment_len = v;
    }
    if a.episode_len.is_some() {
        c.episode_len = a.episode_len;
    }
    if let Some(arch) = a.reward_arch {
        c.reward_net.arch = match arch {
            Arch::Saf => RewardArch::Saf,
            Arch::Legacy => RewardArch::Legacy,
        };
    }
    if a.ground_truth {
        c.reward_source = RewardSource::GroundTruth;
    }
    c.human = a.human;
    c.out_dir = Some(a.out.clone());
    c.validate()?;
    Ok(c)
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let config = build_config(&a)?;
    let out = if config.human {
        let (hub, mut teacher) = server::feedback_channel();
        let handle = server::serve(hub, a.port)?;
        eprintln!("label queries at http://{}/api/session/current", handle.addr);
        reed_pbrl::run_experiment(&config, Some(&mut teacher))?
    } else {
        reed_pbrl::run_experiment(&config, None)?
    };
    println!(
        "{}: {} labels, {} discarded, final return {:.3}, {:.1}s",
        a.out.display(),
        out.dataset.len(),
        out.discarded,
        final_return(&out.log).unwrap_or(f64::NAN),
        out.wall_clock_secs
    );
    Ok(())
}

/// Config recorded next to a checkpoint, searching up two levels.
fn manifest_config(start: &Path) -> anyhow::Result<Option<ExperimentConfig>> {
    for dir in start.ancestors().take(3) {
        let path = dir.join(output::MANIFEST);
        if path.is_file() {
            let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            return Ok(Some(serde_json::from_value(v["config"].clone())?));
        }
    }
    Ok(None)
}

fn reuse(a: ReuseArgs) -> anyhow::Result<()> {
    let mut config = match manifest_config(&a.checkpoint)? {
        Some(c) => c,
        None => ExperimentConfig::desk(&a.env, 0)?,
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.total_steps = s;
    }
    config.out_dir = None;
    config.human = false;
    let out = reed_pbrl::reuse_reward(&a.checkpoint, &config)?;
    if let Some(dir) = &a.out {
        output::emit_outputs(&out.log, dir)?;
    }
    println!(
        "reuse: final return {:.3}, {:.1}s",
        final_return(&out.log).unwrap_or(f64::NAN),
        out.wall_clock_secs
    );
    Ok(())
}

fn plot(a: PlotArgs) -> anyhow::Result<()> {
    let runs: Vec<&Path> = a.runs.iter().map(PathBuf::as_path).collect();
    let curve = output::plot_runs(&runs, &a.out)?;
    if curve.is_empty() {
        bail!("no training episodes found in the given runs");
    }
    println!("{} points written to {}", curve.len(), a.out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Reuse(a) => reuse(a),
        Command::Plot(a) => plot(a),
    }
}
