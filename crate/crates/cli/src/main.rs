//! clipstop: synthesize datasets, train the sequential clip-selection agent,
//! evaluate it against the benchmark policies, and export figure data.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 missing capability (e.g. a baseline that needs clip scores).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clipstop_core::ckpt::Checkpoint;
use clipstop_core::data::{
    generate_synthetic, load_dataset, write_dataset, DatasetManifest, ViewLabel,
};
use clipstop_core::eval::{EvalRequest, PolicyKind, RlArtifacts};
use clipstop_core::nets::AgentMode;
use clipstop_core::pipeline;
use clipstop_core::{Error, Result};

use config::{load_config, write_snapshot, RunConfig, SynthSection};

#[derive(Parser)]
#[command(name = "clipstop", version, about = "Cost-aware sequential clip selection")]
struct Cli {
    /// TOML run configuration; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
    /// Train an agent and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate policies and write summary, trace and figure CSVs.
    Eval(EvalArgs),
    /// Print dataset statistics.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Preset: informative-a4c, identical-views, custom.
    #[arg(long)]
    preset: Option<String>,
    /// Embedding dimension (required with --preset custom).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_studies: Option<usize>,
    #[arg(long)]
    disease_fraction: Option<f64>,
    /// Generator seed (independent of the master seed).
    #[arg(long)]
    synth_seed: Option<u64>,
    /// Seed of the shared embedding geometry.
    #[arg(long)]
    direction_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory for checkpoint.bin, train_log.csv, config.snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Agent mode: full, ab1, ab2.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lambda_cost: Option<f64>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    #[arg(long)]
    num_envs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory for eval_summary.csv, traces.csv, figure CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint of the full-mode agent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    checkpoint_ab1: Option<PathBuf>,
    #[arg(long)]
    checkpoint_ab2: Option<PathBuf>,
    /// Comma-separated policies (default: everything the inputs support).
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// Evaluation repeats.
    #[arg(long)]
    seeds: Option<usize>,
    /// Greedy instead of sampled agent actions.
    #[arg(long)]
    greedy: bool,
    /// Export mean-prediction-vs-clips data.
    #[arg(long)]
    export_fig2: bool,
    /// Export per-study selection-map data.
    #[arg(long)]
    export_fig3: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) => 2,
                Error::Capability(_) => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Eval(args) => cmd_eval(cfg, args),
        Command::Inspect(args) => cmd_inspect(cfg, args),
    }
}

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("{what} is required (flag or config file)")))
}

fn cmd_synth(mut cfg: RunConfig, args: SynthArgs) -> Result<()> {
    if let Some(p) = args.preset {
        cfg.synth.preset = Some(p);
    }
    if let Some(d) = args.d {
        cfg.synth.d = Some(d);
    }
    if let Some(n) = args.n_studies {
        cfg.synth.n_studies = Some(n);
    }
    if let Some(f) = args.disease_fraction {
        cfg.synth.disease_fraction = Some(f);
    }
    if let Some(s) = args.synth_seed {
        cfg.synth.seed = Some(s);
    }
    if let Some(s) = args.direction_seed {
        cfg.synth.direction_seed = Some(s);
    }
    let out = require(args.out.or(cfg.data.out_file.clone().map(PathBuf::from)), "--out")?;
    let synth_cfg = cfg.synth.resolve()?;
    let manifest = generate_synthetic(&synth_cfg)?;
    write_dataset(&manifest, &out)?;

    let preset = cfg.synth.preset.clone().unwrap_or_else(|| "informative-a4c".into());
    cfg.synth = SynthSection::record(&synth_cfg, &preset);
    cfg.data.out_file = Some(out.display().to_string());
    write_snapshot(&cfg, &snapshot_path_for(&out))?;
    println!(
        "wrote {} studies ({} positive, {} clips) to {}",
        manifest.studies.len(),
        manifest.count_label(1),
        manifest.total_clips(),
        out.display()
    );
    Ok(())
}

fn snapshot_path_for(dataset_out: &Path) -> PathBuf {
    let mut name = dataset_out.file_name().unwrap_or_default().to_os_string();
    name.push(".snapshot");
    dataset_out.with_file_name(name)
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    if let Some(mode) = &args.mode {
        cfg.ppo.mode = mode.parse::<AgentMode>()?;
    }
    if let Some(t) = args.timesteps {
        cfg.ppo.total_timesteps = t;
    }
    if let Some(lr) = args.lr {
        cfg.ppo.learning_rate = lr;
    }
    if let Some(h) = args.hidden {
        cfg.ppo.hidden_width = h;
    }
    if let Some(l) = args.lambda_cost {
        cfg.ppo.lambda_cost = l;
    }
    if let Some(e) = args.entropy_coef {
        cfg.ppo.entropy_coef = e;
    }
    if let Some(n) = args.num_envs {
        cfg.ppo.num_envs = n;
    }
    let dataset =
        require(args.dataset.or(cfg.data.dataset.clone().map(PathBuf::from)), "--dataset")?;
    let out_dir = require(args.out.or(cfg.out_dir.clone().map(PathBuf::from)), "--out")?;
    cfg.ppo.validate()?;

    let manifest = load_dataset(&dataset)?;
    let (result, ckpt_path) =
        pipeline::run_training_to_dir(&manifest, &cfg.ppo, cfg.master_seed, &out_dir)?;

    cfg.data.dataset = Some(dataset.display().to_string());
    cfg.out_dir = Some(out_dir.display().to_string());
    write_snapshot(&cfg, &out_dir.join("config.snapshot"))?;

    let last = result.log.last().expect("training produced no iterations");
    println!(
        "trained {} mode for {} timesteps ({} iterations); final mean episode reward {:.4}, length {:.2}",
        cfg.ppo.mode.as_str(),
        last.timesteps,
        last.iteration,
        last.mean_episode_reward,
        last.mean_episode_length
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("training log: {}", out_dir.join(pipeline::TRAIN_LOG_FILE).display());
    Ok(())
}

fn load_artifacts(path: &Path) -> Result<RlArtifacts> {
    let (nets, init, env) = Checkpoint::load(path)?.restore()?;
    Ok(RlArtifacts { nets, init, env })
}

fn cmd_eval(mut cfg: RunConfig, args: EvalArgs) -> Result<()> {
    let dataset = require(
        args.dataset
            .or(cfg.data.eval_dataset.clone().map(PathBuf::from))
            .or(cfg.data.dataset.clone().map(PathBuf::from)),
        "--dataset",
    )?;
    let out_dir = require(args.out.or(cfg.out_dir.clone().map(PathBuf::from)), "--out")?;
    if let Some(p) = &args.checkpoint {
        cfg.data.checkpoint = Some(p.display().to_string());
    }
    if let Some(p) = &args.checkpoint_ab1 {
        cfg.data.checkpoint_ab1 = Some(p.display().to_string());
    }
    if let Some(p) = &args.checkpoint_ab2 {
        cfg.data.checkpoint_ab2 = Some(p.display().to_string());
    }
    if let Some(p) = args.policies {
        cfg.eval.policies = Some(p);
    }
    if let Some(s) = args.seeds {
        cfg.eval.seeds = Some(s);
    }
    if args.greedy {
        cfg.eval.greedy = Some(true);
    }
    if args.export_fig2 {
        cfg.eval.export_fig2 = Some(true);
    }
    if args.export_fig3 {
        cfg.eval.export_fig3 = Some(true);
    }

    let manifest = load_dataset(&dataset)?;
    let rl_full =
        cfg.data.checkpoint.as_deref().map(|p| load_artifacts(Path::new(p))).transpose()?;
    let rl_ab1 =
        cfg.data.checkpoint_ab1.as_deref().map(|p| load_artifacts(Path::new(p))).transpose()?;
    let rl_ab2 =
        cfg.data.checkpoint_ab2.as_deref().map(|p| load_artifacts(Path::new(p))).transpose()?;

    let policies = match cfg.eval.policy_list()? {
        Some(p) => p,
        None => default_policies(&manifest, rl_full.is_some(), rl_ab1.is_some(), rl_ab2.is_some()),
    };
    if policies.is_empty() {
        return Err(Error::Config("no policies to evaluate".into()));
    }
    let settings = cfg.eval.settings()?;
    let request = EvalRequest {
        manifest: &manifest,
        policies: policies.clone(),
        rl_full,
        rl_ab1,
        rl_ab2,
        settings,
        master_seed: cfg.master_seed,
    };
    let output = pipeline::run_eval_to_dir(
        &request,
        &out_dir,
        cfg.eval.export_fig2.unwrap_or(false),
        cfg.eval.export_fig3.unwrap_or(false),
    )?;

    cfg.data.eval_dataset = Some(dataset.display().to_string());
    cfg.out_dir = Some(out_dir.display().to_string());
    cfg.eval.policies = Some(policies.iter().map(|p| p.name().to_string()).collect());
    write_snapshot(&cfg, &out_dir.join("config.snapshot"))?;

    println!("{:<14} {:>6} {:>6} {:>6} {:>8}", "policy", "sens", "spec", "auc", "cost%");
    for report in &output.reports {
        let m = report.mean();
        println!(
            "{:<14} {:>6.3} {:>6.3} {:>6.3} {:>8.2}",
            report.policy.name(),
            m.all.sensitivity,
            m.all.specificity,
            m.all.auc,
            m.all.cost_pct
        );
    }
    println!("reports under {}", out_dir.display());
    Ok(())
}

fn default_policies(
    manifest: &DatasetManifest,
    full: bool,
    ab1: bool,
    ab2: bool,
) -> Vec<PolicyKind> {
    let mut out = Vec::new();
    if manifest.all_clip_scores_present() {
        out.extend([
            PolicyKind::AllClips,
            PolicyKind::A4cClips,
            PolicyKind::SingleClip,
            PolicyKind::StdHeuristic,
        ]);
        if manifest.all_view_probs_present() {
            out.insert(1, PolicyKind::WeightedClips);
        }
    }
    if full {
        out.push(PolicyKind::RlFull);
        if manifest.all_clip_scores_present() {
            out.push(PolicyKind::RandomSample);
        }
    }
    if ab1 {
        out.push(PolicyKind::RlAb1);
    }
    if ab2 {
        out.push(PolicyKind::RlAb2);
    }
    out
}

fn cmd_inspect(cfg: RunConfig, args: InspectArgs) -> Result<()> {
    let dataset = require(args.dataset.or(cfg.data.dataset.map(PathBuf::from)), "--dataset")?;
    let manifest = load_dataset(&dataset)?;
    let n = manifest.studies.len();
    let clip_counts: Vec<usize> = manifest.studies.iter().map(|s| s.clips.len()).collect();
    let mut per_view = [0usize; 3];
    for s in &manifest.studies {
        for c in &s.clips {
            per_view[c.view.index()] += 1;
        }
    }
    let with_scores = manifest.studies.iter().filter(|s| s.has_clip_scores()).count();
    let with_probs = manifest.studies.iter().filter(|s| s.has_view_probs()).count();
    println!("dataset: {}", dataset.display());
    println!("D: {}", manifest.d);
    println!(
        "studies: {} ({} disease, {} control; prior {:.5}/{:.5})",
        n,
        manifest.count_label(1),
        manifest.count_label(0),
        manifest.class_prior[1],
        manifest.class_prior[0]
    );
    println!(
        "clips: {} total; per study min {} / mean {:.2} / max {}",
        manifest.total_clips(),
        clip_counts.iter().min().unwrap(),
        manifest.total_clips() as f64 / n as f64,
        clip_counts.iter().max().unwrap()
    );
    for view in ViewLabel::ALL {
        println!("  {}: {} clips", view, per_view[view.index()]);
    }
    println!("studies with clip scores: {with_scores}/{n}; with view probs: {with_probs}/{n}");
    Ok(())
}
