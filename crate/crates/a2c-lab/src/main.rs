use a2c_lab::a2c::{evaluate, Trainer, Variant};
use a2c_lab::envs::make_env;
use a2c_lab::harness::{
    build_report, evaluate_checkpoint, find_summaries, parse_config_file, parse_seeds, preset,
    read_summary_csv, run_experiment, ExperimentConfig, PRESET_NAMES, REPORT_HEADER,
};
use a2c_lab::hpo::{
    point_to_hyperparameters, trial_seed, SearchSpace, Study, StudySettings, TrialOutcome,
};
use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "a2c-lab",
    version,
    about = "Actor-critic training lab with gradient routing, entropy-floored \
             sampling, and TPE hyperparameter search"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one variant on one environment across seeds.
    Train(TrainArgs),
    /// Run a TPE study with successive-halving pruning.
    Hpo(HpoArgs),
    /// Roll out a saved checkpoint and report episode returns.
    Eval(EvalArgs),
    /// Aggregate summary.csv files into report.csv.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Key=value config file; see configs/ for examples.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: cartpole-a2c, cartpole-nog-te, emc-a2c, emc-nog-te.
    #[arg(long)]
    preset: Option<String>,
    /// Override the environment (cartpole, energy-mountain-car).
    #[arg(long)]
    env: Option<String>,
    /// Override the variant (a2c, a2c-nog, a2c-te, a2c-nog-te).
    #[arg(long)]
    variant: Option<String>,
    /// Seeds as an inclusive range "0..9" or a list "0,1,2".
    #[arg(long)]
    seeds: Option<String>,
    /// Override the optimizer-step budget.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Output directory for metrics, checkpoints, and summary.csv.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct HpoArgs {
    /// Environment to tune on.
    #[arg(long)]
    env: String,
    /// Variant to tune (a2c, a2c-nog, a2c-te, a2c-nog-te).
    #[arg(long)]
    variant: String,
    /// Number of trials.
    #[arg(long, default_value_t = 30)]
    trials: usize,
    /// Optimizer-step budget per trial.
    #[arg(long, default_value_t = 20_000)]
    budget: u64,
    /// Concurrent trials (1 reproduces exactly).
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Study seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for study artifacts.
    #[arg(long, default_value = "study")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment to roll out in.
    #[arg(long)]
    env: String,
    /// Number of evaluation episodes.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// RNG seed for action sampling and resets.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing summary.csv files (searched recursively).
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Hpo(args) => cmd_hpo(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Report(args) => cmd_report(args),
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg: ExperimentConfig = match (&args.config, &args.preset) {
        (Some(path), _) => parse_config_file(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            // With no config, fall back to the preset matching env+variant.
            let env = args.env.as_deref().unwrap_or("cartpole");
            let variant = args.variant.as_deref().unwrap_or("a2c");
            let name = match (env, variant) {
                ("cartpole", "a2c") => "cartpole-a2c",
                ("cartpole", "a2c-nog-te") => "cartpole-nog-te",
                ("energy-mountain-car", "a2c") => "emc-a2c",
                ("energy-mountain-car", "a2c-nog-te") => "emc-nog-te",
                _ => bail!(
                    "no tuned preset for {env}/{variant}; pass --config with explicit \
                     hyperparameters (presets: {})",
                    PRESET_NAMES.join(", ")
                ),
            };
            preset(name)?
        }
    };
    if let Some(env) = args.env {
        cfg.env = env;
    }
    if let Some(v) = &args.variant {
        cfg.variant =
            Variant::from_cli_name(v).ok_or_else(|| anyhow!("unknown variant '{v}'"))?;
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = parse_seeds(seeds).map_err(|m| anyhow!(m))?;
    }
    if let Some(ms) = args.max_steps {
        cfg.max_steps = ms;
    }
    cfg.validate()?;

    println!(
        "training {} / {} on {} seed(s), budget {} steps",
        cfg.env,
        cfg.variant.cli_name(),
        cfg.seeds.len(),
        cfg.max_steps
    );
    let result = run_experiment(&cfg, &args.out)?;
    for o in &result.outcomes {
        match o.steps_to_solve {
            Some(steps) => println!("  seed {}: solved at step {} ({:.1}s)", o.seed, steps, o.wall_s),
            None => println!("  seed {}: not solved within budget ({:.1}s)", o.seed, o.wall_s),
        }
    }
    let solved = result.outcomes.iter().filter(|o| o.solved).count();
    println!(
        "{}/{} seeds solved; summary appended to {}",
        solved,
        result.outcomes.len(),
        args.out.join("summary.csv").display()
    );
    Ok(())
}

fn cmd_hpo(args: HpoArgs) -> anyhow::Result<()> {
    let variant = Variant::from_cli_name(&args.variant)
        .ok_or_else(|| anyhow!("unknown variant '{}'", args.variant))?;
    make_env(&args.env).ok_or_else(|| anyhow!("unknown environment '{}'", args.env))?;

    let space = SearchSpace::for_variant(variant);
    let settings = StudySettings::new(args.trials, args.budget, args.parallelism, args.seed);
    let study = Study::new(space, settings.clone());
    let env_name = args.env.clone();

    println!(
        "tuning {} / {} for {} trials ({} steps each, parallelism {})",
        args.env, args.variant, args.trials, args.budget, args.parallelism
    );
    let report = study.run(|id, params, handle| {
        let hp = point_to_hyperparameters(variant, params)?;
        let seed = trial_seed(settings.seed, id);
        let env = make_env(&env_name).expect("environment checked above");
        let mut trainer = Trainer::new(env, hp, variant, seed).map_err(|e| e.to_string())?;
        let mut step = 0u64;
        while step < settings.budget {
            trainer.train_step().map_err(|e| e.to_string())?;
            step += 1;
            if step % settings.report_interval == 0 {
                let value = trainer
                    .reward_ema()
                    .or_else(|| trainer.mean_recent_reward(settings.eval_episodes))
                    .unwrap_or(0.0);
                if handle.report(step, value).map_err(|e| e.to_string())? {
                    println!("  trial {id:03}: pruned at step {step}");
                    return Ok(TrialOutcome::Pruned);
                }
            }
        }
        let mut eval_env = make_env(&env_name).expect("environment checked above");
        let mut rng = StdRng::seed_from_u64(trial_seed(seed, usize::MAX));
        let returns = evaluate(
            &trainer.net,
            eval_env.as_mut(),
            settings.eval_episodes,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let objective = returns.iter().sum::<f64>() / returns.len() as f64;
        println!("  trial {id:03}: objective {objective:.3}");
        Ok(TrialOutcome::Complete(objective))
    })?;

    study.persist(&report, &args.out)?;
    match &report.best {
        Some(best) => {
            println!(
                "best trial {} with objective {:.3}:",
                best.id,
                best.objective.expect("complete trial")
            );
            for (name, value) in &best.params {
                println!("  {name} = {value}");
            }
        }
        None => println!("warning: no trial completed (all pruned or failed)"),
    }
    println!("study artifacts written to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let returns = evaluate_checkpoint(&args.checkpoint, &args.env, args.episodes, args.seed)
        .with_context(|| format!("evaluating {}", args.checkpoint.display()))?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let min = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} episodes: mean return {mean:.3} (min {min:.3}, max {max:.3})",
        returns.len()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let summaries = find_summaries(&args.out)?;
    if summaries.is_empty() {
        bail!("no summary.csv found under {}", args.out.display());
    }
    let mut rows = Vec::new();
    for path in &summaries {
        rows.extend(read_summary_csv(path)?);
    }
    let (csv, notes) = build_report(&rows);
    let path = args.out.join("report.csv");
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    for note in &notes {
        println!("note: {note}");
    }
    println!("report written to {} ({REPORT_HEADER})", path.display());
    Ok(())
}
