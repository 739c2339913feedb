//! Experiment harness: key=value config files with line-anchored errors,
//! built-in presets, multi-seed training fan-out with per-seed artifacts,
//! and aggregation into a report with Student-t confidence intervals and
//! speedup ratios.

use crate::a2c::{evaluate, Hyperparameters, RunResult, StepStats, Trainer, Variant, A2cError,
                 DEFAULT_MAX_STEPS, SOLVE_WINDOW};
use crate::envs::make_env;
use rand::rngs::StdRng;
use rand::SeedableRng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}:{line}: {msg}")]
    Config { path: String, line: usize, msg: String },
    #[error("{path}: missing required key '{key}'")]
    MissingKey { path: String, key: &'static str },
    #[error("unknown environment '{0}' (expected cartpole or energy-mountain-car)")]
    UnknownEnv(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("confidence interval needs at least two samples, got {0}")]
    InsufficientSamples(usize),
    #[error(transparent)]
    A2c(#[from] A2cError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: String,
    pub variant: Variant,
    pub hp: Hyperparameters,
    pub seeds: Vec<u64>,
    pub max_steps: u64,
    /// Defaults to the environment's own threshold when absent.
    pub solve_threshold: Option<f64>,
    pub window: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if make_env(&self.env).is_none() {
            return Err(HarnessError::UnknownEnv(self.env.clone()));
        }
        self.hp.validate(self.variant)?;
        Ok(())
    }

    pub fn resolved_threshold(&self) -> f64 {
        self.solve_threshold.unwrap_or_else(|| {
            make_env(&self.env).expect("validated env").solve_threshold()
        })
    }
}

/// Built-in tuned configurations.
pub const PRESET_NAMES: [&str; 4] = [
    "cartpole-a2c",
    "cartpole-nog-te",
    "emc-a2c",
    "emc-nog-te",
];

pub fn preset(name: &str) -> Result<ExperimentConfig, HarnessError> {
    let (env, variant, hp) = match name {
        "cartpole-a2c" => (
            "cartpole",
            Variant::A2c,
            Hyperparameters {
                gamma: 0.99,
                n_steps: 64,
                lr: 0.0009591,
                mcn: 0.3898,
                alpha: Some(0.0006986),
                beta: Some(0.5996),
                target_entropy: None,
            },
        ),
        "cartpole-nog-te" => (
            "cartpole",
            Variant::A2cNogTe,
            Hyperparameters {
                gamma: 0.99,
                n_steps: 64,
                lr: 0.001642,
                mcn: 1.3569,
                alpha: None,
                beta: None,
                target_entropy: Some(0.166),
            },
        ),
        "emc-a2c" => (
            "energy-mountain-car",
            Variant::A2c,
            Hyperparameters {
                gamma: 0.999,
                n_steps: 16,
                lr: 0.0007139,
                mcn: 1.419,
                alpha: Some(0.0003160),
                beta: Some(0.1833),
                target_entropy: None,
            },
        ),
        "emc-nog-te" => (
            "energy-mountain-car",
            Variant::A2cNogTe,
            Hyperparameters {
                gamma: 0.999,
                n_steps: 64,
                lr: 0.00003798,
                mcn: 0.2302,
                alpha: None,
                beta: None,
                target_entropy: Some(0.0739),
            },
        ),
        other => return Err(HarnessError::UnknownPreset(other.to_string())),
    };
    Ok(ExperimentConfig {
        env: env.to_string(),
        variant,
        hp,
        seeds: (0..=9).collect(),
        max_steps: DEFAULT_MAX_STEPS,
        solve_threshold: None,
        window: SOLVE_WINDOW,
    })
}

/// Parse "a..b" (inclusive), "a,b,c", or a single integer.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(|_| format!("bad seed range start '{a}'"))?;
        let hi: u64 = b.trim().parse().map_err(|_| format!("bad seed range end '{b}'"))?;
        if hi < lo {
            return Err(format!("empty seed range '{text}'"));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("bad seed '{s}'")))
        .collect()
}

/// Parse a key=value config file. '#' starts a comment; blank lines are
/// skipped; `preset` loads a base configuration that later keys override.
pub fn parse_config_str(text: &str, path: &str) -> Result<ExperimentConfig, HarnessError> {
    let err = |line: usize, msg: String| HarnessError::Config {
        path: path.to_string(),
        line,
        msg,
    };
    let mut env: Option<String> = None;
    let mut variant: Option<Variant> = None;
    let mut gamma = None;
    let mut n_steps = None;
    let mut lr = None;
    let mut mcn = None;
    let mut alpha = None;
    let mut beta = None;
    let mut target_entropy = None;
    let mut seeds: Option<Vec<u64>> = None;
    let mut max_steps: Option<u64> = None;
    let mut solve_threshold = None;
    let mut window: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected key = value, got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(err(line_no, format!("key '{key}' has no value")));
        }
        let bad_num = |k: &str, v: &str| err(line_no, format!("key '{k}' has non-numeric value '{v}'"));
        match key {
            "preset" => {
                let base = preset(value).map_err(|e| err(line_no, e.to_string()))?;
                env = Some(base.env);
                variant = Some(base.variant);
                gamma = Some(base.hp.gamma);
                n_steps = Some(base.hp.n_steps);
                lr = Some(base.hp.lr);
                mcn = Some(base.hp.mcn);
                alpha = base.hp.alpha;
                beta = base.hp.beta;
                target_entropy = base.hp.target_entropy;
                seeds = Some(base.seeds);
                max_steps = Some(base.max_steps);
                window = Some(base.window);
            }
            "env" => env = Some(value.to_string()),
            "variant" => {
                variant = Some(
                    Variant::from_cli_name(value)
                        .ok_or_else(|| err(line_no, format!("unknown variant '{value}'")))?,
                )
            }
            "gamma" => gamma = Some(value.parse().map_err(|_| bad_num(key, value))?),
            "n_steps" => n_steps = Some(value.parse().map_err(|_| bad_num(key, value))?),
            "lr" => lr = Some(value.parse().map_err(|_| bad_num(key, value))?),
            "mcn" => mcn = Some(value.parse().map_err(|_| bad_num(key, value))?),
            "alpha" => alpha = Some(value.parse().map_err(|_| bad_num(key, value))?),
            "beta" => beta = Some(value.parse().map_err(|_| bad_num(key, value))?),
            "target_entropy" => {
                target_entropy = Some(value.parse().map_err(|_| bad_num(key, value))?)
            }
            "seeds" => seeds = Some(parse_seeds(value).map_err(|m| err(line_no, m))?),
            "max_steps" => max_steps = Some(value.parse().map_err(|_| bad_num(key, value))?),
            "solve_threshold" => {
                solve_threshold = Some(value.parse().map_err(|_| bad_num(key, value))?)
            }
            "window" => window = Some(value.parse().map_err(|_| bad_num(key, value))?),
            other => return Err(err(line_no, format!("unknown key '{other}'"))),
        }
    }

    let missing = |key: &'static str| HarnessError::MissingKey {
        path: path.to_string(),
        key,
    };
    let cfg = ExperimentConfig {
        env: env.ok_or_else(|| missing("env"))?,
        variant: variant.ok_or_else(|| missing("variant"))?,
        hp: Hyperparameters {
            gamma: gamma.ok_or_else(|| missing("gamma"))?,
            n_steps: n_steps.ok_or_else(|| missing("n_steps"))?,
            lr: lr.ok_or_else(|| missing("lr"))?,
            mcn: mcn.ok_or_else(|| missing("mcn"))?,
            alpha,
            beta,
            target_entropy,
        },
        seeds: seeds.unwrap_or_else(|| (0..=9).collect()),
        max_steps: max_steps.unwrap_or(DEFAULT_MAX_STEPS),
        solve_threshold,
        window: window.unwrap_or(SOLVE_WINDOW),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, &path.display().to_string())
}

/// One seed's training outcome.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub solved: bool,
    pub steps_to_solve: Option<u64>,
    pub wall_s: f64,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub env: String,
    pub variant: Variant,
    pub outcomes: Vec<SeedOutcome>,
}

fn train_one_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    run_dir: &Path,
) -> Result<SeedOutcome, HarnessError> {
    let env = make_env(&cfg.env).ok_or_else(|| HarnessError::UnknownEnv(cfg.env.clone()))?;
    let mut trainer = Trainer::new(env, cfg.hp.clone(), cfg.variant, seed)?;
    let result: RunResult =
        trainer.train_until_solved(cfg.resolved_threshold(), cfg.window, cfg.max_steps)?;

    let seed_dir = run_dir.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&seed_dir)?;
    let mut metrics = String::with_capacity(result.metrics.len() * 64);
    metrics.push_str(StepStats::CSV_HEADER);
    metrics.push('\n');
    for row in &result.metrics {
        metrics.push_str(&row.csv_row());
        metrics.push('\n');
    }
    std::fs::write(seed_dir.join("metrics.csv"), metrics)?;
    trainer.net.save(&seed_dir.join("checkpoint.txt")).map_err(A2cError::from)?;

    Ok(SeedOutcome {
        seed,
        solved: result.solved,
        steps_to_solve: result.steps_to_solve,
        wall_s: result.wall_s,
    })
}

/// Train every seed (each on its own thread), writing per-seed metrics and
/// checkpoints under `out/<env>-<variant>/seed-N/` and appending one row per
/// seed to the shared `out/summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let run_dir = out.join(format!("{}-{}", cfg.env, cfg.variant.cli_name()));
    std::fs::create_dir_all(&run_dir)?;

    let mut outcomes: Vec<Result<SeedOutcome, HarnessError>> = Vec::new();
    let run_dir_ref = &run_dir;
    std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| s.spawn(move || train_one_seed(cfg, seed, run_dir_ref)))
            .collect();
        for h in handles {
            outcomes.push(h.join().expect("seed worker panicked"));
        }
    });
    let outcomes: Vec<SeedOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;

    append_summary(out, &cfg.env, cfg.variant, &outcomes)?;
    Ok(ExperimentResult {
        env: cfg.env.clone(),
        variant: cfg.variant,
        outcomes,
    })
}

pub const SUMMARY_HEADER: &str = "env,variant,seed,solved,steps_to_solve,wall_s";

fn append_summary(
    out: &Path,
    env: &str,
    variant: Variant,
    outcomes: &[SeedOutcome],
) -> Result<(), HarnessError> {
    let path = out.join("summary.csv");
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)?;
    if fresh {
        writeln!(file, "{SUMMARY_HEADER}")?;
    }
    for o in outcomes {
        let steps = o.steps_to_solve.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            file,
            "{},{},{},{},{},{:.3}",
            env,
            variant.cli_name(),
            o.seed,
            o.solved,
            steps,
            o.wall_s
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub env: String,
    pub variant: String,
    pub seed: u64,
    pub solved: bool,
    pub steps_to_solve: Option<u64>,
    pub wall_s: f64,
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let label = path.display().to_string();
    let err = |line: usize, msg: String| HarnessError::Config {
        path: label.clone(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line.trim() != SUMMARY_HEADER {
                return Err(err(1, format!("unexpected header '{line}'")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(err(idx + 1, format!("expected 6 fields, got {}", parts.len())));
        }
        rows.push(SummaryRow {
            env: parts[0].to_string(),
            variant: parts[1].to_string(),
            seed: parts[2]
                .parse()
                .map_err(|_| err(idx + 1, format!("bad seed '{}'", parts[2])))?,
            solved: parts[3]
                .parse()
                .map_err(|_| err(idx + 1, format!("bad solved flag '{}'", parts[3])))?,
            steps_to_solve: if parts[4].is_empty() {
                None
            } else {
                Some(
                    parts[4]
                        .parse()
                        .map_err(|_| err(idx + 1, format!("bad steps '{}'", parts[4])))?,
                )
            },
            wall_s: parts[5]
                .parse()
                .map_err(|_| err(idx + 1, format!("bad wall_s '{}'", parts[5])))?,
        });
    }
    Ok(rows)
}

/// Mean and 95% half-width from a Student-t interval. All-equal samples get
/// a zero half-width; fewer than two samples are an error.
pub fn confidence_interval(samples: &[f64]) -> Result<(f64, f64), HarnessError> {
    let n = samples.len();
    if n < 2 {
        return Err(HarnessError::InsufficientSamples(n));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var <= 0.0 {
        return Ok((mean, 0.0));
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid t distribution")
        .inverse_cdf(0.975);
    Ok((mean, t * (var / n as f64).sqrt()))
}

/// Ratio of baseline mean to variant mean, rounded to two decimals.
pub fn speedup(baseline_mean: f64, variant_mean: f64) -> f64 {
    (baseline_mean / variant_mean * 100.0).round() / 100.0
}

pub const REPORT_HEADER: &str = "env,variant,n,mean,ci95,speedup_vs_a2c";

/// Aggregate summary rows into the report table. Returns the CSV text plus
/// human-readable notes (e.g. unsolved seeds excluded from the statistics).
pub fn build_report(rows: &[SummaryRow]) -> (String, Vec<String>) {
    let variant_order = ["a2c", "a2c-nog", "a2c-te", "a2c-nog-te"];
    let mut groups: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.env.clone(), r.variant.clone());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    groups.sort_by(|a, b| {
        let rank = |v: &str| variant_order.iter().position(|&x| x == v).unwrap_or(99);
        a.0.cmp(&b.0).then(rank(&a.1).cmp(&rank(&b.1)))
    });

    let mean_of = |env: &str, variant: &str| -> Option<f64> {
        let solved: Vec<f64> = rows
            .iter()
            .filter(|r| r.env == env && r.variant == variant && r.solved)
            .filter_map(|r| r.steps_to_solve.map(|s| s as f64))
            .collect();
        (!solved.is_empty()).then(|| solved.iter().sum::<f64>() / solved.len() as f64)
    };

    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    let mut notes = Vec::new();
    for (env, variant) in &groups {
        let all: Vec<&SummaryRow> = rows
            .iter()
            .filter(|r| &r.env == env && &r.variant == variant)
            .collect();
        let solved: Vec<f64> = all
            .iter()
            .filter(|r| r.solved)
            .filter_map(|r| r.steps_to_solve.map(|s| s as f64))
            .collect();
        let unsolved = all.len() - solved.len();
        if unsolved > 0 {
            notes.push(format!(
                "{env}/{variant}: {unsolved} of {} seeds unsolved; excluded from mean and CI",
                all.len()
            ));
        }
        let n = solved.len();
        let (mean_txt, ci_txt) = match n {
            0 => (String::new(), String::new()),
            1 => (format!("{:.2}", solved[0]), String::new()),
            _ => {
                let (mean, half) = confidence_interval(&solved).expect("n >= 2");
                (format!("{mean:.2}"), format!("{half:.2}"))
            }
        };
        let speedup_txt = match (mean_of(env, "a2c"), mean_of(env, variant)) {
            (Some(base), Some(this)) => format!("{:.2}", speedup(base, this)),
            _ => String::new(),
        };
        csv.push_str(&format!(
            "{env},{variant},{n},{mean_txt},{ci_txt},{speedup_txt}\n"
        ));
    }
    (csv, notes)
}

/// Find every summary.csv at or below `dir`.
pub fn find_summaries(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.csv") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Evaluate a saved checkpoint: run `episodes` greedy-free (sampled) episodes
/// and return the per-episode returns.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    env_name: &str,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, HarnessError> {
    let net = crate::nets::ActorCriticNet::load(checkpoint).map_err(A2cError::from)?;
    let mut env = make_env(env_name).ok_or_else(|| HarnessError::UnknownEnv(env_name.into()))?;
    let mut rng = StdRng::seed_from_u64(seed);
    Ok(evaluate(&net, env.as_mut(), episodes, &mut rng)?)
}
