//! Hyperparameter search: Tree-structured Parzen Estimator suggestions over
//! the seven-dimension search space, successive-halving pruning fed by
//! reward EMAs reported every 1000 steps, and study bookkeeping with
//! JSON/CSV persistence.

use crate::a2c::{Hyperparameters, Variant};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Normal};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("search space has no dimensions")]
    EmptySpace,
    #[error("trial {trial}: report at step {step} is not a multiple of {interval}")]
    BadReportStep { trial: usize, step: u64, interval: u64 },
    #[error("trial {trial}: out-of-order report at step {step} (last was {last})")]
    OutOfOrderReport { trial: usize, step: u64, last: u64 },
    #[error("trial {id} failed: {msg}")]
    Trial { id: usize, msg: String },
    #[error("study io: {0}")]
    Io(#[from] std::io::Error),
    #[error("study serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// How one dimension is sampled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DimKind {
    Categorical(Vec<f64>),
    Uniform(f64, f64),
    LogUniform(f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub kind: DimKind,
}

impl Dimension {
    fn sample_uniform(&self, rng: &mut StdRng) -> f64 {
        match &self.kind {
            DimKind::Categorical(choices) => choices[rng.gen_range(0..choices.len())],
            DimKind::Uniform(lo, hi) => rng.gen_range(*lo..*hi),
            DimKind::LogUniform(lo, hi) => rng.gen_range(lo.ln()..hi.ln()).exp(),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        match &self.kind {
            DimKind::Categorical(choices) => choices.contains(&x),
            DimKind::Uniform(lo, hi) | DimKind::LogUniform(lo, hi) => (*lo..=*hi).contains(&x),
        }
    }
}

/// The tunable dimensions for one algorithm variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    /// Full seven-dimension table, filtered to the coefficients the variant
    /// actually uses.
    pub fn for_variant(variant: Variant) -> SearchSpace {
        let mut dims = vec![
            Dimension {
                name: "gamma".into(),
                kind: DimKind::Categorical(vec![0.9, 0.99, 0.999]),
            },
            Dimension {
                name: "n_steps".into(),
                kind: DimKind::Categorical(vec![8.0, 16.0, 32.0, 64.0]),
            },
            Dimension {
                name: "lr".into(),
                kind: DimKind::LogUniform(1e-5, 1e-2),
            },
            Dimension {
                name: "mcn".into(),
                kind: DimKind::Uniform(0.0, 2.0),
            },
        ];
        if variant.uses_alpha() {
            dims.push(Dimension {
                name: "alpha".into(),
                kind: DimKind::LogUniform(1e-4, 1e-1),
            });
        }
        if variant.uses_beta() {
            dims.push(Dimension {
                name: "beta".into(),
                kind: DimKind::Uniform(0.0, 1.0),
            });
        }
        if variant.uses_target_entropy() {
            dims.push(Dimension {
                name: "target_entropy".into(),
                kind: DimKind::Uniform(0.0, 0.2),
            });
        }
        SearchSpace { dims }
    }

    pub fn names(&self) -> Vec<&str> {
        self.dims.iter().map(|d| d.name.as_str()).collect()
    }
}

/// Convert a sampled point into training hyperparameters. Open-interval
/// bounds in the validator are respected by nudging edge samples inward.
pub fn point_to_hyperparameters(
    variant: Variant,
    params: &[(String, f64)],
) -> Result<Hyperparameters, String> {
    let get = |name: &str| params.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
    let gamma = get("gamma").ok_or("missing gamma")?;
    let n_steps = get("n_steps").ok_or("missing n_steps")? as usize;
    let lr = get("lr").ok_or("missing lr")?;
    let mcn = get("mcn").ok_or("missing mcn")?.clamp(1e-6, 2.0 - 1e-6);
    let alpha = variant
        .uses_alpha()
        .then(|| get("alpha").ok_or("missing alpha"))
        .transpose()?;
    let beta = variant
        .uses_beta()
        .then(|| get("beta").ok_or("missing beta"))
        .transpose()?
        .map(|b| b.clamp(1e-9, 1.0 - 1e-9));
    let target_entropy = variant
        .uses_target_entropy()
        .then(|| get("target_entropy").ok_or("missing target_entropy"))
        .transpose()?
        .map(|t| t.clamp(1e-9, 0.2 - 1e-9));
    Ok(Hyperparameters {
        gamma,
        n_steps,
        lr,
        mcn,
        alpha,
        beta,
        target_entropy,
    })
}

/// Tree-structured Parzen Estimator with pinned internals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tpe {
    pub n_startup: usize,
    pub gamma_quantile: f64,
    pub n_candidates: usize,
}

impl Default for Tpe {
    fn default() -> Self {
        Tpe {
            n_startup: 10,
            gamma_quantile: 0.25,
            n_candidates: 24,
        }
    }
}

/// Scott-like bandwidth scaled to the dimension range, floored so a tight
/// cluster of points still yields a usable kernel width.
fn kde_bandwidth(points: &[f64], range: f64) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<f64>() / n;
    let var = points.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scott = 1.06 * var.sqrt() * n.powf(-0.2);
    scott.max(0.05 * range)
}

/// Mean of Gaussian kernels centered at `points`.
fn kde_density(x: f64, points: &[f64], bw: f64) -> f64 {
    points
        .iter()
        .map(|&c| Normal::new(c, bw).expect("positive bandwidth").pdf(x))
        .sum::<f64>()
        / points.len() as f64
}

impl Tpe {
    /// Propose the next point. Uniform for the first `n_startup` completed
    /// trials; afterwards each dimension independently maximizes the
    /// good-to-bad density ratio over `n_candidates` draws from the good
    /// density.
    pub fn suggest(
        &self,
        space: &SearchSpace,
        history: &[(Vec<f64>, f64)],
        rng: &mut StdRng,
    ) -> Result<Vec<f64>, HpoError> {
        if space.dims.is_empty() {
            return Err(HpoError::EmptySpace);
        }
        if history.len() < self.n_startup {
            return Ok(space.dims.iter().map(|d| d.sample_uniform(rng)).collect());
        }
        let mut order: Vec<usize> = (0..history.len()).collect();
        order.sort_by(|&a, &b| {
            history[b].1.partial_cmp(&history[a].1).unwrap_or(std::cmp::Ordering::Equal)
        });
        let n_good = ((self.gamma_quantile * history.len() as f64).ceil() as usize)
            .clamp(1, history.len() - 1);
        let (good_idx, bad_idx) = order.split_at(n_good);

        let mut point = Vec::with_capacity(space.dims.len());
        for (d, dim) in space.dims.iter().enumerate() {
            let good: Vec<f64> = good_idx.iter().map(|&i| history[i].0[d]).collect();
            let bad: Vec<f64> = bad_idx.iter().map(|&i| history[i].0[d]).collect();
            point.push(self.suggest_dim(dim, &good, &bad, rng));
        }
        Ok(point)
    }

    fn suggest_dim(&self, dim: &Dimension, good: &[f64], bad: &[f64], rng: &mut StdRng) -> f64 {
        match &dim.kind {
            DimKind::Categorical(choices) => {
                let k = choices.len() as f64;
                let weight = |values: &[f64], c: f64| {
                    let count = values.iter().filter(|&&v| v == c).count() as f64;
                    (count + 1.0) / (values.len() as f64 + k)
                };
                let l: Vec<f64> = choices.iter().map(|&c| weight(good, c)).collect();
                let g: Vec<f64> = choices.iter().map(|&c| weight(bad, c)).collect();
                let mut best = (f64::NEG_INFINITY, choices[0]);
                for _ in 0..self.n_candidates {
                    let idx = sample_weighted(&l, rng);
                    let score = l[idx] / g[idx];
                    if score > best.0 {
                        best = (score, choices[idx]);
                    }
                }
                best.1
            }
            DimKind::Uniform(lo, hi) => {
                self.suggest_numeric(*lo, *hi, good, bad, rng)
            }
            DimKind::LogUniform(lo, hi) => {
                let tf = |v: &[f64]| v.iter().map(|x| x.ln()).collect::<Vec<f64>>();
                // exp(ln(hi)) can land one ulp above hi; clamp in raw space.
                self.suggest_numeric(lo.ln(), hi.ln(), &tf(good), &tf(bad), rng)
                    .exp()
                    .clamp(*lo, *hi)
            }
        }
    }

    fn suggest_numeric(
        &self,
        lo: f64,
        hi: f64,
        good: &[f64],
        bad: &[f64],
        rng: &mut StdRng,
    ) -> f64 {
        let range = hi - lo;
        let bw_l = kde_bandwidth(good, range);
        let bw_g = kde_bandwidth(bad, range);
        let mut best = (f64::NEG_INFINITY, 0.5 * (lo + hi));
        for _ in 0..self.n_candidates {
            let center = good[rng.gen_range(0..good.len())];
            let z: f64 = rng.sample(StandardNormal);
            let x = (center + bw_l * z).clamp(lo, hi);
            let l = kde_density(x, good, bw_l);
            let g = if bad.is_empty() {
                1.0 / range
            } else {
                kde_density(x, bad, bw_g)
            };
            let score = l / g.max(f64::MIN_POSITIVE);
            if score > best.0 {
                best = (score, x);
            }
        }
        best.1
    }
}

fn sample_weighted(weights: &[f64], rng: &mut StdRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Linear-interpolation quantile of an unsorted sample.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Successive-halving pruner: rungs at `interval * eta^j`; at each rung a
/// report is pruned when it falls below the top 1/eta fraction of the values
/// already recorded there. Decisions use whatever rung data exists at the
/// time (asynchronous semantics).
#[derive(Debug)]
pub struct ShpPruner {
    eta: u64,
    interval: u64,
    rungs: BTreeMap<u64, Vec<f64>>,
    last_step: BTreeMap<usize, u64>,
}

impl ShpPruner {
    pub fn new(eta: u64, interval: u64) -> Self {
        assert!(eta >= 2 && interval > 0);
        ShpPruner {
            eta,
            interval,
            rungs: BTreeMap::new(),
            last_step: BTreeMap::new(),
        }
    }

    fn is_rung(&self, step: u64) -> bool {
        let mut rung = self.interval;
        while rung < step {
            rung *= self.eta;
        }
        rung == step
    }

    /// Record `value` for `trial` at `step`; returns whether the trial
    /// should be pruned. Never prunes off-rung, at a rung with fewer than
    /// `eta` earlier values, or before the first rung.
    pub fn observe(&mut self, trial: usize, step: u64, value: f64) -> Result<bool, HpoError> {
        if step == 0 || step % self.interval != 0 {
            return Err(HpoError::BadReportStep {
                trial,
                step,
                interval: self.interval,
            });
        }
        let last = self.last_step.get(&trial).copied().unwrap_or(0);
        if step <= last {
            return Err(HpoError::OutOfOrderReport { trial, step, last });
        }
        self.last_step.insert(trial, step);
        if !self.is_rung(step) {
            return Ok(false);
        }
        let rung = self.rungs.entry(step).or_default();
        let prune = rung.len() >= self.eta as usize
            && value < quantile(rung, 1.0 - 1.0 / self.eta as f64);
        rung.push(value);
        Ok(prune)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialStatus {
    Running,
    Pruned,
    Complete,
}

/// One sampled configuration with its reported curve and outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub params: Vec<(String, f64)>,
    pub curve: Vec<(u64, f64)>,
    pub status: TrialStatus,
    pub objective: Option<f64>,
}

impl TrialRecord {
    fn values(&self) -> Vec<f64> {
        self.params.iter().map(|(_, v)| *v).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySettings {
    pub n_trials: usize,
    pub budget: u64,
    pub parallelism: usize,
    pub seed: u64,
    pub report_interval: u64,
    pub eval_episodes: usize,
}

impl StudySettings {
    pub fn new(n_trials: usize, budget: u64, parallelism: usize, seed: u64) -> Self {
        StudySettings {
            n_trials,
            budget,
            parallelism: parallelism.max(1),
            seed,
            report_interval: 1000,
            eval_episodes: 100,
        }
    }
}

/// What a trial runner reports back.
pub enum TrialOutcome {
    Complete(f64),
    Pruned,
}

struct Ledger {
    space: SearchSpace,
    tpe: Tpe,
    pruner: ShpPruner,
    records: Vec<TrialRecord>,
    rng: StdRng,
    n_trials: usize,
}

impl Ledger {
    fn suggest_next(&mut self) -> Result<Option<(usize, Vec<(String, f64)>)>, HpoError> {
        if self.records.len() >= self.n_trials {
            return Ok(None);
        }
        let history: Vec<(Vec<f64>, f64)> = self
            .records
            .iter()
            .filter_map(|r| r.objective.map(|o| (r.values(), o)))
            .collect();
        let values = self.tpe.suggest(&self.space, &history, &mut self.rng)?;
        let id = self.records.len();
        let params: Vec<(String, f64)> = self
            .space
            .dims
            .iter()
            .map(|d| d.name.clone())
            .zip(values)
            .collect();
        self.records.push(TrialRecord {
            id,
            params: params.clone(),
            curve: Vec::new(),
            status: TrialStatus::Running,
            objective: None,
        });
        Ok(Some((id, params)))
    }
}

/// Handle a trial runner uses to report its reward EMA at each interval.
pub struct TrialHandle<'a> {
    ledger: &'a Mutex<Ledger>,
    id: usize,
}

impl TrialHandle<'_> {
    /// Report the trial's value at `step`; a true result means the pruner
    /// cut the trial and the runner must stop.
    pub fn report(&mut self, step: u64, value: f64) -> Result<bool, HpoError> {
        let mut ledger = self.ledger.lock().expect("study ledger poisoned");
        let prune = ledger.pruner.observe(self.id, step, value)?;
        ledger.records[self.id].curve.push((step, value));
        Ok(prune)
    }
}

/// Study outcome: all trial records plus the best completed trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub trials: Vec<TrialRecord>,
    pub best: Option<TrialRecord>,
}

/// Deterministic per-trial seed derived from the study seed.
pub fn trial_seed(study_seed: u64, trial_id: usize) -> u64 {
    // splitmix64 finalizer over the combined inputs.
    let mut z = study_seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(trial_id as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// A sequence of TPE-suggested, SHP-pruned trials over one search space.
pub struct Study {
    pub space: SearchSpace,
    pub settings: StudySettings,
}

impl Study {
    pub fn new(space: SearchSpace, settings: StudySettings) -> Self {
        Study { space, settings }
    }

    /// Execute the study. The runner receives (trial id, parameters, report
    /// handle) and returns the final objective, or `Pruned` after the handle
    /// says to stop. Suggestion and pruning are serialized through one
    /// ledger; trials run on up to `parallelism` threads. With parallelism 1
    /// the whole study is deterministic in the seed.
    pub fn run<F>(&self, runner: F) -> Result<StudyReport, HpoError>
    where
        F: Fn(usize, &[(String, f64)], &mut TrialHandle) -> Result<TrialOutcome, String> + Sync,
    {
        let ledger = Mutex::new(Ledger {
            space: self.space.clone(),
            tpe: Tpe::default(),
            pruner: ShpPruner::new(2, self.settings.report_interval),
            records: Vec::new(),
            rng: StdRng::seed_from_u64(self.settings.seed),
            n_trials: self.settings.n_trials,
        });
        let errors: Mutex<Vec<HpoError>> = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..self.settings.parallelism {
                s.spawn(|| loop {
                    let next = {
                        let mut led = ledger.lock().expect("study ledger poisoned");
                        match led.suggest_next() {
                            Ok(n) => n,
                            Err(e) => {
                                errors.lock().unwrap().push(e);
                                return;
                            }
                        }
                    };
                    let Some((id, params)) = next else { return };
                    let mut handle = TrialHandle { ledger: &ledger, id };
                    let outcome = runner(id, &params, &mut handle);
                    let mut led = ledger.lock().expect("study ledger poisoned");
                    match outcome {
                        Ok(TrialOutcome::Complete(obj)) => {
                            led.records[id].status = TrialStatus::Complete;
                            led.records[id].objective = Some(obj);
                        }
                        Ok(TrialOutcome::Pruned) => {
                            led.records[id].status = TrialStatus::Pruned;
                        }
                        Err(msg) => {
                            errors.lock().unwrap().push(HpoError::Trial { id, msg });
                            return;
                        }
                    }
                });
            }
        });
        if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
            return Err(e);
        }
        let trials = ledger.into_inner().expect("study ledger poisoned").records;
        let best = trials
            .iter()
            .filter(|t| t.objective.is_some())
            .max_by(|a, b| {
                a.objective
                    .partial_cmp(&b.objective)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .cloned();
        Ok(StudyReport { trials, best })
    }

    /// Write study.json, per-trial JSON files, best.json, and the CSV tables
    /// into `dir`.
    pub fn persist(&self, report: &StudyReport, dir: &Path) -> Result<(), HpoError> {
        std::fs::create_dir_all(dir)?;
        let study = serde_json::json!({
            "space": self.space,
            "settings": self.settings,
        });
        std::fs::write(dir.join("study.json"), serde_json::to_string_pretty(&study)?)?;
        for trial in &report.trials {
            std::fs::write(
                dir.join(format!("trial-{:03}.json", trial.id)),
                serde_json::to_string_pretty(trial)?,
            )?;
        }
        if let Some(best) = &report.best {
            std::fs::write(dir.join("best.json"), serde_json::to_string_pretty(best)?)?;
        }

        let mut trials_csv = String::from("trial,status,objective\n");
        for t in &report.trials {
            let obj = t.objective.map(|o| o.to_string()).unwrap_or_default();
            trials_csv.push_str(&format!("{},{:?},{}\n", t.id, t.status, obj));
        }
        std::fs::write(dir.join("trials.csv"), trials_csv)?;

        let mut pc = self.space.names().join(",");
        pc.push_str(",objective\n");
        for t in &report.trials {
            let row: Vec<String> = t.params.iter().map(|(_, v)| v.to_string()).collect();
            let obj = t.objective.map(|o| o.to_string()).unwrap_or_default();
            pc.push_str(&format!("{},{}\n", row.join(","), obj));
        }
        std::fs::write(dir.join("parallel_coordinates.csv"), pc)?;
        Ok(())
    }
}
