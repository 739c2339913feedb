//! Advantage actor-critic training: N-step rollouts with bootstrapped
//! returns, the three loss terms (policy gradient, value, entropy), and the
//! per-variant gradient routing and scalarization.
//!
//! Variants: the classic algorithm scalarizes all three terms and lets every
//! term reach the shared feature extractor. The NOG variants route the value
//! term to the value head only and the entropy term to the policy head only
//! by applying those heads to detached features. The TE variants drop the
//! entropy term entirely and instead sample actions from an entropy-floored
//! distribution.

use crate::entropy::{sample_with_floor, Categorical, EntropyError};
use crate::envs::{EnvError, Environment};
use crate::nets::{ActorCriticNet, Adam, NetError, TapeNet};
use crate::tape::{clip_global_norm, Array, NodeId, Tape, TapeError};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum A2cError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
}

/// Algorithm variants and which coefficients each one uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A2c,
    A2cNog,
    A2cTe,
    A2cNogTe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::A2c,
        Variant::A2cNog,
        Variant::A2cTe,
        Variant::A2cNogTe,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::A2c => "a2c",
            Variant::A2cNog => "a2c-nog",
            Variant::A2cTe => "a2c-te",
            Variant::A2cNogTe => "a2c-nog-te",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.cli_name() == name)
    }

    /// Value and entropy heads read detached features.
    pub fn routes_gradients(self) -> bool {
        matches!(self, Variant::A2cNog | Variant::A2cNogTe)
    }

    /// Actions are drawn from the entropy-floored distribution.
    pub fn floors_entropy(self) -> bool {
        matches!(self, Variant::A2cTe | Variant::A2cNogTe)
    }

    /// The entropy bonus term (weighted by alpha) is part of the loss.
    pub fn uses_alpha(self) -> bool {
        matches!(self, Variant::A2c | Variant::A2cNog)
    }

    /// The value term carries a tunable weight beta.
    pub fn uses_beta(self) -> bool {
        matches!(self, Variant::A2c | Variant::A2cTe)
    }

    pub fn uses_target_entropy(self) -> bool {
        self.floors_entropy()
    }
}

/// Training hyperparameters. Optional coefficients must be present exactly
/// when the variant uses them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub gamma: f64,
    pub n_steps: usize,
    pub lr: f64,
    pub mcn: f64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub target_entropy: Option<f64>,
}

const GAMMA_CHOICES: [f64; 3] = [0.9, 0.99, 0.999];
const N_CHOICES: [usize; 4] = [8, 16, 32, 64];

impl Hyperparameters {
    pub fn validate(&self, variant: Variant) -> Result<(), A2cError> {
        let fail = |msg: String| Err(A2cError::Config(msg));
        if !GAMMA_CHOICES.contains(&self.gamma) {
            return fail(format!("gamma {} not in {GAMMA_CHOICES:?}", self.gamma));
        }
        if !N_CHOICES.contains(&self.n_steps) {
            return fail(format!("n_steps {} not in {N_CHOICES:?}", self.n_steps));
        }
        if !(1e-5..=1e-2).contains(&self.lr) {
            return fail(format!("lr {} outside (1e-5, 1e-2)", self.lr));
        }
        if !(self.mcn > 0.0 && self.mcn < 2.0) {
            return fail(format!("mcn {} outside (0, 2)", self.mcn));
        }
        match (variant.uses_alpha(), self.alpha) {
            (true, None) => return fail(format!("{} requires alpha", variant.cli_name())),
            (false, Some(_)) => {
                return fail(format!("{} does not take alpha", variant.cli_name()))
            }
            (true, Some(a)) if !(1e-4..=1e-1).contains(&a) => {
                return fail(format!("alpha {a} outside (1e-4, 1e-1)"));
            }
            _ => {}
        }
        match (variant.uses_beta(), self.beta) {
            (true, None) => return fail(format!("{} requires beta", variant.cli_name())),
            (false, Some(_)) => return fail(format!("{} does not take beta", variant.cli_name())),
            (true, Some(b)) if !(b > 0.0 && b < 1.0) => {
                return fail(format!("beta {b} outside (0, 1)"));
            }
            _ => {}
        }
        match (variant.uses_target_entropy(), self.target_entropy) {
            (true, None) => {
                return fail(format!("{} requires target_entropy", variant.cli_name()))
            }
            (false, Some(_)) => {
                return fail(format!("{} does not take target_entropy", variant.cli_name()))
            }
            (true, Some(t)) if !(t > 0.0 && t < 0.2) => {
                return fail(format!("target_entropy {t} outside (0, 0.2)"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// One environment transition plus the policy statistics at collection time.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub log_prob: f64,
    pub value: f64,
}

/// Up to N transitions gathered between optimizer steps; never spans an
/// episode boundary. The bootstrap state exists exactly when the segment did
/// not end in termination.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub bootstrap_state: Option<Vec<f64>>,
    pub terminated: bool,
}

/// Bootstrapped N-step returns by backward recursion: the bootstrap value is
/// zero after termination and the critic's estimate otherwise.
pub fn compute_returns(
    rollout: &Rollout,
    value_fn: impl FnOnce(&[f64]) -> f64,
    gamma: f64,
) -> Vec<f64> {
    debug_assert_eq!(rollout.bootstrap_state.is_none(), rollout.terminated);
    let mut acc = match &rollout.bootstrap_state {
        Some(s) if !rollout.terminated => value_fn(s),
        _ => 0.0,
    };
    let mut returns = vec![0.0; rollout.transitions.len()];
    for (slot, t) in returns.iter_mut().zip(&rollout.transitions).rev() {
        acc = t.reward + gamma * acc;
        *slot = acc;
    }
    returns
}

/// The three scalar loss-term nodes, built on one tape so each can be
/// differentiated in isolation.
pub struct LossTerms {
    /// Policy-gradient objective: sum of log-prob times detached advantage.
    pub pg: NodeId,
    /// Value error: mean squared (V - R) over the window.
    pub value: NodeId,
    /// Policy entropy summed over the window.
    pub entropy: NodeId,
    pub reg: TapeNet,
}

/// Record the forward pass for a whole rollout and build the three loss
/// terms. With `routed` set, the value and entropy heads read detached
/// features, so their gradients stay out of the feature extractor.
pub fn build_loss_terms(
    tape: &mut Tape,
    net: &ActorCriticNet,
    rollout: &Rollout,
    returns: &[f64],
    routed: bool,
) -> Result<LossTerms, A2cError> {
    if rollout.transitions.is_empty() {
        return Err(A2cError::Config("empty rollout".to_string()));
    }
    let reg = net.register(tape);
    let mut pg_acc: Option<NodeId> = None;
    let mut v_acc: Option<NodeId> = None;
    let mut h_acc: Option<NodeId> = None;
    let fold = |tape: &mut Tape, acc: &mut Option<NodeId>, node: NodeId| -> Result<(), TapeError> {
        *acc = Some(match *acc {
            None => node,
            Some(a) => tape.add(a, node)?,
        });
        Ok(())
    };
    for (t, &ret) in rollout.transitions.iter().zip(returns) {
        let s = tape.leaf(Array::vector(t.state.clone()));
        let f = reg.features(tape, s)?;
        let f_routed = if routed { tape.stop_gradient(f) } else { f };

        let logits = reg.policy_logits(tape, f)?;
        let log_p = tape.log_softmax(logits)?;
        let lp = tape.gather(log_p, t.action)?;

        let v = reg.value(tape, f_routed)?;
        let r = tape.scalar(ret);
        let residual = tape.sub(r, v)?;
        let adv = tape.stop_gradient(residual);
        let pg_k = tape.mul(lp, adv)?;
        fold(tape, &mut pg_acc, pg_k)?;

        let verr = tape.sub(v, r)?;
        let v_k = tape.square(verr);
        fold(tape, &mut v_acc, v_k)?;

        let h_logits = if routed {
            reg.policy_logits(tape, f_routed)?
        } else {
            logits
        };
        let h_p = tape.softmax(h_logits)?;
        let h_lp = tape.log_softmax(h_logits)?;
        let plogp = tape.mul(h_p, h_lp)?;
        let h_sum = tape.sum(plogp);
        let h_k = tape.neg(h_sum);
        fold(tape, &mut h_acc, h_k)?;
    }
    let value = tape.scale(v_acc.unwrap(), 1.0 / rollout.transitions.len() as f64);
    Ok(LossTerms {
        pg: pg_acc.unwrap(),
        value,
        entropy: h_acc.unwrap(),
        reg,
    })
}

/// The scalarized loss node plus the forward values of its pieces.
pub struct Loss {
    pub node: NodeId,
    pub reg: TapeNet,
    pub pg_loss: f64,
    pub v_loss: f64,
    pub entropy_sum: f64,
}

/// Scalarize the loss terms for a variant:
/// classic -pg + beta*v - alpha*h; routed variants fix beta at 1;
/// entropy-floored variants drop the entropy term.
pub fn build_loss(
    tape: &mut Tape,
    net: &ActorCriticNet,
    rollout: &Rollout,
    returns: &[f64],
    hp: &Hyperparameters,
    variant: Variant,
) -> Result<Loss, A2cError> {
    hp.validate(variant)?;
    let terms = build_loss_terms(tape, net, rollout, returns, variant.routes_gradients())?;
    let neg_pg = tape.neg(terms.pg);
    let v_scaled = match hp.beta {
        Some(beta) => tape.scale(terms.value, beta),
        None => terms.value,
    };
    let mut node = tape.add(neg_pg, v_scaled)?;
    if let Some(alpha) = hp.alpha {
        let h_scaled = tape.scale(terms.entropy, alpha);
        node = tape.sub(node, h_scaled)?;
    }
    Ok(Loss {
        node,
        reg: terms.reg,
        pg_loss: -tape.value(terms.pg).data()[0],
        v_loss: tape.value(terms.value).data()[0],
        entropy_sum: tape.value(terms.entropy).data()[0],
    })
}

/// Per-optimizer-step statistics; the CSV schema is
/// step, episodes_done, mean_ep_reward, pg_loss, v_loss, entropy, epsilon, wall_ms.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub episodes_done: u64,
    pub mean_ep_reward: f64,
    pub pg_loss: f64,
    pub v_loss: f64,
    /// Mean policy entropy over the window, before any floor correction.
    pub entropy: f64,
    /// Mean entropy of the distributions actually sampled.
    pub entropy_used: f64,
    /// Mean mass moved by the entropy floor (zero when it never fired).
    pub epsilon: f64,
    pub wall_ms: f64,
}

impl StepStats {
    pub const CSV_HEADER: &'static str =
        "step,episodes_done,mean_ep_reward,pg_loss,v_loss,entropy,epsilon,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes_done,
            self.mean_ep_reward,
            self.pg_loss,
            self.v_loss,
            self.entropy,
            self.epsilon,
            self.wall_ms
        )
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub solved: bool,
    pub steps_to_solve: Option<u64>,
    pub steps_run: u64,
    pub episode_rewards: Vec<f64>,
    pub metrics: Vec<StepStats>,
    pub wall_s: f64,
}

/// Default optimizer-step budget when a config does not override it.
pub const DEFAULT_MAX_STEPS: u64 = 20_000;
/// Episode window for the solve check and the reported mean reward.
pub const SOLVE_WINDOW: usize = 100;

/// Owns one environment, one network, and one optimizer; advances them one
/// optimizer step at a time.
pub struct Trainer {
    env: Box<dyn Environment + Send>,
    pub net: ActorCriticNet,
    opt: Adam,
    hp: Hyperparameters,
    variant: Variant,
    rng: StdRng,
    obs_scale: Vec<f64>,
    state: Vec<f64>,
    episode_reward: f64,
    episode_rewards: Vec<f64>,
    reward_ema: Option<f64>,
    steps_done: u64,
    episodes_done: u64,
}

/// Smoothing coefficient for the per-episode reward EMA.
pub const REWARD_EMA_COEFF: f64 = 0.1;

impl Trainer {
    pub fn new(
        env: Box<dyn Environment + Send>,
        hp: Hyperparameters,
        variant: Variant,
        seed: u64,
    ) -> Result<Self, A2cError> {
        hp.validate(variant)?;
        let mut rng = StdRng::seed_from_u64(seed);
        let net = ActorCriticNet::new(
            env.state_dim(),
            env.action_count(),
            &crate::nets::DEFAULT_HIDDEN,
            &mut rng,
        );
        let opt = Adam::new(hp.lr);
        let obs_scale = env.obs_scale();
        let mut trainer = Trainer {
            env,
            net,
            opt,
            hp,
            variant,
            rng,
            obs_scale,
            state: Vec::new(),
            episode_reward: 0.0,
            episode_rewards: Vec::new(),
            reward_ema: None,
            steps_done: 0,
            episodes_done: 0,
        };
        trainer.reset_episode();
        Ok(trainer)
    }

    fn reset_episode(&mut self) {
        let seed = self.rng.gen::<u64>();
        let raw = self.env.reset(seed);
        self.state = scale_obs(&raw, &self.obs_scale);
        self.episode_reward = 0.0;
    }

    fn finish_episode(&mut self) {
        let r = self.episode_reward;
        self.episodes_done += 1;
        self.episode_rewards.push(r);
        self.reward_ema = Some(match self.reward_ema {
            None => r,
            Some(ema) => REWARD_EMA_COEFF * r + (1.0 - REWARD_EMA_COEFF) * ema,
        });
        self.reset_episode();
    }

    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    pub fn episode_rewards(&self) -> &[f64] {
        &self.episode_rewards
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    /// EMA of completed-episode rewards, initialized at the first episode.
    pub fn reward_ema(&self) -> Option<f64> {
        self.reward_ema
    }

    /// Mean reward over the last `window` completed episodes.
    pub fn mean_recent_reward(&self, window: usize) -> Option<f64> {
        if self.episode_rewards.is_empty() {
            return None;
        }
        let tail = &self.episode_rewards[self.episode_rewards.len().saturating_sub(window)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Collect a rollout, compute returns, and apply one clipped update.
    pub fn train_step(&mut self) -> Result<StepStats, A2cError> {
        let t0 = Instant::now();
        let n = self.hp.n_steps;
        let mut transitions = Vec::with_capacity(n);
        let mut entropy_raw = 0.0;
        let mut entropy_used = 0.0;
        let mut epsilon_sum = 0.0;
        let mut bootstrap_state = None;
        let mut terminated = false;

        for _ in 0..n {
            let (p, v) = self.net.forward_numeric(&self.state)?;
            let cat = Categorical::new(p)?;
            entropy_raw += cat.entropy();
            let action = if self.variant.floors_entropy() {
                let target = self.hp.target_entropy.expect("validated");
                let (a, corr) = sample_with_floor(&cat, target, &mut self.rng)?;
                entropy_used += corr.corrected.entropy();
                epsilon_sum += corr.epsilon;
                a
            } else {
                entropy_used += cat.entropy();
                cat.sample(&mut self.rng)
            };
            let log_prob = cat.probs()[action].ln();
            let state_before = std::mem::take(&mut self.state);
            let result = self.env.step(action)?;
            self.episode_reward += result.reward;
            transitions.push(Transition {
                state: state_before,
                action,
                reward: result.reward,
                terminated: result.terminated,
                truncated: result.truncated,
                log_prob,
                value: v,
            });
            if result.terminated {
                terminated = true;
                self.finish_episode();
                break;
            }
            if result.truncated {
                bootstrap_state = Some(scale_obs(&result.state, &self.obs_scale));
                self.finish_episode();
                break;
            }
            self.state = scale_obs(&result.state, &self.obs_scale);
        }
        if !terminated && bootstrap_state.is_none() {
            bootstrap_state = Some(self.state.clone());
        }
        let window_len = transitions.len() as f64;
        let rollout = Rollout {
            transitions,
            bootstrap_state,
            terminated,
        };
        let returns = compute_returns(
            &rollout,
            |s| {
                self.net
                    .forward_numeric(s)
                    .map(|(_, v)| v)
                    .unwrap_or(f64::NAN)
            },
            self.hp.gamma,
        );

        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, &self.net, &rollout, &returns, &self.hp, self.variant)?;
        let loss_value = tape.value(loss.node).data()[0];
        if !loss_value.is_finite() {
            return Err(A2cError::NonFiniteLoss {
                step: self.steps_done + 1,
                detail: format!(
                    "loss {loss_value}, pg {}, v {}",
                    loss.pg_loss, loss.v_loss
                ),
            });
        }
        let grads = tape.backward(loss.node)?;
        let adjoints = loss.reg.adjoints(&tape, &grads);
        let clipped = clip_global_norm(adjoints, self.hp.mcn)?;
        self.net.apply_gradients(&mut self.opt, &clipped)?;

        self.steps_done += 1;
        Ok(StepStats {
            step: self.steps_done,
            episodes_done: self.episodes_done,
            mean_ep_reward: self.mean_recent_reward(SOLVE_WINDOW).unwrap_or(f64::NAN),
            pg_loss: loss.pg_loss,
            v_loss: loss.v_loss,
            entropy: entropy_raw / window_len,
            entropy_used: entropy_used / window_len,
            epsilon: epsilon_sum / window_len,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Train until the mean reward over the last `window` completed episodes
    /// reaches `threshold`, or `max_steps` optimizer steps elapse.
    pub fn train_until_solved(
        &mut self,
        threshold: f64,
        window: usize,
        max_steps: u64,
    ) -> Result<RunResult, A2cError> {
        assert!(max_steps > 0, "max_steps must be positive");
        let t0 = Instant::now();
        let mut metrics = Vec::new();
        let mut solved_at = None;
        while self.steps_done < max_steps {
            let stats = self.train_step()?;
            metrics.push(stats);
            if self.episodes_done >= window as u64 {
                let mean = self.mean_recent_reward(window).unwrap_or(f64::NAN);
                if mean >= threshold {
                    solved_at = Some(self.steps_done);
                    break;
                }
            }
        }
        Ok(RunResult {
            solved: solved_at.is_some(),
            steps_to_solve: solved_at,
            steps_run: self.steps_done,
            episode_rewards: self.episode_rewards.clone(),
            metrics,
            wall_s: t0.elapsed().as_secs_f64(),
        })
    }
}

/// Observation vector as the network sees it.
fn scale_obs(raw: &[f64], scale: &[f64]) -> Vec<f64> {
    raw.iter().zip(scale).map(|(x, s)| x * s).collect()
}

/// Episode returns of a frozen policy over `episodes` fresh episodes,
/// sampling from the raw network distribution (no entropy floor).
pub fn evaluate(
    net: &ActorCriticNet,
    env: &mut (dyn Environment + Send),
    episodes: usize,
    rng: &mut StdRng,
) -> Result<Vec<f64>, A2cError> {
    let obs_scale = env.obs_scale();
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = scale_obs(&env.reset(rng.gen::<u64>()), &obs_scale);
        let mut total = 0.0;
        loop {
            let (p, _) = net.forward_numeric(&state)?;
            let action = Categorical::new(p)?.sample(rng);
            let r = env.step(action)?;
            total += r.reward;
            if r.done() {
                break;
            }
            state = scale_obs(&r.state, &obs_scale);
        }
        returns.push(total);
    }
    Ok(returns)
}
