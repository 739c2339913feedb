//! Episodic control environments implemented from scratch behind one
//! interface: the inverted-pendulum cart (CartPole) and an energy-rewarded
//! mountain car. Both are deterministic given (state, action); randomness
//! enters only through reset.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode; reset first")]
    EpisodeFinished,
    #[error("action {action} out of range for {env} ({n_actions} actions)")]
    BadAction {
        env: &'static str,
        action: usize,
        n_actions: usize,
    },
}

/// Result of one environment step. `terminated` means an absorbing outcome
/// (pole fell, goal reached); `truncated` means the time limit cut the
/// episode and the final state is still bootstrappable.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Uniform episodic interface; one instance per training run.
pub trait Environment {
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepResult, EnvError>;
    fn state_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn name(&self) -> &'static str;
    /// Mean-episode-reward level at which the environment counts as solved.
    fn solve_threshold(&self) -> f64;
    /// Per-component factors that bring observations to O(1) before they
    /// reach the network. Identity unless a component's natural range is
    /// far from unit scale.
    fn obs_scale(&self) -> Vec<f64> {
        vec![1.0; self.state_dim()]
    }
}

const CARTPOLE_GRAVITY: f64 = 9.8;
const CARTPOLE_MASS_CART: f64 = 1.0;
const CARTPOLE_MASS_POLE: f64 = 0.1;
const CARTPOLE_HALF_LENGTH: f64 = 0.5;
const CARTPOLE_FORCE: f64 = 10.0;
const CARTPOLE_TAU: f64 = 0.02;
const CARTPOLE_MAX_STEPS: u32 = 500;
/// 15 degrees in radians.
const CARTPOLE_THETA_LIMIT: f64 = 15.0 * std::f64::consts::PI / 180.0;
const CARTPOLE_X_LIMIT: f64 = 2.4;

/// Pole balancing on a cart: state (x, x_dot, theta, theta_dot), actions
/// {push left, push right}, +1 reward per step, episode ends when the pole
/// tips past 15 degrees or the cart leaves +-2.4, time limit 500 steps.
pub struct CartPole {
    state: [f64; 4],
    steps: u32,
    finished: bool,
}

impl CartPole {
    pub fn new() -> Self {
        CartPole {
            state: [0.0; 4],
            steps: 0,
            finished: true,
        }
    }
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for CartPole {
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        for c in &mut self.state {
            *c = rng.gen_range(-0.05..0.05);
        }
        self.steps = 0;
        self.finished = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        if action >= 2 {
            return Err(EnvError::BadAction {
                env: "cartpole",
                action,
                n_actions: 2,
            });
        }
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 {
            CARTPOLE_FORCE
        } else {
            -CARTPOLE_FORCE
        };
        let total_mass = CARTPOLE_MASS_CART + CARTPOLE_MASS_POLE;
        let polemass_length = CARTPOLE_MASS_POLE * CARTPOLE_HALF_LENGTH;
        let (sin_t, cos_t) = theta.sin_cos();
        let temp = (force + polemass_length * theta_dot * theta_dot * sin_t) / total_mass;
        let theta_acc = (CARTPOLE_GRAVITY * sin_t - cos_t * temp)
            / (CARTPOLE_HALF_LENGTH
                * (4.0 / 3.0 - CARTPOLE_MASS_POLE * cos_t * cos_t / total_mass));
        let x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

        // Semi-explicit Euler: positions advance with the old velocities.
        self.state = [
            x + CARTPOLE_TAU * x_dot,
            x_dot + CARTPOLE_TAU * x_acc,
            theta + CARTPOLE_TAU * theta_dot,
            theta_dot + CARTPOLE_TAU * theta_acc,
        ];
        self.steps += 1;

        let terminated = self.state[0].abs() > CARTPOLE_X_LIMIT
            || self.state[2].abs() > CARTPOLE_THETA_LIMIT;
        let truncated = !terminated && self.steps >= CARTPOLE_MAX_STEPS;
        self.finished = terminated || truncated;
        Ok(StepResult {
            state: self.state.to_vec(),
            reward: 1.0,
            terminated,
            truncated,
        })
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_count(&self) -> usize {
        2
    }

    fn name(&self) -> &'static str {
        "cartpole"
    }

    fn solve_threshold(&self) -> f64 {
        195.0
    }
}

const EMC_MIN_X: f64 = -1.2;
const EMC_MAX_X: f64 = 0.6;
const EMC_MAX_SPEED: f64 = 0.07;
const EMC_GOAL_X: f64 = 0.5;
const EMC_FORCE: f64 = 0.001;
const EMC_GRAVITY: f64 = 0.0025;
const EMC_MAX_STEPS: u32 = 200;

/// Height profile of the hill, normalized to [0, 1].
fn emc_height(x: f64) -> f64 {
    0.45 * (3.0 * x).sin() + 0.55
}

/// Kinetic-energy weight that makes the total energy a conserved quantity
/// of the free dynamics: the gravity pull is -0.0025*cos(3x) while the
/// height slope is 0.45*3*cos(3x), so the kinetic term must carry their
/// ratio 1.35 / 0.0025 = 540. With any other weight the energy sloshes
/// between the potential and kinetic terms during free rolling and the
/// per-step energy difference stops measuring the work done by the engine.
const EMC_KINETIC_WEIGHT: f64 = 0.45 * 3.0 / EMC_GRAVITY;

/// Total energy: height plus kinetic term, in height-normalized units.
/// Conserved (up to integration error) while the engine is idle, so each
/// step's energy difference is the engine's mechanical work.
pub fn emc_energy(x: f64, x_dot: f64) -> f64 {
    emc_height(x) + 0.5 * EMC_KINETIC_WEIGHT * x_dot * x_dot
}

/// Mountain car with an energy-difference reward: each step pays
/// E(s') - E(s), so an episode's cumulative reward telescopes to the total
/// energy gained. Solved by gaining 0.45 energy units, i.e. reaching x >= 0.5.
pub struct EnergyMountainCar {
    x: f64,
    x_dot: f64,
    steps: u32,
    finished: bool,
}

impl EnergyMountainCar {
    pub fn new() -> Self {
        EnergyMountainCar {
            x: 0.0,
            x_dot: 0.0,
            steps: 0,
            finished: true,
        }
    }

    /// Position of the valley bottom (minimum of the height profile).
    pub fn valley_bottom() -> f64 {
        -std::f64::consts::FRAC_PI_6
    }

    #[cfg(test)]
    fn set_state(&mut self, x: f64, x_dot: f64) {
        self.x = x;
        self.x_dot = x_dot;
        self.steps = 0;
        self.finished = false;
    }
}

impl Default for EnergyMountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for EnergyMountainCar {
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        self.x = rng.gen_range(-0.6..-0.4);
        self.x_dot = 0.0;
        self.steps = 0;
        self.finished = false;
        vec![self.x, self.x_dot]
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        if action >= 3 {
            return Err(EnvError::BadAction {
                env: "energy-mountain-car",
                action,
                n_actions: 3,
            });
        }
        let e_before = emc_energy(self.x, self.x_dot);
        self.x_dot += EMC_FORCE * (action as f64 - 1.0) - EMC_GRAVITY * (3.0 * self.x).cos();
        self.x_dot = self.x_dot.clamp(-EMC_MAX_SPEED, EMC_MAX_SPEED);
        self.x += self.x_dot;
        self.x = self.x.clamp(EMC_MIN_X, EMC_MAX_X);
        // The left wall is inelastic: hitting it absorbs the velocity.
        if self.x <= EMC_MIN_X && self.x_dot < 0.0 {
            self.x_dot = 0.0;
        }
        self.steps += 1;

        let reward = emc_energy(self.x, self.x_dot) - e_before;
        let terminated = self.x >= EMC_GOAL_X;
        let truncated = !terminated && self.steps >= EMC_MAX_STEPS;
        self.finished = terminated || truncated;
        Ok(StepResult {
            state: vec![self.x, self.x_dot],
            reward,
            terminated,
            truncated,
        })
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_count(&self) -> usize {
        3
    }

    fn name(&self) -> &'static str {
        "energy-mountain-car"
    }

    /// Velocity saturates at 0.07, ~14x smaller than the position range;
    /// rescaling it to +/-1 lets the first layer see both components at
    /// comparable magnitude.
    fn obs_scale(&self) -> Vec<f64> {
        vec![1.0, 1.0 / EMC_MAX_SPEED]
    }

    fn solve_threshold(&self) -> f64 {
        0.45
    }
}

/// Construct an environment by its CLI name.
pub fn make_env(name: &str) -> Option<Box<dyn Environment + Send>> {
    match name {
        "cartpole" => Some(Box::new(CartPole::new())),
        "energy-mountain-car" => Some(Box::new(EnergyMountainCar::new())),
        _ => None,
    }
}
