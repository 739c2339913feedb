//! Categorical-distribution mathematics for entropy-floored sampling:
//! entropy, the argmax-to-rest mass transfer, a first-order estimate of the
//! mass to move for a desired entropy, a bisection solver that serves as the
//! numerical oracle, and the sampler that enforces an entropy floor.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("invalid categorical: {0}")]
    InvalidDistribution(String),
    #[error("epsilon {epsilon} outside admissible range [0, {max}]")]
    EpsilonOutOfRange { epsilon: f64, max: f64 },
    #[error("target entropy {target} is not reachable; admissible maximum is {achievable}")]
    TargetUnreachable { target: f64, achievable: f64 },
    #[error("target entropy {target} is at or above ln(N) = {log_n}")]
    TargetAboveMaximum { target: f64, log_n: f64 },
    #[error("first-order estimate undefined for this distribution (denominator {0})")]
    DegenerateEstimate(f64),
}

/// A categorical distribution over a small action set.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    p: Vec<f64>,
}

impl Categorical {
    pub fn new(p: Vec<f64>) -> Result<Self, EntropyError> {
        if p.len() < 2 {
            return Err(EntropyError::InvalidDistribution(format!(
                "need at least 2 components, got {}",
                p.len()
            )));
        }
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(EntropyError::InvalidDistribution(
                "components must be finite and non-negative".to_string(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(EntropyError::InvalidDistribution(format!(
                "components sum to {sum}, not 1"
            )));
        }
        Ok(Categorical { p })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Index of the largest component; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.p.iter().enumerate().skip(1) {
            if x > self.p[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats, with 0 ln 0 taken as 0.
    pub fn entropy(&self) -> f64 {
        self.p
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| -x * x.ln())
            .sum()
    }

    /// Draw an index by inverse CDF using one uniform variate.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &x) in self.p.iter().enumerate() {
            acc += x;
            if u < acc {
                return i;
            }
        }
        self.p.len() - 1
    }
}

/// Largest mass removable from the argmax while the entropy of
/// [`tilde_transform`] still increases strictly with epsilon. At
/// `p_max - 1/N` the shifted argmax reaches the mean of the other
/// components and the entropy curve can flatten, so the search bound backs
/// off by a relative margin.
pub fn admissible_epsilon_max(p: &Categorical) -> f64 {
    let n = p.len() as f64;
    let p_max = p.probs()[p.argmax()];
    ((p_max - 1.0 / n) * (1.0 - 1e-9)).max(0.0)
}

/// Move `epsilon` mass off the argmax and spread it evenly over the other
/// components. The result is a valid distribution for any epsilon up to
/// `p_max - 1/N` inclusive; outside that range the call errors rather than
/// clamping.
pub fn tilde_transform(p: &Categorical, epsilon: f64) -> Result<Categorical, EntropyError> {
    let n = p.len() as f64;
    let max_eps = (p.probs()[p.argmax()] - 1.0 / n).max(0.0);
    // The boundary check tolerates representation dust: a caller computing
    // p_max - 1/N from its own p can land one ulp past this max_eps.
    if !epsilon.is_finite() || epsilon < 0.0 || epsilon > max_eps + 1e-12 * (1.0 + max_eps) {
        return Err(EntropyError::EpsilonOutOfRange {
            epsilon,
            max: max_eps,
        });
    }
    let arg = p.argmax();
    let share = epsilon / (p.len() - 1) as f64;
    let q: Vec<f64> = p
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == arg { x - epsilon } else { x + share })
        .collect();
    Categorical::new(q)
}

/// First-order estimate of the mass to move so the transformed entropy hits
/// `target`: (target - H(p)) / (ln p_max - mean of ln p_i over i != argmax).
/// Returns 0 when no correction is needed (entropy already at target).
pub fn epsilon_first_order(p: &Categorical, target: f64) -> Result<f64, EntropyError> {
    let log_n = (p.len() as f64).ln();
    if target >= log_n {
        return Err(EntropyError::TargetAboveMaximum { target, log_n });
    }
    let h = p.entropy();
    if target <= h {
        return Ok(0.0);
    }
    let arg = p.argmax();
    let p_max = p.probs()[arg];
    let mean_log: f64 = p
        .probs()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, &x)| x.ln())
        .sum::<f64>()
        / (p.len() - 1) as f64;
    let denom = p_max.ln() - mean_log;
    if !denom.is_finite() || denom <= 0.0 {
        return Err(EntropyError::DegenerateEstimate(denom));
    }
    Ok((target - h) / denom)
}

/// The other easy-to-confuse reading of the first-order estimate, with the
/// arithmetic mean of the non-argmax probabilities in the denominator
/// instead of their mean log. Kept only so tests can document that it
/// disagrees with the bisection oracle.
pub fn epsilon_first_order_prob_mean(p: &Categorical, target: f64) -> Result<f64, EntropyError> {
    let log_n = (p.len() as f64).ln();
    if target >= log_n {
        return Err(EntropyError::TargetAboveMaximum { target, log_n });
    }
    let h = p.entropy();
    if target <= h {
        return Ok(0.0);
    }
    let arg = p.argmax();
    let p_max = p.probs()[arg];
    let mean_p: f64 = p
        .probs()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, &x)| x)
        .sum::<f64>()
        / (p.len() - 1) as f64;
    let denom = mean_p - p_max.ln();
    if !denom.is_finite() || denom <= 0.0 {
        return Err(EntropyError::DegenerateEstimate(denom));
    }
    Ok(-(h - target) / denom)
}

/// Solve H(tilde_transform(p, e)) = target by bisection over the admissible
/// range, on which the entropy is strictly increasing. Returns an epsilon
/// whose entropy lands in [target, target + tol]. The first-order estimate
/// seeds the bracket.
pub fn epsilon_bisection(p: &Categorical, target: f64, tol: f64) -> Result<f64, EntropyError> {
    let log_n = (p.len() as f64).ln();
    if target >= log_n {
        return Err(EntropyError::TargetAboveMaximum { target, log_n });
    }
    let h = p.entropy();
    if target <= h {
        return Ok(0.0);
    }
    let cap = admissible_epsilon_max(p);
    let entropy_at = |eps: f64| -> f64 {
        tilde_transform(p, eps)
            .expect("bisection stays inside the admissible range")
            .entropy()
    };
    let achievable = entropy_at(cap);
    if achievable < target {
        return Err(EntropyError::TargetUnreachable { target, achievable });
    }
    let mut lo = 0.0;
    let mut hi = cap;
    if let Ok(hint) = epsilon_first_order(p, target) {
        if hint > 0.0 && hint < cap {
            if entropy_at(hint) >= target {
                hi = hint;
            } else {
                lo = hint;
            }
        }
    }
    for _ in 0..200 {
        if entropy_at(hi) - target <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if entropy_at(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// How a sampling distribution was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMethod {
    /// Entropy already at or above the target; distribution untouched.
    None,
    /// Epsilon from the first-order closed form.
    ClosedForm,
    /// Epsilon from the bisection solver.
    Bisection,
}

/// The outcome of enforcing an entropy floor on a distribution.
#[derive(Debug, Clone)]
pub struct EntropyCorrection {
    pub epsilon: f64,
    pub corrected: Categorical,
    pub method: CorrectionMethod,
}

/// Enforce an entropy floor: untouched when H(p) >= target, otherwise the
/// bisection solution at tolerance `tol`.
pub fn correct_to_target(
    p: &Categorical,
    target: f64,
    tol: f64,
) -> Result<EntropyCorrection, EntropyError> {
    if p.entropy() >= target {
        return Ok(EntropyCorrection {
            epsilon: 0.0,
            corrected: p.clone(),
            method: CorrectionMethod::None,
        });
    }
    let eps = epsilon_bisection(p, target, tol)?;
    Ok(EntropyCorrection {
        epsilon: eps,
        corrected: tilde_transform(p, eps)?,
        method: CorrectionMethod::Bisection,
    })
}

/// Sample an action with the entropy floor applied. Returns the chosen index
/// and the correction record, whose `corrected` field is the distribution
/// actually sampled; the caller's log-probabilities still come from the raw
/// network output.
pub fn sample_with_floor(
    p: &Categorical,
    target: f64,
    rng: &mut impl Rng,
) -> Result<(usize, EntropyCorrection), EntropyError> {
    let correction = correct_to_target(p, target, 1e-6)?;
    let action = correction.corrected.sample(rng);
    Ok((action, correction))
}
