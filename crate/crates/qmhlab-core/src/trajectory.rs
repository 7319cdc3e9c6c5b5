//! Delayed-rejection trajectories and their acceptance probabilities.
//!
//! An update that cannot read states directly records a trajectory: a
//! sequence of (observation label, measured energy) pairs, oldest first.
//! Entry 0 holds the driver's proposal label together with the starting
//! energy measurement; entry k >= 1 holds the k-th observation label and
//! the energy measured after the k-th move. Acceptance of the newest
//! branch is a function of the whole trajectory, the driver kernel over
//! observation labels, the inverse temperature, and the energy noise
//! scale. All evaluators here are pure; samplers elsewhere reproduce
//! their decisions draw for draw.
//!
//! Bookkeeping is done in units of the oldest effective Boltzmann
//! weight, which keeps every comparison scale-invariant and avoids
//! underflow at large inverse temperatures.

use crate::error::QmhError;
use crate::model::{InverseTemperature, StochasticKernel};
use crate::quad::NeumaierSum;
use crate::Result;

/// Observation/energy history of one update, oldest entry first.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    entries: Vec<(usize, f64)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(QmhError::TrajectoryTooShort(entries.len()));
        }
        for (_, omega) in &entries {
            if !omega.is_finite() {
                return Err(QmhError::InvalidParameter {
                    name: "trajectory",
                    reason: format!("non-finite energy {omega}"),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Number of rounds n; the trajectory holds n+1 entries.
    pub fn rounds(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn observation(&self, k: usize) -> usize {
        self.entries[k].0
    }

    pub fn energy(&self, k: usize) -> f64 {
        self.entries[k].1
    }

    /// Time reversal: entry order flipped.
    pub fn reversed(&self) -> Self {
        let mut entries = self.entries.clone();
        entries.reverse();
        Self { entries }
    }

    /// Copy with the oldest energy shifted by `delta`.
    pub fn shifted_first(&self, delta: f64) -> Self {
        let mut entries = self.entries.clone();
        entries[0].1 += delta;
        Self { entries }
    }

    /// Copy with one more round recorded.
    pub fn appended(&self, observation: usize, energy: f64) -> Self {
        let mut entries = self.entries.clone();
        entries.push((observation, energy));
        Self { entries }
    }

    /// The oldest `rounds + 1` entries.
    pub fn prefix(&self, rounds: usize) -> Result<Self> {
        if rounds + 1 > self.entries.len() || rounds == 0 {
            return Err(QmhError::TrajectoryTooShort(rounds + 1));
        }
        Ok(Self {
            entries: self.entries[..=rounds].to_vec(),
        })
    }

    fn check_labels(&self, size: usize) -> Result<()> {
        match self.entries.iter().map(|e| e.0).max() {
            Some(max) if max >= size => Err(QmhError::DimensionMismatch {
                expected: size,
                got: max + 1,
            }),
            _ => Ok(()),
        }
    }
}

/// Effective Boltzmann weights in units of the oldest one. The oldest
/// slot carries an extra log-weight `offset` (the noise-bias correction
/// `beta^2 sigma^2` in normal use), so `weights[0] = 1` by construction.
fn scaled_weights(traj: &Trajectory, beta: f64, offset: f64) -> Result<Vec<f64>> {
    let omega0 = traj.energy(0);
    let mut weights = Vec::with_capacity(traj.len());
    weights.push(1.0);
    for k in 1..traj.len() {
        let w = (beta * (omega0 - traj.energy(k)) - offset).exp();
        if !w.is_finite() {
            return Err(QmhError::InvalidParameter {
                name: "trajectory",
                reason: format!("Boltzmann weight overflow at entry {k}"),
            });
        }
        weights.push(w);
    }
    Ok(weights)
}

/// Running decision sums in units of the oldest effective weight:
/// element 0 is `P(o_0|o_1)` and element m is the m-th partial sum of
/// forward-minus-backward weighted driver factors.
pub fn decision_partial_sums(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
) -> Result<Vec<f64>> {
    partial_sums_with_offset(traj, driver, beta.value(), bias(beta.value(), sigma))
}

fn bias(beta: f64, sigma: f64) -> f64 {
    beta * beta * sigma * sigma
}

fn partial_sums_with_offset(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: f64,
    offset: f64,
) -> Result<Vec<f64>> {
    traj.check_labels(driver.size())?;
    let w = scaled_weights(traj, beta, offset)?;
    let n = traj.rounds();
    let mut sums = Vec::with_capacity(n + 1);
    sums.push(driver.prob(traj.observation(1), traj.observation(0)));
    let mut acc = NeumaierSum::new();
    acc.add(sums[0]);
    for r in 0..n {
        let (o_r, o_next) = (traj.observation(r), traj.observation(r + 1));
        if r > 0 {
            acc.add(w[r] * driver.prob(o_next, o_r));
        }
        acc.add(-(w[r + 1] * driver.prob(o_r, o_next)));
        sums.push(acc.value());
    }
    Ok(sums)
}

/// Acceptance probability of the newest branch, by partial sums.
pub fn accept_explicit(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
) -> Result<f64> {
    accept_explicit_offset(traj, driver, beta, bias(beta.value(), sigma))
}

/// Same as [`accept_explicit`] with an arbitrary log-weight offset on
/// the oldest slot in place of the standard noise-bias correction.
pub fn accept_explicit_offset(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    offset: f64,
) -> Result<f64> {
    let sums = partial_sums_with_offset(traj, driver, beta.value(), offset)?;
    let n = traj.rounds();
    let running_min = sums[..n].iter().copied().fold(f64::INFINITY, f64::min);
    let denominator = running_min.max(0.0);
    if denominator <= 0.0 {
        return Err(QmhError::ImpossibleEvent);
    }
    let numerator = (running_min - sums[n]).max(0.0);
    Ok((numerator / denominator).min(1.0))
}

/// Acceptance probability of the newest branch, by the nested
/// rejection-cascade recursion over every contiguous subtrajectory. A
/// table entry indexed (far, base) is the base slot's effective weight
/// times the driver factor toward its neighbor, discounted by the
/// probability of rejecting every branch strictly between base and far.
pub fn accept_recursive(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
) -> Result<f64> {
    accept_recursive_offset(traj, driver, beta, bias(beta.value(), sigma))
}

pub fn accept_recursive_offset(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    offset: f64,
) -> Result<f64> {
    traj.check_labels(driver.size())?;
    let w = scaled_weights(traj, beta.value(), offset)?;
    let n = traj.rounds();
    let size = n + 1;
    let mut table = vec![0.0_f64; size * size];
    let idx = |far: usize, base: usize| far * size + base;
    for gap in 1..=n {
        for base in 0..size {
            for far in [base.checked_sub(gap), base.checked_add(gap)] {
                let Some(far) = far else { continue };
                if far >= size {
                    continue;
                }
                let value = if gap == 1 {
                    w[base] * driver.prob(traj.observation(far), traj.observation(base))
                } else {
                    let step = if far > base { far - 1 } else { far + 1 };
                    (table[idx(step, base)] - table[idx(base, step)]).max(0.0)
                };
                table[idx(far, base)] = value;
            }
        }
    }
    let denominator = table[idx(n, 0)];
    if denominator <= 0.0 {
        return Err(QmhError::ImpossibleEvent);
    }
    Ok((table[idx(0, n)] / denominator).min(1.0))
}

/// Probability that every branch strictly older than the newest one was
/// rejected.
pub fn rejection_cascade(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
) -> Result<f64> {
    rejection_cascade_offset(traj, driver, beta, bias(beta.value(), sigma))
}

pub fn rejection_cascade_offset(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    offset: f64,
) -> Result<f64> {
    let mut r = 1.0;
    for k in 1..traj.rounds() {
        let a = accept_explicit_offset(&traj.prefix(k)?, driver, beta, offset)?;
        r *= 1.0 - a;
    }
    Ok(r)
}

/// Decision factor of a recorded trajectory: the driver probability of
/// the oldest proposal times the cascade of earlier rejections, times
/// the newest branch's acceptance unless the update was cut off at its
/// round limit (`terminal`), in which case the branch keeps all
/// remaining probability.
pub fn decision_weight(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
    terminal: bool,
) -> Result<f64> {
    decision_weight_offset(traj, driver, beta, bias(beta.value(), sigma), terminal)
}

pub fn decision_weight_offset(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    offset: f64,
    terminal: bool,
) -> Result<f64> {
    traj.check_labels(driver.size())?;
    let first = driver.prob(traj.observation(1), traj.observation(0));
    let cascade = rejection_cascade_offset(traj, driver, beta, offset)?;
    if terminal {
        Ok(first * cascade)
    } else {
        Ok(first * cascade * accept_explicit_offset(traj, driver, beta, offset)?)
    }
}

/// Gap in the fold identity
/// `max{0, max{0, min X} + min{0, y - min X}} = max{0, min(X + {y})}`
/// used to collapse the acceptance recursion one branch at a time.
pub fn fold_min_identity_gap(xs: &[f64], y: f64) -> f64 {
    let min_x = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let lhs = (min_x.max(0.0) + (y - min_x).min(0.0)).max(0.0);
    let rhs = min_x.min(y).max(0.0);
    (lhs - rhs).abs()
}

/// Gap in the partial-sum reversal identity
/// `max{s_1, ..., s_{n-1}} = s_n - min{r_1, ..., r_{n-1}}`, where `s_k`
/// sums the first k terms, `r_k` the last k, and `s_n` all of them.
pub fn partial_sum_reversal_gap(terms: &[f64]) -> f64 {
    assert!(terms.len() >= 2, "identity needs at least two terms");
    let mut forward = NeumaierSum::new();
    let mut forward_max = f64::NEG_INFINITY;
    for t in &terms[..terms.len() - 1] {
        forward.add(*t);
        forward_max = forward_max.max(forward.value());
    }
    let mut total = NeumaierSum::new();
    for t in terms {
        total.add(*t);
    }
    let mut reverse = NeumaierSum::new();
    let mut reverse_min = f64::INFINITY;
    for t in terms[1..].iter().rev() {
        reverse.add(*t);
        reverse_min = reverse_min.min(reverse.value());
    }
    (forward_max - (total.value() - reverse_min)).abs()
}
