//! States, energies, distributions, and stochastic kernels.
//!
//! A model lives on a finite state space `S`. The thermal distribution at
//! inverse temperature `beta` is `p(a) = exp(-beta E(a)) / Z`, computed
//! with the minimum energy subtracted before exponentiation so large
//! `beta` cannot overflow. Convergence speed is measured by the retention
//! rate of a kernel: the operator norm of the kernel restricted to
//! zero-sum vectors under the L1 norm, which for a finite kernel equals
//! the maximum total-variation distance between two of its rows.

use crate::error::QmhError;
use crate::rng::RandomStream;
use crate::Result;

/// Tolerance for distribution normalization checks.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Finite state space with optional display labels.
#[derive(Debug, Clone)]
pub struct StateSpace {
    size: usize,
    labels: Option<Vec<String>>,
}

impl StateSpace {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(QmhError::EmptyStateSpace);
        }
        Ok(Self { size, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut s = Self::new(labels.len())?;
        s.labels = Some(labels);
        Ok(s)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self, a: usize) -> String {
        match &self.labels {
            Some(l) => l[a].clone(),
            None => a.to_string(),
        }
    }
}

/// Energy per state; every entry must be finite.
#[derive(Debug, Clone)]
pub struct EnergyTable {
    values: Vec<f64>,
}

impl EnergyTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(QmhError::EmptyStateSpace);
        }
        for (i, e) in values.iter().enumerate() {
            if !e.is_finite() {
                return Err(QmhError::InvalidEnergy(i));
            }
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, a: usize) -> f64 {
        self.values[a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest absolute energy, the natural scale for observable bounds.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, e| m.max(e.abs()))
    }
}

/// Inverse temperature `beta >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseTemperature(f64);

impl InverseTemperature {
    pub fn new(beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(QmhError::InvalidBeta(beta));
        }
        Ok(Self(beta))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Probability vector: entries nonnegative, summing to one within
/// [`NORMALIZATION_TOL`]. Construction caches the cumulative vector used
/// by inverse-CDF sampling.
#[derive(Debug, Clone)]
pub struct Distribution {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    last_positive: usize,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(QmhError::InvalidDistribution("empty".into()));
        }
        let mut sum = 0.0;
        for (i, p) in probs.iter().enumerate() {
            if !p.is_finite() || *p < -NORMALIZATION_TOL {
                return Err(QmhError::InvalidDistribution(format!(
                    "entry {i} is {p}"
                )));
            }
            sum += p.max(0.0);
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(QmhError::InvalidDistribution(format!(
                "sums to {sum}, not 1"
            )));
        }
        let probs: Vec<f64> = probs.into_iter().map(|p| p.max(0.0)).collect();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            cumulative.push(acc);
            if *p > 0.0 {
                last_positive = i;
            }
        }
        Ok(Self {
            probs,
            cumulative,
            last_positive,
        })
    }

    /// Normalizes arbitrary nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(QmhError::InvalidDistribution(format!(
                "weights sum to {sum}"
            )));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn delta(n: usize, at: usize) -> Result<Self> {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, a: usize) -> f64 {
        self.probs[a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Collision probability `sum_a p(a)^2`.
    pub fn collision(&self) -> f64 {
        self.probs.iter().map(|p| p * p).sum()
    }

    /// Inverse-CDF draw; ties break toward the lower index and the final
    /// positive bucket absorbs cumulative rounding.
    pub fn sample(&self, rng: &mut RandomStream) -> usize {
        let u = rng.uniform();
        match self
            .cumulative
            .iter()
            .position(|c| u < *c)
        {
            Some(i) if self.probs[i] > 0.0 => i,
            Some(i) => {
                // Landed on a zero-width bucket boundary; step down to the
                // nearest positive-probability state.
                self.probs[..=i]
                    .iter()
                    .rposition(|p| *p > 0.0)
                    .unwrap_or(self.last_positive)
            }
            None => self.last_positive,
        }
    }
}

/// Thermal distribution `p(a) = exp(-beta E(a)) / Z`.
pub fn thermal_distribution(
    energy: &EnergyTable,
    beta: InverseTemperature,
) -> Result<Distribution> {
    let e_min = energy.min();
    let weights: Vec<f64> = energy
        .values()
        .iter()
        .map(|e| (-beta.value() * (e - e_min)).exp())
        .collect();
    Distribution::from_weights(&weights)
}

/// Total-variation distance `(1/2) sum_a |p(a) - q(a)|`.
pub fn tv_distance(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(QmhError::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(tv_slices(p.probs(), q.probs()))
}

pub(crate) fn tv_slices(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// Row-stochastic kernel; `row(a)` is the conditional law of the next
/// state given the current state `a`.
#[derive(Debug, Clone)]
pub struct StochasticKernel {
    rows: Vec<Distribution>,
}

impl StochasticKernel {
    pub fn from_rows(rows: Vec<Distribution>) -> Result<Self> {
        if rows.is_empty() {
            return Err(QmhError::EmptyStateSpace);
        }
        let n = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(QmhError::InvalidKernelRow(
                    i,
                    format!("length {} in a {n}-state kernel", r.len()),
                ));
            }
        }
        Ok(Self { rows })
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, a: usize) -> &Distribution {
        &self.rows[a]
    }

    /// Transition probability into `b` from `a`.
    pub fn prob(&self, a: usize, b: usize) -> f64 {
        self.rows[a].prob(b)
    }

    /// One step of the chain on a distribution: `q(b) = sum_a K(b|a) p(a)`.
    pub fn push_forward(&self, p: &Distribution) -> Result<Distribution> {
        if p.len() != self.size() {
            return Err(QmhError::DimensionMismatch {
                expected: self.size(),
                got: p.len(),
            });
        }
        let n = self.size();
        let mut out = vec![0.0; n];
        for a in 0..n {
            let pa = p.prob(a);
            if pa == 0.0 {
                continue;
            }
            for b in 0..n {
                out[b] += self.prob(a, b) * pa;
            }
        }
        Distribution::from_weights(&out)
    }

    /// Kernel composition: first `self`, then `next`.
    pub fn compose(&self, next: &StochasticKernel) -> Result<StochasticKernel> {
        if next.size() != self.size() {
            return Err(QmhError::DimensionMismatch {
                expected: self.size(),
                got: next.size(),
            });
        }
        let n = self.size();
        let mut rows = Vec::with_capacity(n);
        for a in 0..n {
            let mut row = vec![0.0; n];
            for m in 0..n {
                let k1 = self.prob(a, m);
                if k1 == 0.0 {
                    continue;
                }
                for b in 0..n {
                    row[b] += k1 * next.prob(m, b);
                }
            }
            rows.push(Distribution::from_weights(&row)?);
        }
        StochasticKernel::from_rows(rows)
    }
}

/// Retention rate of a kernel: the maximum total-variation distance
/// between rows. A rank-one kernel (all rows equal) retains nothing and
/// scores 0; the identity on two or more states scores 1.
pub fn retention_rate(kernel: &StochasticKernel) -> f64 {
    let n = kernel.size();
    if n < 2 {
        return 0.0;
    }
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            let d = tv_slices(kernel.row(a).probs(), kernel.row(b).probs());
            worst = worst.max(d);
        }
    }
    worst.min(1.0)
}
