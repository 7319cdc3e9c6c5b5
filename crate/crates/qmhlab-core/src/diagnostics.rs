//! Sampling-cost model and trace-level diagnostics.
//!
//! The cost formulas estimate the Hamiltonian-evolution time needed per
//! effectively independent thermal sample as a function of the chain's
//! retention rate, the tolerated truncation error, and the energy
//! measurement spread. The trace diagnostics recover coarse proxies for
//! those inputs from recorded runs: an observation-level retention
//! estimate and a conditioned truncation-rate maximum. Both proxies are
//! biased by construction and are labeled as such; they inform
//! parameter choices rather than certify error bounds.

use crate::error::QmhError;
use crate::imprecise::UpdateRecord;
use crate::model::{retention_rate, Distribution, StochasticKernel};
use crate::Result;

/// Number of energy bins used to condition truncation statistics on
/// the previously observed energy.
pub const OMEGA_BINS: usize = 8;

/// Inputs of the sampling-cost estimate.
#[derive(Debug, Clone, Copy)]
pub struct CostModelInputs {
    /// Retention-rate estimate of the truncated update chain, in [0, 1).
    pub omega_tilde: f64,
    /// Tolerated truncation error, in (0, 1).
    pub eps_tilde: f64,
    /// Inverse temperature, positive.
    pub beta: f64,
    /// Energy measurement spread, positive.
    pub sigma: f64,
    /// Baseline halting spread from measurement-channel uncertainty,
    /// nonnegative.
    pub sigma0: f64,
}

impl CostModelInputs {
    pub fn new(
        omega_tilde: f64,
        eps_tilde: f64,
        beta: f64,
        sigma: f64,
        sigma0: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&omega_tilde) {
            return Err(QmhError::InvalidParameter {
                name: "omega_tilde",
                reason: format!("{omega_tilde} outside [0, 1)"),
            });
        }
        if !eps_tilde.is_finite() || eps_tilde <= 0.0 || eps_tilde >= 1.0 {
            return Err(QmhError::InvalidParameter {
                name: "eps_tilde",
                reason: format!("{eps_tilde} outside (0, 1)"),
            });
        }
        if !beta.is_finite() || beta <= 0.0 {
            return Err(QmhError::InvalidParameter {
                name: "beta",
                reason: format!("{beta} is not a positive rate"),
            });
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(QmhError::InvalidParameter {
                name: "sigma",
                reason: format!("{sigma} is not a positive spread"),
            });
        }
        if !sigma0.is_finite() || sigma0 < 0.0 {
            return Err(QmhError::InvalidParameter {
                name: "sigma0",
                reason: format!("{sigma0} is not a nonnegative spread"),
            });
        }
        Ok(Self {
            omega_tilde,
            eps_tilde,
            beta,
            sigma,
            sigma0,
        })
    }

    /// Inputs with the spread set to [`sigma_opt`]'s choice.
    pub fn with_optimal_sigma(
        omega_tilde: f64,
        eps_tilde: f64,
        beta: f64,
        sigma0: f64,
    ) -> Result<Self> {
        let opt = sigma_opt(beta, eps_tilde)?;
        Self::new(omega_tilde, eps_tilde, beta, opt.sigma, sigma0)
    }
}

/// Upper bound on the number of sequential samples that match the
/// variance reduction of one independent sample: (1 + omega) / (1 -
/// omega).
pub fn n_mix_bound(omega: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&omega) {
        return Err(QmhError::InvalidParameter {
            name: "omega",
            reason: format!("{omega} outside [0, 1)"),
        });
    }
    Ok((1.0 + omega) / (1.0 - omega))
}

/// Hamiltonian-evolution time per independent sample: the mixing bound
/// times the expected halting cost of energy measurements truncated to
/// evolution time `sqrt(log(1/eps)/2) / sigma` each.
pub fn t_mix(inputs: &CostModelInputs) -> f64 {
    let l = (1.0 / inputs.eps_tilde).ln();
    let spread = (inputs.sigma * inputs.sigma + inputs.sigma0 * inputs.sigma0).sqrt();
    (1.0 + inputs.omega_tilde) / (1.0 - inputs.omega_tilde)
        * (l / 2.0).sqrt()
        * (inputs.beta * spread * (2.0 * l).sqrt()).exp()
        / inputs.sigma
}

/// Spread choice minimizing [`t_mix`] at zero baseline spread, with the
/// per-measurement evolution-time cap it implies.
#[derive(Debug, Clone, Copy)]
pub struct OptimalSpread {
    pub sigma: f64,
    pub t_max: f64,
}

/// Minimizer of the sampling cost over the measurement spread when the
/// baseline spread is unknown: sigma = 1 / (beta sqrt(2 log(1/eps))),
/// giving per-measurement evolution time t_max = beta log(1/eps).
pub fn sigma_opt(beta: f64, eps_tilde: f64) -> Result<OptimalSpread> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(QmhError::InvalidParameter {
            name: "beta",
            reason: format!("{beta} is not a positive rate"),
        });
    }
    if !eps_tilde.is_finite() || eps_tilde <= 0.0 || eps_tilde >= 1.0 {
        return Err(QmhError::InvalidParameter {
            name: "eps_tilde",
            reason: format!("{eps_tilde} outside (0, 1)"),
        });
    }
    let l = (1.0 / eps_tilde).ln();
    Ok(OptimalSpread {
        sigma: 1.0 / (beta * (2.0 * l).sqrt()),
        t_max: beta * l,
    })
}

/// Closed form of [`t_mix`] at the [`sigma_opt`] spread:
/// beta log(1/eps) (1 + omega)/(1 - omega) exp(sqrt(1 + 2 beta^2
/// sigma0^2 log(1/eps))).
pub fn minimized_t_mix(
    omega_tilde: f64,
    eps_tilde: f64,
    beta: f64,
    sigma0: f64,
) -> Result<f64> {
    CostModelInputs::with_optimal_sigma(omega_tilde, eps_tilde, beta, sigma0)?;
    let l = (1.0 / eps_tilde).ln();
    let exponent = (1.0 + 2.0 * beta * beta * sigma0 * sigma0 * l).sqrt();
    Ok(beta * l * (1.0 + omega_tilde) / (1.0 - omega_tilde) * exponent.exp())
}

/// Origin of a recorded observation stream, which determines how the
/// coarse retention estimate must be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceProvenance {
    /// Chain over fully observed classical states: the coarse estimate
    /// can only underestimate the chain's retention rate.
    Classical,
    /// Observations of quantum updates: coarse-graining over the
    /// hidden state gives a biased estimate with no one-sided
    /// guarantee.
    Quantum,
}

/// Observation-level retention estimated from consecutive pairs.
#[derive(Debug, Clone)]
pub struct CoarseRetention {
    pub omega_bar: f64,
    /// Observation classes that never occur as a transition source and
    /// were left out of the estimated kernel.
    pub excluded_classes: Vec<usize>,
    pub provenance: TraceProvenance,
    /// Trace length the estimate was computed from.
    pub samples: usize,
}

impl CoarseRetention {
    /// How the estimate relates to the true retention rate.
    pub fn bias_label(&self) -> &'static str {
        match self.provenance {
            TraceProvenance::Classical => "underestimate",
            TraceProvenance::Quantum => "biased",
        }
    }
}

const MIN_TRACE_LEN: usize = 1000;

/// Estimates an observation-level transition matrix from consecutive
/// pairs of `trace` and reports its retention rate. Classes without
/// outgoing transitions are excluded and listed.
pub fn coarse_retention_from_trace(
    trace: &[usize],
    obs_size: usize,
    provenance: TraceProvenance,
) -> Result<CoarseRetention> {
    if trace.len() < MIN_TRACE_LEN {
        return Err(QmhError::TraceTooShort);
    }
    if obs_size == 0 {
        return Err(QmhError::EmptyStateSpace);
    }
    if let Some(&bad) = trace.iter().find(|&&o| o >= obs_size) {
        return Err(QmhError::DimensionMismatch {
            expected: obs_size,
            got: bad + 1,
        });
    }
    let mut counts = vec![vec![0u64; obs_size]; obs_size];
    for pair in trace.windows(2) {
        counts[pair[0]][pair[1]] += 1;
    }
    let kept: Vec<usize> = (0..obs_size)
        .filter(|&o| counts[o].iter().any(|&c| c > 0))
        .collect();
    let excluded: Vec<usize> = (0..obs_size).filter(|o| !kept.contains(o)).collect();
    if kept.len() < 2 {
        return Err(QmhError::InvalidParameter {
            name: "trace",
            reason: "fewer than two observation classes have outgoing transitions".into(),
        });
    }
    let rows = kept
        .iter()
        .map(|&o| {
            let weights: Vec<f64> = kept
                .iter()
                .map(|&t| counts[o][t] as f64)
                .collect();
            Distribution::from_weights(&weights)
        })
        .collect::<Result<Vec<_>>>()?;
    let kernel = StochasticKernel::from_rows(rows)?;
    Ok(CoarseRetention {
        omega_bar: retention_rate(&kernel),
        excluded_classes: excluded,
        provenance,
        samples: trace.len(),
    })
}

/// Conditioned truncation-rate maximum over observable input classes.
#[derive(Debug, Clone)]
pub struct EpsilonMaxReport {
    /// Largest per-group truncation frequency.
    pub eps_max: f64,
    /// Largest per-group Wilson upper confidence limit.
    pub upper_bound: f64,
    /// Group key attaining `eps_max`: previous final observation label
    /// and energy bin.
    pub argmax_group: (usize, usize),
    pub group_count: usize,
    /// Updates contributing to some group (all but the first record).
    pub samples: usize,
    /// Number of energy bins in the grouping key.
    pub omega_bins: usize,
}

fn wilson_upper(successes: u64, total: u64) -> f64 {
    const Z: f64 = 1.96;
    let n = total as f64;
    let p = successes as f64 / n;
    let z2 = Z * Z;
    let center = p + z2 / (2.0 * n);
    let margin = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center + margin) / (1.0 + z2 / n)).min(1.0)
}

/// Estimates the worst-case truncation rate by grouping each update on
/// the final observation of the one before it: the label together with
/// the measured energy discretized into [`OMEGA_BINS`] equal-width
/// bins. The true maximum conditions on the hidden input state, so the
/// result is a biased observable proxy.
pub fn epsilon_max_estimate(records: &[UpdateRecord]) -> Result<EpsilonMaxReport> {
    if records.len() < 2 {
        return Err(QmhError::EmptyInput("records"));
    }
    let keys: Vec<(usize, f64)> = records[..records.len() - 1]
        .iter()
        .map(|r| {
            let last = r.trajectory.rounds();
            (r.trajectory.observation(last), r.trajectory.energy(last))
        })
        .collect();
    let omega_lo = keys.iter().map(|k| k.1).fold(f64::INFINITY, f64::min);
    let omega_hi = keys.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max);
    let width = (omega_hi - omega_lo) / OMEGA_BINS as f64;
    let bin = |omega: f64| -> usize {
        if width <= 0.0 {
            return 0;
        }
        (((omega - omega_lo) / width) as usize).min(OMEGA_BINS - 1)
    };
    let mut groups: std::collections::BTreeMap<(usize, usize), (u64, u64)> =
        std::collections::BTreeMap::new();
    for (key, record) in keys.iter().zip(records[1..].iter()) {
        let entry = groups.entry((key.0, bin(key.1))).or_insert((0, 0));
        entry.1 += 1;
        if record.truncated {
            entry.0 += 1;
        }
    }
    let mut eps_max = 0.0;
    let mut upper = 0.0;
    let mut argmax = (0, 0);
    for (&key, &(truncated, total)) in &groups {
        if total == 0 {
            continue;
        }
        let rate = truncated as f64 / total as f64;
        if rate > eps_max {
            eps_max = rate;
            argmax = key;
        }
        upper = f64::max(upper, wilson_upper(truncated, total));
    }
    Ok(EpsilonMaxReport {
        eps_max,
        upper_bound: upper,
        argmax_group: argmax,
        group_count: groups.len(),
        samples: records.len() - 1,
        omega_bins: OMEGA_BINS,
    })
}

/// Denominator of the stationary-error bound after replacing exact
/// rates with their observable proxies; a clipped value means the
/// bound is vacuous at these estimates.
pub fn error_bound_denominator(omega_tilde: f64, eps_max: f64) -> (f64, bool) {
    let raw = 1.0 - omega_tilde - eps_max;
    (raw.max(0.0), raw <= 0.0)
}
