//! Classical Metropolis-Hastings chains.
//!
//! Given a driver kernel `P` and energies `E`, a proposal `b` from state
//! `a` is accepted with probability
//! `A(b,a) = min{1, exp(beta (E(a)-E(b))) P(a|b) / P(b|a)}`,
//! and a rejected proposal leaves the state in place. The resulting
//! kernel `M(b|a) = A(b,a) P(b|a) + delta_{a,b} sum_c (1-A(c,a)) P(c|a)`
//! is in detailed balance with the thermal distribution.
//!
//! Besides the sampler itself this module builds `M` exactly, splits it
//! into its accepted part, evolves distributions and pair distributions
//! under it, embeds a model into a larger space with near-degenerate
//! levels, and coarse-grains kernels over a state partition.

use crate::error::QmhError;
use crate::model::{
    retention_rate, thermal_distribution, tv_distance, tv_slices, Distribution, EnergyTable,
    InverseTemperature, StateSpace, StochasticKernel,
};
use crate::rng::RandomStream;
use crate::Result;

/// Largest state count for exact kernel construction.
pub const KERNEL_SIZE_LIMIT: usize = 4096;

/// A thermalizing chain: state space, energies, inverse temperature, and
/// the proposal (driver) kernel.
#[derive(Debug, Clone)]
pub struct MhModel {
    pub space: StateSpace,
    pub energy: EnergyTable,
    pub beta: InverseTemperature,
    pub driver: StochasticKernel,
}

impl MhModel {
    pub fn new(
        space: StateSpace,
        energy: EnergyTable,
        beta: InverseTemperature,
        driver: StochasticKernel,
    ) -> Result<Self> {
        if energy.len() != space.size() {
            return Err(QmhError::DimensionMismatch {
                expected: space.size(),
                got: energy.len(),
            });
        }
        if driver.size() != space.size() {
            return Err(QmhError::DimensionMismatch {
                expected: space.size(),
                got: driver.size(),
            });
        }
        Ok(Self {
            space,
            energy,
            beta,
            driver,
        })
    }

    /// Thermal distribution targeted by the chain.
    pub fn thermal(&self) -> Result<Distribution> {
        thermal_distribution(&self.energy, self.beta)
    }

    pub fn size(&self) -> usize {
        self.space.size()
    }
}

/// Acceptance probability for proposal `b` from state `a`.
///
/// Errors when `P(b|a) = 0`: the proposal cannot occur, so its
/// acceptance carries no meaning.
pub fn mh_acceptance(model: &MhModel, a: usize, b: usize) -> Result<f64> {
    let forward = model.driver.prob(a, b);
    if forward == 0.0 {
        return Err(QmhError::UndefinedAcceptance { from: a, to: b });
    }
    let backward = model.driver.prob(b, a);
    if backward == 0.0 {
        return Ok(0.0);
    }
    let boltzmann = (model.beta.value() * (model.energy.get(a) - model.energy.get(b))).exp();
    Ok((boltzmann * (backward / forward)).min(1.0))
}

/// Outcome of one chain update.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub next: usize,
    pub proposal: usize,
    pub accepted: bool,
}

/// One Metropolis-Hastings update from state `a`.
pub fn mh_step(model: &MhModel, a: usize, rng: &mut RandomStream) -> Result<StepOutcome> {
    let proposal = model.driver.row(a).sample(rng);
    let acceptance = mh_acceptance(model, a, proposal)?;
    let accepted = rng.uniform() < acceptance;
    Ok(StepOutcome {
        next: if accepted { proposal } else { a },
        proposal,
        accepted,
    })
}

/// Builds the full chain kernel `M` exactly.
pub fn build_pm_kernel(model: &MhModel) -> Result<StochasticKernel> {
    let n = model.size();
    if n > KERNEL_SIZE_LIMIT {
        return Err(QmhError::SizeGuard {
            size: n,
            limit: KERNEL_SIZE_LIMIT,
        });
    }
    let mut rows = Vec::with_capacity(n);
    for a in 0..n {
        let mut row = vec![0.0; n];
        let mut rejected = 0.0;
        for b in 0..n {
            let p = model.driver.prob(a, b);
            if p == 0.0 {
                continue;
            }
            let acc = mh_acceptance(model, a, b)?;
            row[b] += acc * p;
            rejected += (1.0 - acc) * p;
        }
        row[a] += rejected;
        rows.push(Distribution::new(row)?);
    }
    StochasticKernel::from_rows(rows)
}

/// Detailed-balance and stationarity residuals of a kernel against a
/// candidate stationary distribution.
#[derive(Debug, Clone, Copy)]
pub struct BalanceReport {
    /// `max_{a,b} |K(b|a) p(a) - K(a|b) p(b)|`.
    pub max_flow_violation: f64,
    /// `sum_b |sum_a K(b|a) p(a) - p(b)|`.
    pub stationarity_l1: f64,
}

pub fn check_detailed_balance(kernel: &StochasticKernel, p: &Distribution) -> Result<BalanceReport> {
    let n = kernel.size();
    if p.len() != n {
        return Err(QmhError::DimensionMismatch {
            expected: n,
            got: p.len(),
        });
    }
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            let flow = kernel.prob(a, b) * p.prob(a) - kernel.prob(b, a) * p.prob(b);
            worst = worst.max(flow.abs());
        }
    }
    let mut l1 = 0.0;
    for b in 0..n {
        let mut inflow = 0.0;
        for a in 0..n {
            inflow += kernel.prob(a, b) * p.prob(a);
        }
        l1 += (inflow - p.prob(b)).abs();
    }
    Ok(BalanceReport {
        max_flow_violation: worst,
        stationarity_l1: l1,
    })
}

/// Rejection-rate report. `lambda` is the stationary probability that an
/// update rejects its proposal; it equals the total-variation form
/// `(1/2) sum_{a,b} |P(b|a) p(a) - P(a|b) p(b)|` over driver flows, and
/// it upper-bounds the distance between the stationary try distribution
/// and the thermal distribution.
#[derive(Debug, Clone, Copy)]
pub struct RejectionReport {
    pub lambda: f64,
    pub tv_form: f64,
    pub try_distance: f64,
}

pub fn rejection_rate(model: &MhModel) -> Result<RejectionReport> {
    let n = model.size();
    let p = model.thermal()?;
    let mut accepted_mass = 0.0;
    let mut tv_form = 0.0;
    let mut p_try = vec![0.0; n];
    for a in 0..n {
        for b in 0..n {
            let fwd = model.driver.prob(a, b) * p.prob(a);
            let bwd = model.driver.prob(b, a) * p.prob(b);
            tv_form += 0.5 * (fwd - bwd).abs();
            p_try[b] += fwd;
            if model.driver.prob(a, b) > 0.0 {
                accepted_mass += mh_acceptance(model, a, b)? * fwd;
            }
        }
    }
    let lambda = 1.0 - accepted_mass;
    if (lambda - tv_form).abs() > 1e-12 {
        return Err(QmhError::InvalidParameter {
            name: "rejection_rate",
            reason: format!("direct form {lambda} disagrees with flow form {tv_form}"),
        });
    }
    let try_distance = tv_slices(&p_try, p.probs());
    if try_distance > lambda + 1e-12 {
        return Err(QmhError::InvalidParameter {
            name: "rejection_rate",
            reason: format!("try distance {try_distance} exceeds rejection rate {lambda}"),
        });
    }
    Ok(RejectionReport {
        lambda,
        tv_form,
        try_distance,
    })
}

/// Conditional per-state rejection probabilities
/// `lambda(a) = sum_c (1 - A(c,a)) P(c|a)`.
pub fn per_state_rejection(model: &MhModel) -> Result<Vec<f64>> {
    let n = model.size();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut rejected = 0.0;
        for c in 0..n {
            let p = model.driver.prob(a, c);
            if p > 0.0 {
                rejected += (1.0 - mh_acceptance(model, a, c)?) * p;
            }
        }
        out.push(rejected);
    }
    Ok(out)
}

/// The chain kernel conditioned on acceptance:
/// `P_A(b|a) = A(b,a) P(b|a) / (1 - lambda(a))`.
///
/// Errors when some state rejects with probability one.
pub fn acceptance_split(model: &MhModel) -> Result<(StochasticKernel, Vec<f64>)> {
    let n = model.size();
    let lambdas = per_state_rejection(model)?;
    let mut rows = Vec::with_capacity(n);
    for a in 0..n {
        let keep = 1.0 - lambdas[a];
        if keep <= 0.0 {
            return Err(QmhError::InvalidParameter {
                name: "acceptance_split",
                reason: format!("state {a} rejects almost surely"),
            });
        }
        let mut row = vec![0.0; n];
        for b in 0..n {
            let p = model.driver.prob(a, b);
            if p > 0.0 {
                row[b] = mh_acceptance(model, a, b)? * p / keep;
            }
        }
        rows.push(Distribution::from_weights(&row)?);
    }
    Ok((StochasticKernel::from_rows(rows)?, lambdas))
}

/// Kernel of the repeat-until-accept variant that gives each update at
/// most `n` proposal attempts, staying put if all reject:
/// `M_n(b|a) = A(b,a) P(b|a) (1 + lambda(a) + ... + lambda(a)^{n-1})
///  + delta_{a,b} lambda(a)^n`.
pub fn repeat_until_accept_kernel(model: &MhModel, n: usize) -> Result<StochasticKernel> {
    if n == 0 {
        return Err(QmhError::InvalidParameter {
            name: "n",
            reason: "at least one attempt is required".into(),
        });
    }
    let size = model.size();
    let lambdas = per_state_rejection(model)?;
    let mut rows = Vec::with_capacity(size);
    for a in 0..size {
        let lam = lambdas[a];
        let geom: f64 = if lam == 1.0 {
            n as f64
        } else {
            (1.0 - lam.powi(n as i32)) / (1.0 - lam)
        };
        let mut row = vec![0.0; size];
        for b in 0..size {
            let p = model.driver.prob(a, b);
            if p > 0.0 {
                row[b] += mh_acceptance(model, a, b)? * p * geom;
            }
        }
        row[a] += lam.powi(n as i32);
        rows.push(Distribution::new(row)?);
    }
    StochasticKernel::from_rows(rows)
}

/// Exactly solvable chain family on `S + {infinity}`.
///
/// The driver proposes a fresh sample of the target distribution with
/// probability `1 - omega` (diluted by weight `lambda` on an extra state
/// of zero stationary mass) and stays put otherwise. The chain built
/// from it is again of the same form, with retention
/// `1 - (1 - omega)(1 - lambda)`.
#[derive(Debug, Clone)]
pub struct ExampleFamily {
    /// Driver kernel on the extended space.
    pub driver: StochasticKernel,
    /// Chain kernel on the extended space.
    pub kernel: StochasticKernel,
    /// `1 - (1 - omega)(1 - lambda)`.
    pub predicted_retention: f64,
    /// Target distribution padded with a zero entry.
    pub extended_target: Distribution,
}

/// Builds the example family for a strictly positive target `p`.
///
/// Acceptance follows the zero-mass limit of the extension point: moves
/// into it are always rejected, moves out of it are always accepted when
/// the reverse proposal is possible, and the `lambda = 0` boundary keeps
/// the out-moves accepted so the family stays continuous in `lambda`.
pub fn example_family_kernel(
    target: &Distribution,
    lambda: f64,
    omega: f64,
) -> Result<ExampleFamily> {
    for v in [lambda, omega] {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(QmhError::InvalidParameter {
                name: "lambda/omega",
                reason: format!("{v} outside [0,1]"),
            });
        }
    }
    let s = target.len();
    if target.probs().iter().any(|p| *p <= 0.0) {
        return Err(QmhError::InvalidDistribution(
            "example family needs a strictly positive target".into(),
        ));
    }
    let ext = s; // index of the zero-mass extension state
    let n = s + 1;

    // p'(b) = (1 - lambda) p(b) on S, lambda at the extension state.
    let mut p_prime = vec![0.0; n];
    for b in 0..s {
        p_prime[b] = (1.0 - lambda) * target.prob(b);
    }
    p_prime[ext] = lambda;

    let mut driver_rows = Vec::with_capacity(n);
    for a in 0..n {
        let mut row: Vec<f64> = p_prime.iter().map(|q| (1.0 - omega) * q).collect();
        row[a] += omega;
        driver_rows.push(Distribution::new(row)?);
    }
    let driver = StochasticKernel::from_rows(driver_rows)?;

    // Acceptance in the zero-mass limit: within S the thermal ratio
    // cancels the driver ratio exactly, so every proposal is accepted;
    // proposals into the extension state are rejected outright; and
    // proposals out of it are accepted.
    let mut kernel_rows = Vec::with_capacity(n);
    for a in 0..n {
        let mut row = vec![0.0; n];
        let mut rejected = 0.0;
        for b in 0..n {
            let p = driver.prob(a, b);
            if p == 0.0 {
                continue;
            }
            let acc = if b == a {
                1.0
            } else if b == ext {
                0.0
            } else {
                1.0
            };
            row[b] += acc * p;
            rejected += (1.0 - acc) * p;
        }
        row[a] += rejected;
        kernel_rows.push(Distribution::new(row)?);
    }
    let mut extended = target.probs().to_vec();
    extended.push(0.0);
    Ok(ExampleFamily {
        driver,
        kernel: StochasticKernel::from_rows(kernel_rows)?,
        predicted_retention: 1.0 - (1.0 - omega) * (1.0 - lambda),
        extended_target: Distribution::new(extended)?,
    })
}

/// A model embedded into a space with `floor(n exp(beta (E_max - E(a))))`
/// internal levels per state, each carrying energy
/// `E(a) + log(levels) / beta`, with a uniform driver.
#[derive(Debug, Clone)]
pub struct EmbeddedModel {
    pub model: MhModel,
    /// Original state behind each embedded index.
    pub parent: Vec<usize>,
    /// Level count per original state.
    pub level_counts: Vec<usize>,
}

pub fn embed_state_space(model: &MhModel, n: usize) -> Result<EmbeddedModel> {
    if n == 0 {
        return Err(QmhError::InvalidParameter {
            name: "n",
            reason: "at least one level per state".into(),
        });
    }
    let beta = model.beta.value();
    if beta == 0.0 {
        return Err(QmhError::EmbeddingAtZeroBeta);
    }
    let e_max = model.energy.max();
    let mut parent = Vec::new();
    let mut level_counts = Vec::with_capacity(model.size());
    let mut energies = Vec::new();
    for a in 0..model.size() {
        let count = (n as f64 * (beta * (e_max - model.energy.get(a))).exp()).floor();
        if !(count >= 1.0) {
            return Err(QmhError::InvalidParameter {
                name: "embedding",
                reason: format!("state {a} receives no internal levels"),
            });
        }
        let count = count as usize;
        let lifted = model.energy.get(a) + (count as f64).ln() / beta;
        for _ in 0..count {
            parent.push(a);
            energies.push(lifted);
        }
        level_counts.push(count);
    }
    let total = parent.len();
    if total > KERNEL_SIZE_LIMIT {
        return Err(QmhError::SizeGuard {
            size: total,
            limit: KERNEL_SIZE_LIMIT,
        });
    }
    let uniform_row = Distribution::uniform(total)?;
    let driver = StochasticKernel::from_rows(vec![uniform_row; total])?;
    let embedded = MhModel::new(
        StateSpace::new(total)?,
        EnergyTable::new(energies)?,
        model.beta,
        driver,
    )?;
    Ok(EmbeddedModel {
        model: embedded,
        parent,
        level_counts,
    })
}

/// Coarse-grains a kernel over a state partition, weighting source
/// states by a reference distribution:
/// `K(b'|a') = sum_{b in b'} sum_{a in a'} K(b|a) p(a) / p(a')`.
pub fn coarse_grain_kernel(
    kernel: &StochasticKernel,
    p: &Distribution,
    classes: &[usize],
) -> Result<(StochasticKernel, Distribution)> {
    let n = kernel.size();
    if classes.len() != n || p.len() != n {
        return Err(QmhError::DimensionMismatch {
            expected: n,
            got: classes.len().min(p.len()),
        });
    }
    let m = classes.iter().max().map_or(0, |c| c + 1);
    let mut class_mass = vec![0.0; m];
    for a in 0..n {
        class_mass[classes[a]] += p.prob(a);
    }
    for (c, mass) in class_mass.iter().enumerate() {
        if *mass <= 0.0 {
            return Err(QmhError::EmptyClass(c));
        }
    }
    let mut rows = vec![vec![0.0; m]; m];
    for a in 0..n {
        let weight = p.prob(a) / class_mass[classes[a]];
        if weight == 0.0 {
            continue;
        }
        for b in 0..n {
            rows[classes[a]][classes[b]] += kernel.prob(a, b) * weight;
        }
    }
    let coarse = StochasticKernel::from_rows(
        rows.iter()
            .map(|row| Distribution::from_weights(row))
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok((coarse, Distribution::new(class_mass)?))
}

/// Exact `n`-step evolution of a distribution.
pub fn propagate(kernel: &StochasticKernel, p0: &Distribution, n: usize) -> Result<Distribution> {
    let mut p = p0.clone();
    for _ in 0..n {
        p = kernel.push_forward(&p)?;
    }
    Ok(p)
}

/// Joint law of (state after `n` steps, starting state) when the start
/// is drawn from `p` and remembered.
#[derive(Debug, Clone)]
pub struct PairDistribution {
    /// `joint[a][x] = p(a) K^n(x|a)`.
    joint: Vec<Vec<f64>>,
}

impl PairDistribution {
    pub fn joint(&self) -> &[Vec<f64>] {
        &self.joint
    }

    /// Total-variation distance to the product `p (x) p`.
    pub fn tv_from_product(&self, p: &Distribution) -> f64 {
        let mut acc = 0.0;
        for (a, row) in self.joint.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                acc += (v - p.prob(a) * p.prob(x)).abs();
            }
        }
        0.5 * acc
    }
}

pub fn pair_propagate(
    kernel: &StochasticKernel,
    p: &Distribution,
    n: usize,
) -> Result<PairDistribution> {
    let size = kernel.size();
    if p.len() != size {
        return Err(QmhError::DimensionMismatch {
            expected: size,
            got: p.len(),
        });
    }
    let mut joint = Vec::with_capacity(size);
    for a in 0..size {
        let evolved = propagate(kernel, &Distribution::delta(size, a)?, n)?;
        joint.push(evolved.probs().iter().map(|k| k * p.prob(a)).collect());
    }
    Ok(PairDistribution { joint })
}

/// Convenience: retention rate of the chain kernel built from a model.
pub fn chain_retention(model: &MhModel) -> Result<f64> {
    Ok(retention_rate(&build_pm_kernel(model)?))
}

/// Shared helper for tests and diagnostics: distance of an evolved
/// distribution from the thermal one.
pub fn distance_to_thermal(model: &MhModel, p: &Distribution, steps: usize) -> Result<f64> {
    let kernel = build_pm_kernel(model)?;
    let evolved = propagate(&kernel, p, steps)?;
    tv_distance(&evolved, &model.thermal()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state_uniform_driver() -> MhModel {
        let driver = StochasticKernel::from_rows(vec![
            Distribution::uniform(2).unwrap(),
            Distribution::uniform(2).unwrap(),
        ])
        .unwrap();
        MhModel::new(
            StateSpace::new(2).unwrap(),
            EnergyTable::new(vec![0.0, 1.0]).unwrap(),
            InverseTemperature::new(1.0).unwrap(),
            driver,
        )
        .unwrap()
    }

    fn random_model(size: usize, rng: &mut RandomStream) -> MhModel {
        let energies: Vec<f64> = (0..size).map(|_| 4.0 * rng.uniform() - 2.0).collect();
        let rows: Vec<Distribution> = (0..size)
            .map(|_| {
                let w: Vec<f64> = (0..size).map(|_| 0.05 + rng.uniform()).collect();
                Distribution::from_weights(&w).unwrap()
            })
            .collect();
        MhModel::new(
            StateSpace::new(size).unwrap(),
            EnergyTable::new(energies).unwrap(),
            InverseTemperature::new(0.2 + 2.0 * rng.uniform()).unwrap(),
            StochasticKernel::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn acceptance_oracle_uphill_move() {
        let model = two_state_uniform_driver();
        assert_abs_diff_eq!(
            mh_acceptance(&model, 0, 1).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        assert_eq!(mh_acceptance(&model, 1, 0).unwrap(), 1.0);
        assert_eq!(mh_acceptance(&model, 0, 0).unwrap(), 1.0);
    }

    #[test]
    fn acceptance_undefined_for_impossible_proposal() {
        let driver = StochasticKernel::from_rows(vec![
            Distribution::new(vec![1.0, 0.0]).unwrap(),
            Distribution::new(vec![0.5, 0.5]).unwrap(),
        ])
        .unwrap();
        let model = MhModel::new(
            StateSpace::new(2).unwrap(),
            EnergyTable::new(vec![0.0, 0.0]).unwrap(),
            InverseTemperature::new(1.0).unwrap(),
            driver,
        )
        .unwrap();
        assert!(matches!(
            mh_acceptance(&model, 0, 1),
            Err(QmhError::UndefinedAcceptance { from: 0, to: 1 })
        ));
        // Reverse direction is possible but never accepted.
        assert_eq!(mh_acceptance(&model, 1, 1).unwrap(), 1.0);
        assert_eq!(mh_acceptance(&model, 1, 0).unwrap(), 0.0);
    }

    #[test]
    fn kernel_oracle_and_retention() {
        let model = two_state_uniform_driver();
        let kernel = build_pm_kernel(&model).unwrap();
        let a = (-1.0f64).exp();
        assert_abs_diff_eq!(kernel.prob(0, 1), 0.5 * a, epsilon = 1e-15);
        assert_abs_diff_eq!(kernel.prob(0, 0), 1.0 - 0.5 * a, epsilon = 1e-15);
        assert_abs_diff_eq!(kernel.prob(1, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            retention_rate(&kernel),
            0.5 * (1.0 - a),
            epsilon = 1e-15
        );
    }

    #[test]
    fn random_models_satisfy_detailed_balance() {
        let mut rng = RandomStream::derive(2024, 0, "classical-db");
        for _ in 0..50 {
            let size = 2 + rng.below(7);
            let model = random_model(size, &mut rng);
            let kernel = build_pm_kernel(&model).unwrap();
            let p = model.thermal().unwrap();
            let report = check_detailed_balance(&kernel, &p).unwrap();
            assert!(report.max_flow_violation < 1e-14, "{report:?}");
            assert!(report.stationarity_l1 < 1e-13, "{report:?}");
        }
    }

    #[test]
    fn rejection_rate_oracle() {
        let model = two_state_uniform_driver();
        let r = rejection_rate(&model).unwrap();
        let e = (-1.0f64).exp();
        let expected = (1.0 - e) / (2.0 * (1.0 + e));
        assert_abs_diff_eq!(r.lambda, expected, epsilon = 1e-14);
        assert_abs_diff_eq!(r.tv_form, expected, epsilon = 1e-14);
        assert!(r.try_distance <= r.lambda + 1e-15);
    }

    #[test]
    fn rejection_rate_try_bound_on_random_models() {
        let mut rng = RandomStream::derive(5, 0, "classical-reject");
        for _ in 0..30 {
            let model = random_model(2 + rng.below(5), &mut rng);
            let r = rejection_rate(&model).unwrap();
            assert!(r.lambda >= -1e-15 && r.lambda <= 1.0 + 1e-15);
            assert!(r.try_distance <= r.lambda + 1e-12);
        }
    }

    #[test]
    fn repeat_until_accept_converges_to_acceptance_split() {
        let model = two_state_uniform_driver();
        let (split, lambdas) = acceptance_split(&model).unwrap();
        assert!(lambdas.iter().all(|l| *l < 1.0));
        let k64 = repeat_until_accept_kernel(&model, 64).unwrap();
        for a in 0..2 {
            let d = tv_distance(k64.row(a), split.row(a)).unwrap();
            assert!(d < 1e-9, "row {a}: {d}");
        }
        // One attempt reproduces the plain chain kernel.
        let k1 = repeat_until_accept_kernel(&model, 1).unwrap();
        let m = build_pm_kernel(&model).unwrap();
        for a in 0..2 {
            assert!(tv_distance(k1.row(a), m.row(a)).unwrap() < 1e-15);
        }
    }

    #[test]
    fn example_family_matches_prediction() {
        let target = Distribution::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
        let fam = example_family_kernel(&target, 0.5, 0.5).unwrap();
        assert_abs_diff_eq!(fam.predicted_retention, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(
            retention_rate(&fam.kernel),
            0.75,
            epsilon = 1e-12
        );
        // The kernel leaves the padded target invariant.
        let pushed = fam.kernel.push_forward(&fam.extended_target).unwrap();
        assert!(tv_distance(&pushed, &fam.extended_target).unwrap() < 1e-14);
    }

    #[test]
    fn example_family_agrees_with_generic_construction() {
        // Realize the extension state as a finite state of very high
        // energy; the generic chain construction must reproduce the
        // closed-form kernel.
        let target = Distribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let (lambda, omega) = (0.35, 0.2);
        let fam = example_family_kernel(&target, lambda, omega).unwrap();
        let energies: Vec<f64> = target
            .probs()
            .iter()
            .map(|p| -p.ln())
            .chain(std::iter::once(60.0))
            .collect();
        let model = MhModel::new(
            StateSpace::new(4).unwrap(),
            EnergyTable::new(energies).unwrap(),
            InverseTemperature::new(1.0).unwrap(),
            fam.driver.clone(),
        )
        .unwrap();
        let generic = build_pm_kernel(&model).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert_abs_diff_eq!(
                    generic.prob(a, b),
                    fam.kernel.prob(a, b),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn example_family_grid_tracks_retention_formula() {
        let target = Distribution::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for omega in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let fam = example_family_kernel(&target, lambda, omega).unwrap();
                assert_abs_diff_eq!(
                    retention_rate(&fam.kernel),
                    fam.predicted_retention,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn embedding_flattens_energies_and_preserves_marginals() {
        let model = MhModel::new(
            StateSpace::new(2).unwrap(),
            EnergyTable::new(vec![0.0, 1.0]).unwrap(),
            InverseTemperature::new(1.0).unwrap(),
            StochasticKernel::from_rows(vec![
                Distribution::uniform(2).unwrap(),
                Distribution::uniform(2).unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        let embedded = embed_state_space(&model, 2).unwrap();
        assert_eq!(embedded.level_counts, vec![5, 2]);
        let spread = embedded.model.energy.max() - embedded.model.energy.values().iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.1, "lifted spread {spread}");
        let lam = rejection_rate(&embedded.model).unwrap().lambda;
        let original = rejection_rate(&model).unwrap().lambda;
        assert!(lam < original, "{lam} vs {original}");

        // The thermal marginal over internal levels reproduces the
        // original thermal distribution exactly, whatever the counts.
        let p_embedded = embedded.model.thermal().unwrap();
        let p_original = model.thermal().unwrap();
        let mut marginal = vec![0.0; 2];
        for (i, parent) in embedded.parent.iter().enumerate() {
            marginal[*parent] += p_embedded.prob(i);
        }
        for a in 0..2 {
            assert_abs_diff_eq!(marginal[a], p_original.prob(a), epsilon = 1e-12);
        }
    }

    #[test]
    fn embedding_rejection_vanishes_like_inverse_levels() {
        let mut rng = RandomStream::derive(77, 0, "embed");
        let rows: Vec<Distribution> = (0..3)
            .map(|_| {
                let w: Vec<f64> = (0..3).map(|_| 0.1 + rng.uniform()).collect();
                Distribution::from_weights(&w).unwrap()
            })
            .collect();
        let model = MhModel::new(
            StateSpace::new(3).unwrap(),
            EnergyTable::new(vec![-0.3, 0.1, 0.4]).unwrap(),
            InverseTemperature::new(1.0).unwrap(),
            StochasticKernel::from_rows(rows).unwrap(),
        )
        .unwrap();
        for n in [2usize, 4, 8, 16] {
            let embedded = embed_state_space(&model, n).unwrap();
            let lam = rejection_rate(&embedded.model).unwrap().lambda;
            // Lifted energies agree up to floor truncation, which is at
            // most 1/(n-1) in log-weight, so rejection dies off at
            // least that fast.
            assert!(lam <= 1.0 / (n as f64 - 1.0) + 1e-12, "n={n}: {lam}");
        }
    }

    #[test]
    fn embedding_rejects_zero_beta() {
        let model = MhModel::new(
            StateSpace::new(2).unwrap(),
            EnergyTable::new(vec![0.0, 1.0]).unwrap(),
            InverseTemperature::new(0.0).unwrap(),
            StochasticKernel::from_rows(vec![
                Distribution::uniform(2).unwrap(),
                Distribution::uniform(2).unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        assert!(matches!(
            embed_state_space(&model, 2),
            Err(QmhError::EmbeddingAtZeroBeta)
        ));
    }

    #[test]
    fn coarse_graining_cannot_slow_mixing() {
        let mut rng = RandomStream::derive(31, 0, "coarse");
        for _ in 0..20 {
            let model = random_model(4 + rng.below(3), &mut rng);
            let kernel = build_pm_kernel(&model).unwrap();
            let p = model.thermal().unwrap();
            let classes: Vec<usize> = (0..model.size()).map(|a| a % 2).collect();
            let (coarse, p_bar) = coarse_grain_kernel(&kernel, &p, &classes).unwrap();
            assert!(
                retention_rate(&coarse) <= retention_rate(&kernel) + 1e-12
            );
            let total: f64 = p_bar.probs().iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn coarse_graining_rejects_empty_class() {
        let model = two_state_uniform_driver();
        let kernel = build_pm_kernel(&model).unwrap();
        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        let classes = vec![0usize, 1];
        assert!(matches!(
            coarse_grain_kernel(&kernel, &p, &classes),
            Err(QmhError::EmptyClass(1))
        ));
    }

    #[test]
    fn propagation_contracts_at_retention_speed() {
        let mut rng = RandomStream::derive(8, 0, "prop");
        for _ in 0..20 {
            let model = random_model(2 + rng.below(5), &mut rng);
            let kernel = build_pm_kernel(&model).unwrap();
            let p = model.thermal().unwrap();
            let omega = retention_rate(&kernel);
            let p0 = Distribution::delta(model.size(), 0).unwrap();
            let d0 = tv_distance(&p0, &p).unwrap();
            for n in 1..=6 {
                let pn = propagate(&kernel, &p0, n).unwrap();
                let dn = tv_distance(&pn, &p).unwrap();
                assert!(
                    dn <= omega.powi(n as i32) * d0 + 1e-12,
                    "n={n}: {dn} vs {}",
                    omega.powi(n as i32) * d0
                );
            }
        }
    }

    #[test]
    fn pair_propagation_decorrelates_at_retention_speed() {
        let mut rng = RandomStream::derive(9, 0, "pair");
        for _ in 0..10 {
            let model = random_model(2 + rng.below(4), &mut rng);
            let kernel = build_pm_kernel(&model).unwrap();
            let p = model.thermal().unwrap();
            let omega = retention_rate(&kernel);
            let witness = 1.0 - p.collision();
            for n in 0..=5 {
                let pair = pair_propagate(&kernel, &p, n).unwrap();
                let d = pair.tv_from_product(&p);
                assert!(
                    d <= omega.powi(n as i32) * witness + 1e-12,
                    "n={n}: {d}"
                );
            }
        }
    }

    #[test]
    fn chain_sampler_matches_kernel_row() {
        let model = two_state_uniform_driver();
        let kernel = build_pm_kernel(&model).unwrap();
        let mut rng = RandomStream::derive(123, 0, "mh-step");
        let runs = 200_000;
        let mut hits = 0usize;
        for _ in 0..runs {
            let out = mh_step(&model, 0, &mut rng).unwrap();
            if out.next == 1 {
                hits += 1;
            }
            if out.accepted {
                assert_eq!(out.next, out.proposal);
            } else {
                assert_eq!(out.next, 0);
            }
        }
        let freq = hits as f64 / runs as f64;
        let expected = kernel.prob(0, 1);
        let se = (expected * (1.0 - expected) / runs as f64).sqrt();
        assert!(
            (freq - expected).abs() < 4.0 * se,
            "{freq} vs {expected} (se {se})"
        );
    }

    #[test]
    fn size_guard_trips() {
        let n = KERNEL_SIZE_LIMIT + 1;
        let row = Distribution::uniform(n).unwrap();
        let model = MhModel::new(
            StateSpace::new(n).unwrap(),
            EnergyTable::new(vec![0.0; n]).unwrap(),
            InverseTemperature::new(1.0).unwrap(),
            StochasticKernel::from_rows(vec![row; n]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            build_pm_kernel(&model),
            Err(QmhError::SizeGuard { .. })
        ));
    }
}
