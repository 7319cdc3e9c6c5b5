//! Thermalizing updates under imprecise energy measurements and
//! indirect state access.
//!
//! The computer in this setting never reads a state directly. It
//! observes through a label-returning measurement channel, steers
//! through a label-conditioned control channel, and measures energies
//! only up to Gaussian noise of scale `sigma`. An update starts from a
//! driver proposal and then walks a delayed-rejection loop: each round
//! either accepts the current branch (with a probability built from all
//! recorded observations and energies) or observes again and proposes
//! returning toward the previous label, up to a round cap `n_max`.
//!
//! The module provides the sampler itself, the observation/control
//! channel model with its required symmetry, exact branch probability
//! densities, the pairwise balance identity satisfied by the acceptance
//! rule, reference estimators, and an exact quadrature-based error
//! analysis of the stationary bias introduced by the round cap.

use crate::error::QmhError;
use crate::model::{
    retention_rate, thermal_distribution, tv_slices, Distribution, EnergyTable,
    InverseTemperature, StateSpace, StochasticKernel,
};
use crate::quad::{GaussHermite, NeumaierSum};
use crate::rng::RandomStream;
use crate::trajectory::{decision_partial_sums, decision_weight, Trajectory};
use crate::Result;

/// Normalization tolerance for channel tables.
pub const CHANNEL_TOL: f64 = 1e-12;

/// Symmetry tolerance for the composite observe-then-control channel.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Observation and control channels over a hidden state space.
///
/// `observe` rows are indexed by the hidden state `a` and give a joint
/// distribution over (label i, post-measurement state b), flattened as
/// `i * state_size + b`. `control` rows are indexed by `(o, a)` flattened
/// as `o * state_size + a` and give a distribution over the next state.
/// Simulation models additionally require the composite two-step channel
/// to be symmetric; see [`spam_symmetry_check`].
#[derive(Debug, Clone)]
pub struct ClassicalSpamModel {
    state_size: usize,
    obs_size: usize,
    observe: Vec<Distribution>,
    control: Vec<Distribution>,
}

impl ClassicalSpamModel {
    pub fn new(
        state_size: usize,
        obs_size: usize,
        observe: Vec<Distribution>,
        control: Vec<Distribution>,
    ) -> Result<Self> {
        if state_size == 0 || obs_size == 0 {
            return Err(QmhError::EmptyStateSpace);
        }
        if observe.len() != state_size {
            return Err(QmhError::DimensionMismatch {
                expected: state_size,
                got: observe.len(),
            });
        }
        if control.len() != obs_size * state_size {
            return Err(QmhError::DimensionMismatch {
                expected: obs_size * state_size,
                got: control.len(),
            });
        }
        for row in &observe {
            if row.len() != obs_size * state_size {
                return Err(QmhError::InvalidSpam(
                    "observation row has wrong arity".into(),
                ));
            }
            check_row_sum(row)?;
        }
        for row in &control {
            if row.len() != state_size {
                return Err(QmhError::InvalidSpam("control row has wrong arity".into()));
            }
            check_row_sum(row)?;
        }
        Ok(Self {
            state_size,
            obs_size,
            observe,
            control,
        })
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    pub fn obs_size(&self) -> usize {
        self.obs_size
    }

    /// P(label i, next state b | state a) for the observation channel.
    pub fn observe_prob(&self, a: usize, i: usize, b: usize) -> f64 {
        self.observe[a].prob(i * self.state_size + b)
    }

    /// P(next state b | label o, state a) for the control channel.
    pub fn control_prob(&self, o: usize, a: usize, b: usize) -> f64 {
        self.control[o * self.state_size + a].prob(b)
    }

    pub fn sample_observation(&self, a: usize, rng: &mut RandomStream) -> (usize, usize) {
        let flat = self.observe[a].sample(rng);
        (flat / self.state_size, flat % self.state_size)
    }

    pub fn sample_control(&self, o: usize, a: usize, rng: &mut RandomStream) -> usize {
        self.control[o * self.state_size + a].sample(rng)
    }

    /// Composite channel: observe from `a`, then control toward `o`:
    /// the probability of reading label `i` and landing in state `b`.
    pub fn composite(&self, o: usize, a: usize, i: usize, b: usize) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.state_size {
            acc += self.control_prob(o, c, b) * self.observe_prob(a, i, c);
        }
        acc
    }

    /// Noiseless, non-disturbing channels: labels are states.
    pub fn direct_access(size: usize) -> Result<Self> {
        let observe = (0..size)
            .map(|a| Distribution::delta(size * size, a * size + a))
            .collect::<Result<Vec<_>>>()?;
        let control = (0..size)
            .flat_map(|o| (0..size).map(move |_a| Distribution::delta(size, o)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(size, size, observe, control)
    }

    /// Channels that ignore their inputs entirely: uniform labels,
    /// uniform repreparation.
    pub fn oblivious(state_size: usize, obs_size: usize) -> Result<Self> {
        let observe =
            vec![Distribution::uniform(obs_size * state_size)?; state_size];
        let control = vec![Distribution::uniform(state_size)?; obs_size * state_size];
        Self::new(state_size, obs_size, observe, control)
    }

    /// A single uninformative label; observation leaves the state alone
    /// and control does nothing.
    pub fn idle(state_size: usize) -> Result<Self> {
        let observe = (0..state_size)
            .map(|a| Distribution::delta(state_size, a))
            .collect::<Result<Vec<_>>>()?;
        let control = (0..state_size)
            .map(|a| Distribution::delta(state_size, a))
            .collect::<Result<Vec<_>>>()?;
        Self::new(state_size, 1, observe, control)
    }

    /// Measure-and-reprepare family from a symmetric positive affinity
    /// matrix `t`. The matrix is first balanced to a symmetric doubly
    /// stochastic channel `q = D t D` (Sinkhorn iteration); observing
    /// state `a` leaves it in place and reports label `i` with
    /// probability `q[i][a]`, and control toward label `o` reprepares
    /// state `b` with probability `q[b][o]`. Symmetry of `q` makes the
    /// composite channel symmetric for any such `t`.
    pub fn measure_reprepare(t: &[Vec<f64>]) -> Result<Self> {
        let size = t.len();
        if size == 0 {
            return Err(QmhError::EmptyStateSpace);
        }
        for row in t {
            if row.len() != size {
                return Err(QmhError::InvalidSpam("affinity matrix not square".into()));
            }
            if row.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(QmhError::InvalidSpam(
                    "affinity entries must be finite and positive".into(),
                ));
            }
        }
        for i in 0..size {
            for j in 0..size {
                if (t[i][j] - t[j][i]).abs() > 1e-12 {
                    return Err(QmhError::InvalidSpam("affinity matrix not symmetric".into()));
                }
            }
        }
        let ts: Vec<Vec<f64>> = (0..size)
            .map(|i| (0..size).map(|j| (t[i][j] + t[j][i]) / 2.0).collect())
            .collect();
        let mut d = vec![1.0f64; size];
        let mut balanced = false;
        for _ in 0..100_000 {
            let reach: Vec<f64> = (0..size)
                .map(|i| (0..size).map(|j| ts[i][j] * d[j]).sum())
                .collect();
            let worst = (0..size)
                .map(|i| (d[i] * reach[i] - 1.0).abs())
                .fold(0.0f64, f64::max);
            if worst <= 1e-13 {
                balanced = true;
                break;
            }
            for i in 0..size {
                d[i] = (d[i] / reach[i]).sqrt();
            }
        }
        if !balanced {
            return Err(QmhError::InvalidSpam(
                "affinity matrix could not be balanced".into(),
            ));
        }
        let q = |i: usize, a: usize| (d[i] * d[a]) * ts[i][a];
        let observe = (0..size)
            .map(|a| {
                let mut w = vec![0.0; size * size];
                for i in 0..size {
                    w[i * size + a] = q(i, a);
                }
                Distribution::new(w)
            })
            .collect::<Result<Vec<_>>>()?;
        let control = (0..size)
            .flat_map(|o| {
                let q = &q;
                (0..size).map(move |_a| {
                    let w: Vec<f64> = (0..size).map(|b| q(b, o)).collect();
                    Distribution::new(w)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(size, size, observe, control)
    }
}

fn check_row_sum(row: &Distribution) -> Result<()> {
    let total: f64 = row.probs().iter().sum();
    if (total - 1.0).abs() > CHANNEL_TOL {
        return Err(QmhError::InvalidSpam(format!(
            "channel row sums to {total}, beyond tolerance"
        )));
    }
    Ok(())
}

/// Largest violation of the composite-channel symmetry
/// `P(i,b | o,a) = P(o,a | i,b)`.
pub fn spam_symmetry_check(spam: &ClassicalSpamModel) -> f64 {
    let mut worst: f64 = 0.0;
    for o in 0..spam.obs_size {
        for i in 0..spam.obs_size {
            for a in 0..spam.state_size {
                for b in 0..spam.state_size {
                    let fwd = spam.composite(o, a, i, b);
                    let bwd = spam.composite(i, b, o, a);
                    worst = worst.max((fwd - bwd).abs());
                }
            }
        }
    }
    worst
}

/// A hidden-state model reachable only through channels.
#[derive(Debug, Clone)]
pub struct SpamMhModel {
    pub space: StateSpace,
    pub energy: EnergyTable,
    pub spam: ClassicalSpamModel,
}

impl SpamMhModel {
    pub fn new(space: StateSpace, energy: EnergyTable, spam: ClassicalSpamModel) -> Result<Self> {
        if energy.len() != space.size() || spam.state_size() != space.size() {
            return Err(QmhError::DimensionMismatch {
                expected: space.size(),
                got: energy.len().min(spam.state_size()),
            });
        }
        let violation = spam_symmetry_check(&spam);
        if violation > SYMMETRY_TOL {
            return Err(QmhError::InvalidSpam(format!(
                "composite channel asymmetry {violation} exceeds tolerance"
            )));
        }
        Ok(Self {
            space,
            energy,
            spam,
        })
    }

    pub fn size(&self) -> usize {
        self.space.size()
    }

    pub fn thermal(&self, beta: InverseTemperature) -> Result<Distribution> {
        thermal_distribution(&self.energy, beta)
    }
}

/// Parameters of one imprecise update.
#[derive(Debug, Clone)]
pub struct ImpreciseConfig {
    pub sigma: f64,
    pub n_max: usize,
    pub driver: StochasticKernel,
    pub beta: InverseTemperature,
}

impl ImpreciseConfig {
    pub fn new(
        sigma: f64,
        n_max: usize,
        driver: StochasticKernel,
        beta: InverseTemperature,
    ) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(QmhError::InvalidParameter {
                name: "sigma",
                reason: format!("{sigma} is not a valid noise scale"),
            });
        }
        if n_max == 0 {
            return Err(QmhError::InvalidParameter {
                name: "n_max",
                reason: "round cap must be at least one".into(),
            });
        }
        Ok(Self {
            sigma,
            n_max,
            driver,
            beta,
        })
    }
}

/// Everything one update produced.
#[derive(Debug, Clone)]
pub struct UpdateRecord {
    pub trajectory: Trajectory,
    /// Hidden state after the update; simulation-visible only.
    pub final_state: usize,
    /// Rounds executed; the trajectory holds `halted_at + 1` entries.
    pub halted_at: usize,
    /// The update hit the round cap while its decision variable still
    /// called for another round.
    pub truncated: bool,
}

/// One imprecise update from hidden state `a`.
pub fn imh_step(
    model: &SpamMhModel,
    cfg: &ImpreciseConfig,
    a: usize,
    rng: &mut RandomStream,
) -> Result<UpdateRecord> {
    if a >= model.size() {
        return Err(QmhError::DimensionMismatch {
            expected: model.size(),
            got: a + 1,
        });
    }
    if cfg.driver.size() != model.spam.obs_size() {
        return Err(QmhError::DimensionMismatch {
            expected: model.spam.obs_size(),
            got: cfg.driver.size(),
        });
    }
    let mut state = a;
    let omega0 = rng.normal(model.energy.get(state), cfg.sigma);
    let (first_label, moved) = model.spam.sample_observation(state, rng);
    state = moved;
    let proposal = cfg.driver.row(first_label).sample(rng);
    state = model.spam.sample_control(proposal, state, rng);
    let omega1 = rng.normal(model.energy.get(state), cfg.sigma);
    let mut u = rng.uniform();
    let mut traj = Trajectory::new(vec![(proposal, omega0), (first_label, omega1)])?;
    let mut last_label = first_label;
    let truncated = loop {
        if !decision_continues(&traj, &cfg.driver, cfg.beta, cfg.sigma, u)? {
            break false;
        }
        if traj.rounds() >= cfg.n_max {
            break true;
        }
        let (label, after_obs) = model.spam.sample_observation(state, rng);
        state = model.spam.sample_control(last_label, after_obs, rng);
        let omega = rng.normal(model.energy.get(state), cfg.sigma);
        u = rng.uniform();
        traj = traj.appended(label, omega);
        last_label = label;
    };
    let halted_at = traj.rounds();
    Ok(UpdateRecord {
        trajectory: traj,
        final_state: state,
        halted_at,
        truncated,
    })
}

/// The loop predicate of the delayed-rejection update: given the
/// trajectory so far and the current uniform draw, decide whether the
/// newest branch is rejected and another round is requested.
pub(crate) fn decision_continues(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
    u: f64,
) -> Result<bool> {
    let sums = decision_partial_sums(traj, driver, beta, sigma)?;
    let n = traj.rounds();
    let x = sums[n];
    let x_min = sums[..n].iter().copied().fold(f64::INFINITY, f64::min);
    Ok(x > x_min * u)
}

fn gaussian_density(omega: f64, mean: f64, sigma: f64) -> f64 {
    let z = (omega - mean) / sigma;
    (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// Probability density of producing the given trajectory along the given
/// hidden-state path (conditioned on its first element), under the
/// update with round cap `cfg.n_max`. Paths longer than the cap have
/// density zero.
pub fn branch_probability(
    traj: &Trajectory,
    path: &[usize],
    model: &SpamMhModel,
    cfg: &ImpreciseConfig,
) -> Result<f64> {
    if path.len() != traj.len() {
        return Err(QmhError::DimensionMismatch {
            expected: traj.len(),
            got: path.len(),
        });
    }
    if let Some(max) = path.iter().max() {
        if *max >= model.size() {
            return Err(QmhError::DimensionMismatch {
                expected: model.size(),
                got: max + 1,
            });
        }
    }
    if cfg.sigma <= 0.0 {
        return Err(QmhError::InvalidParameter {
            name: "sigma",
            reason: "branch densities need positive noise".into(),
        });
    }
    let n = traj.rounds();
    if n > cfg.n_max {
        return Ok(0.0);
    }
    let mut sym = 1.0;
    for (m, &(_, omega)) in traj.entries().iter().enumerate() {
        sym *= gaussian_density(omega, model.energy.get(path[m]), cfg.sigma);
    }
    for m in 0..n {
        sym *= model.spam.composite(
            traj.observation(m),
            path[m],
            traj.observation(m + 1),
            path[m + 1],
        );
        if sym == 0.0 {
            return Ok(0.0);
        }
    }
    let terminal = n == cfg.n_max;
    let dec = match decision_weight(traj, &cfg.driver, cfg.beta, cfg.sigma, terminal) {
        Ok(v) => v,
        Err(QmhError::ImpossibleEvent) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    Ok(sym * dec)
}

/// Violation of the pairwise balance identity between a trajectory and
/// its time reversal: both sides combine the decision factor of the
/// bias-shifted trajectory with the raw Boltzmann weight of the oldest
/// energy. Returns `None` when either orientation queries an acceptance
/// with a vanished denominator (a zero-probability event).
pub fn branch_balance_check(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
) -> Result<Option<f64>> {
    let shift = beta.value() * sigma * sigma;
    let forward = traj.shifted_first(shift);
    let backward = traj.reversed().shifted_first(shift);
    let lhs = match decision_weight(&forward, driver, beta, sigma, false) {
        Ok(v) => v * (-beta.value() * traj.energy(0)).exp(),
        Err(QmhError::ImpossibleEvent) => return Ok(None),
        Err(e) => return Err(e),
    };
    let rhs = match decision_weight(&backward, driver, beta, sigma, false) {
        Ok(v) => v * (-beta.value() * traj.energy(traj.rounds())).exp(),
        Err(QmhError::ImpossibleEvent) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some((lhs - rhs).abs()))
}

/// Difference between the two sides of the Gaussian bias-shift identity
/// for a weight function `f`: averaging `exp(-beta E) f(omega)` over
/// noisy measurements of a level at energy `e_value` equals averaging
/// `exp(-beta omega) f(omega + beta sigma^2)`, discounted by
/// `exp(-beta^2 sigma^2 / 2)`.
pub fn gaussian_identity_check(
    e_value: f64,
    beta: InverseTemperature,
    sigma: f64,
    f: &dyn Fn(f64) -> f64,
) -> Result<f64> {
    let b = beta.value();
    if sigma == 0.0 {
        let lhs = (-b * e_value).exp() * f(e_value);
        let rhs = (-b * b * sigma * sigma / 2.0).exp() * (-b * e_value).exp() * f(e_value);
        return Ok((lhs - rhs).abs());
    }
    let lo = e_value - 12.0 * sigma - (b * sigma * sigma).abs();
    let hi = e_value + 12.0 * sigma + (b * sigma * sigma).abs();
    let mut lhs_f = |w: f64| gaussian_density(w, e_value, sigma) * (-b * e_value).exp() * f(w);
    let lhs = crate::quad::adaptive_simpson(&mut lhs_f, lo, hi, 1e-12)?;
    let shift = b * sigma * sigma;
    let mut rhs_f =
        |w: f64| gaussian_density(w, e_value, sigma) * (-b * w).exp() * f(w + shift);
    let rhs = (-b * b * sigma * sigma / 2.0).exp()
        * crate::quad::adaptive_simpson(&mut rhs_f, lo, hi, 1e-12)?;
    Ok((lhs - rhs).abs())
}

/// Sample statistics of the standard record observables: the first
/// observation label scored by `f`, and the oldest energy measurement.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorReport {
    pub mean_f: f64,
    pub var_f: f64,
    pub se_f: f64,
    pub mean_omega: f64,
    pub var_omega: f64,
    pub se_omega: f64,
    pub count: usize,
}

pub fn estimators(records: &[UpdateRecord], f: &[f64]) -> Result<EstimatorReport> {
    if records.is_empty() {
        return Err(QmhError::EmptyInput("records"));
    }
    let mut fs = Vec::with_capacity(records.len());
    let mut omegas = Vec::with_capacity(records.len());
    for r in records {
        let label = r.trajectory.observation(1);
        if label >= f.len() {
            return Err(QmhError::DimensionMismatch {
                expected: f.len(),
                got: label + 1,
            });
        }
        fs.push(f[label]);
        omegas.push(r.trajectory.energy(0));
    }
    let (mean_f, var_f) = mean_var(&fs);
    let (mean_omega, var_omega) = mean_var(&omegas);
    let n = records.len() as f64;
    Ok(EstimatorReport {
        mean_f,
        var_f,
        se_f: (var_f / n).sqrt(),
        mean_omega,
        var_omega,
        se_omega: (var_omega / n).sqrt(),
        count: records.len(),
    })
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut acc = NeumaierSum::new();
    for v in values {
        acc.add(*v);
    }
    let mean = acc.value() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq = NeumaierSum::new();
    for v in values {
        sq.add((v - mean) * (v - mean));
    }
    (mean, sq.value() / (n - 1.0))
}

/// Thermal reference for the label observable: mean of the per-state
/// expected score, and the full sampling variance including the spread
/// the observation channel adds on top of the state distribution.
pub fn thermal_observable_stats(
    model: &SpamMhModel,
    beta: InverseTemperature,
    f: &[f64],
) -> Result<(f64, f64)> {
    if f.len() != model.spam.obs_size() {
        return Err(QmhError::DimensionMismatch {
            expected: model.spam.obs_size(),
            got: f.len(),
        });
    }
    let p = model.thermal(beta)?;
    let mut mean = 0.0;
    for a in 0..model.size() {
        for i in 0..model.spam.obs_size() {
            for b in 0..model.size() {
                mean += f[i] * model.spam.observe_prob(a, i, b) * p.prob(a);
            }
        }
    }
    let mut var = 0.0;
    for a in 0..model.size() {
        for i in 0..model.spam.obs_size() {
            let mut label_mass = 0.0;
            for b in 0..model.size() {
                label_mass += model.spam.observe_prob(a, i, b);
            }
            var += (f[i] - mean) * (f[i] - mean) * label_mass * p.prob(a);
        }
    }
    Ok((mean, var))
}

/// Thermal reference for the energy observable: mean thermal energy and
/// the sampling variance of a noisy measurement of it.
pub fn thermal_energy_stats(
    model: &SpamMhModel,
    beta: InverseTemperature,
    sigma: f64,
) -> Result<(f64, f64)> {
    let p = model.thermal(beta)?;
    let mut mean = 0.0;
    for a in 0..model.size() {
        mean += model.energy.get(a) * p.prob(a);
    }
    let mut var = sigma * sigma;
    for a in 0..model.size() {
        let d = model.energy.get(a) - mean;
        var += d * d * p.prob(a);
    }
    Ok((mean, var))
}

/// Exact per-branch transition masses by tensor quadrature.
///
/// Integrates the branch density over all observation sequences, energy
/// measurements, and hidden paths with `rounds` rounds, returning
/// `mass[a0][b]`. With `terminal` the newest branch keeps all remaining
/// probability instead of multiplying its acceptance, which is how the
/// final allowed round behaves. `sigma = 0` collapses each energy axis
/// to its exact value and the result is exact rather than a quadrature
/// estimate.
pub fn branch_mass_matrix(
    model: &SpamMhModel,
    cfg: &ImpreciseConfig,
    rounds: usize,
    rule: &GaussHermite,
    terminal: bool,
) -> Result<Vec<Vec<f64>>> {
    if rounds == 0 {
        return Err(QmhError::InvalidParameter {
            name: "rounds",
            reason: "a branch has at least one round".into(),
        });
    }
    if cfg.driver.size() != model.spam.obs_size() {
        return Err(QmhError::DimensionMismatch {
            expected: model.spam.obs_size(),
            got: cfg.driver.size(),
        });
    }
    let size = model.size();
    let beta = cfg.beta.value();
    let node_tables: Vec<Vec<(f64, f64)>> = (0..size)
        .map(|state| {
            let e = model.energy.get(state);
            if cfg.sigma == 0.0 {
                vec![(e, 1.0)]
            } else {
                let scale = std::f64::consts::SQRT_2 * cfg.sigma;
                let norm = std::f64::consts::PI.sqrt();
                rule.nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(t, w)| (e + scale * t, w / norm))
                    .collect()
            }
        })
        .collect();
    let mut mass = vec![vec![0.0; size]; size];
    let mut walker = BranchWalker {
        model,
        driver: &cfg.driver,
        node_tables,
        rounds,
        terminal,
        beta,
        bias: beta * beta * cfg.sigma * cfg.sigma,
        labels: vec![0; rounds + 1],
        omegas: vec![0.0; rounds + 1],
    };
    for (a0, sink) in mass.iter_mut().enumerate() {
        walker.start(a0, sink);
    }
    Ok(mass)
}

struct BranchWalker<'a> {
    model: &'a SpamMhModel,
    driver: &'a StochasticKernel,
    node_tables: Vec<Vec<(f64, f64)>>,
    rounds: usize,
    terminal: bool,
    beta: f64,
    bias: f64,
    labels: Vec<usize>,
    omegas: Vec<f64>,
}

#[derive(Clone, Copy)]
struct WalkFrame {
    weight: f64,
    acc: NeumaierSum,
    run_min: f64,
    cascade: f64,
    state: usize,
}

impl<'a> BranchWalker<'a> {
    fn start(&mut self, a0: usize, sink: &mut [f64]) {
        for node in 0..self.node_tables[a0].len() {
            let (omega0, w0) = self.node_tables[a0][node];
            self.omegas[0] = omega0;
            for o0 in 0..self.model.spam.obs_size() {
                self.labels[0] = o0;
                let frame = WalkFrame {
                    weight: w0,
                    acc: NeumaierSum::new(),
                    run_min: f64::INFINITY,
                    cascade: 1.0,
                    state: a0,
                };
                self.descend(1, frame, sink);
            }
        }
    }

    /// Fills slot `k` (label, hidden state, energy) in all ways and
    /// recurses; the decision bookkeeping mirrors the sampler. Slot 0 is
    /// special: its label is the driver proposal, whose probability
    /// enters through the decision factor rather than a channel factor.
    fn descend(&mut self, k: usize, frame: WalkFrame, sink: &mut [f64]) {
        let obs = self.model.spam.obs_size();
        let size = self.model.size();
        let steer = self.labels[k - 1];
        for label in 0..obs {
            self.labels[k] = label;
            for state in 0..size {
                let channel = self.model.spam.composite(steer, frame.state, label, state);
                if channel == 0.0 {
                    continue;
                }
                for node in 0..self.node_tables[state].len() {
                    let (omega, w) = self.node_tables[state][node];
                    self.omegas[k] = omega;
                    let mut next = frame;
                    next.state = state;
                    next.weight *= channel * w;
                    if k == 1 {
                        let xi0 = self.driver.prob(self.labels[1], self.labels[0]);
                        if xi0 <= 0.0 {
                            continue;
                        }
                        next.acc.add(xi0);
                        next.run_min = xi0;
                    } else {
                        let w_prev = self.scaled_weight(k - 1);
                        next.acc
                            .add(w_prev * self.driver.prob(self.labels[k], self.labels[k - 1]));
                    }
                    next.acc
                        .add(-self.scaled_weight(k)
                            * self.driver.prob(self.labels[k - 1], self.labels[k]));
                    let xi = next.acc.value();
                    let den = next.run_min;
                    if den <= 0.0 {
                        continue;
                    }
                    let accept = ((den - xi).max(0.0) / den).min(1.0);
                    if k == self.rounds {
                        let first = self.driver.prob(self.labels[1], self.labels[0]);
                        let dec =
                            first * frame.cascade * if self.terminal { 1.0 } else { accept };
                        sink[state] += next.weight * dec;
                    } else {
                        next.cascade *= 1.0 - accept;
                        if next.cascade <= 0.0 {
                            continue;
                        }
                        next.run_min = den.min(xi);
                        self.descend(k + 1, next, sink);
                    }
                }
            }
        }
    }

    fn scaled_weight(&self, k: usize) -> f64 {
        (self.beta * (self.omegas[0] - self.omegas[k]) - self.bias).exp()
    }
}

/// Exact error analysis of the round-capped update on a small model.
#[derive(Debug, Clone)]
pub struct ExactErrorReport {
    /// Stationary distribution of the capped update.
    pub p_tilde: Distribution,
    /// Total variation distance between capped-stationary and thermal.
    pub tv_gap: f64,
    /// Truncation mass against the capped-stationary distribution.
    pub eps_tilde: f64,
    /// Truncation mass against the thermal distribution.
    pub eps: f64,
    /// Largest per-state truncation mass.
    pub eps_max: f64,
    /// Retention rate of the capped update kernel.
    pub omega_tilde: f64,
    /// Certified bracket for the retention rate of the uncapped update.
    pub omega_ideal: (f64, f64),
    /// eps_tilde / (1 - omega_ideal), evaluated conservatively at the
    /// lower bracket end so the comparison cannot benefit from tail
    /// uncertainty.
    pub bound_ideal: f64,
    /// eps / (1 - omega_tilde).
    pub bound_capped: f64,
    /// eps_tilde / max{0, 1 - omega_tilde - eps_max}.
    pub bound_measurable: f64,
    /// |capped-stationary mean energy - thermal mean energy|.
    pub mean_energy_gap: f64,
    /// Bound on the mean-energy gap from the measurable form.
    pub mean_energy_bound: f64,
    /// Largest row-sum defect of the assembled capped kernel before
    /// normalization; a quadrature quality indicator.
    pub completeness_defect: f64,
}

/// Builds the capped update kernel exactly (up to quadrature), solves
/// for its stationary distribution, and evaluates the whole chain of
/// stationary-bias bounds. `ideal_rounds` controls how many rounds of
/// the uncapped process are integrated to bracket its retention rate.
pub fn exact_error_analysis(
    model: &SpamMhModel,
    cfg: &ImpreciseConfig,
    rule: &GaussHermite,
    ideal_rounds: usize,
) -> Result<ExactErrorReport> {
    let size = model.size();
    if size > 4 || model.spam.obs_size() > 3 || cfg.n_max > 3 {
        return Err(QmhError::SizeGuard {
            size: size.max(model.spam.obs_size()).max(cfg.n_max),
            limit: 4,
        });
    }
    if ideal_rounds < cfg.n_max {
        return Err(QmhError::InvalidParameter {
            name: "ideal_rounds",
            reason: "bracket needs at least as many rounds as the cap".into(),
        });
    }
    let p = model.thermal(cfg.beta)?;

    // Accepted-branch masses of the uncapped process.
    let mut accepted = Vec::with_capacity(ideal_rounds);
    for n in 1..=ideal_rounds {
        accepted.push(branch_mass_matrix(model, cfg, n, rule, false)?);
    }
    let terminal = branch_mass_matrix(model, cfg, cfg.n_max, rule, true)?;

    // Capped kernel: accepted branches below the cap, terminal at it.
    let mut capped = vec![vec![0.0; size]; size];
    for n in 0..cfg.n_max - 1 {
        for a in 0..size {
            for b in 0..size {
                capped[a][b] += accepted[n][a][b];
            }
        }
    }
    for a in 0..size {
        for b in 0..size {
            capped[a][b] += terminal[a][b];
        }
    }
    let mut completeness_defect: f64 = 0.0;
    let mut capped_rows = Vec::with_capacity(size);
    for row in &capped {
        let total: f64 = row.iter().sum();
        completeness_defect = completeness_defect.max((total - 1.0).abs());
        capped_rows.push(Distribution::from_weights(row)?);
    }
    let capped_kernel = StochasticKernel::from_rows(capped_rows)?;
    let p_tilde = stationary_of(&capped_kernel)?;
    let omega_tilde = retention_rate(&capped_kernel);

    // Truncation mass per starting state: one minus all accepted mass
    // within the cap.
    let mut trunc = vec![1.0; size];
    for n in 0..cfg.n_max {
        for a in 0..size {
            let row_sum: f64 = accepted[n][a].iter().sum();
            trunc[a] -= row_sum;
        }
    }
    for t in &mut trunc {
        *t = t.max(0.0);
    }
    let eps_tilde: f64 = (0..size).map(|a| p_tilde.prob(a) * trunc[a]).sum();
    let eps: f64 = (0..size).map(|a| p.prob(a) * trunc[a]).sum();
    let eps_max = trunc.iter().copied().fold(0.0_f64, f64::max);

    // Retention bracket for the uncapped process: pairwise distances of
    // the truncated sub-stochastic rows, widened by the unassigned tail.
    let mut ideal_rows = vec![vec![0.0; size]; size];
    for n in 0..ideal_rounds {
        for a in 0..size {
            for b in 0..size {
                ideal_rows[a][b] += accepted[n][a][b];
            }
        }
    }
    let mut tails = Vec::with_capacity(size);
    for row in &ideal_rows {
        let total: f64 = row.iter().sum();
        tails.push((1.0 - total).max(0.0));
    }
    let max_tail = tails.iter().copied().fold(0.0_f64, f64::max);
    let mut omega_sub: f64 = 0.0;
    for a in 0..size {
        for b in (a + 1)..size {
            let mut acc = 0.0;
            for x in 0..size {
                acc += (ideal_rows[a][x] - ideal_rows[b][x]).abs();
            }
            omega_sub = omega_sub.max(0.5 * acc);
        }
    }
    let omega_ideal = (
        (omega_sub - max_tail).max(0.0),
        (omega_sub + max_tail).min(1.0),
    );

    let tv_gap = tv_slices(p_tilde.probs(), p.probs());
    let bound_ideal = if omega_ideal.0 < 1.0 {
        eps_tilde / (1.0 - omega_ideal.0)
    } else {
        f64::INFINITY
    };
    let bound_capped = if omega_tilde < 1.0 {
        eps / (1.0 - omega_tilde)
    } else {
        f64::INFINITY
    };
    let margin = (1.0 - omega_tilde - eps_max).max(0.0);
    let bound_measurable = if margin > 0.0 {
        eps_tilde / margin
    } else {
        f64::INFINITY
    };
    let mut mu_tilde = 0.0;
    let mut mu = 0.0;
    let mut e_max: f64 = 0.0;
    for a in 0..size {
        mu_tilde += model.energy.get(a) * p_tilde.prob(a);
        mu += model.energy.get(a) * p.prob(a);
        e_max = e_max.max(model.energy.get(a).abs());
    }
    let mean_energy_gap = (mu_tilde - mu).abs();
    let mean_energy_bound = if margin > 0.0 {
        2.0 * eps_tilde * e_max / margin
    } else {
        f64::INFINITY
    };
    Ok(ExactErrorReport {
        p_tilde,
        tv_gap,
        eps_tilde,
        eps,
        eps_max,
        omega_tilde,
        omega_ideal,
        bound_ideal,
        bound_capped,
        bound_measurable,
        mean_energy_gap,
        mean_energy_bound,
        completeness_defect,
    })
}

/// Stationary distribution of a kernel by power iteration.
pub fn stationary_of(kernel: &StochasticKernel) -> Result<Distribution> {
    let size = kernel.size();
    let mut current = vec![1.0 / size as f64; size];
    for _ in 0..200_000 {
        let mut next = vec![0.0; size];
        for a in 0..size {
            let w = current[a];
            if w == 0.0 {
                continue;
            }
            for b in 0..size {
                next[b] += w * kernel.prob(a, b);
            }
        }
        let delta: f64 = next
            .iter()
            .zip(&current)
            .map(|(x, y)| (x - y).abs())
            .sum();
        current = next;
        if delta < 1e-15 {
            break;
        }
    }
    Distribution::from_weights(&current)
}
