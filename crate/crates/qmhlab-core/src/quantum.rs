//! Exact state-vector simulation of the thermalizing update with
//! quantum observation and control channels.
//!
//! The channels are Kraus and unitary operators on a small Hilbert
//! space whose computational basis diagonalizes the Hamiltonian. Energy
//! is read through an idealized filtered phase estimation: outcome
//! `omega` applies a diagonal Gaussian amplitude profile centered on
//! each eigenvalue and is distributed as the eigenvalue plus N(0,
//! sigma^2) noise. An update interleaves these measurements with the
//! same delayed-rejection decision loop as the classical imprecise
//! sampler; the decision code is shared item for item.
//!
//! Each recorded trajectory corresponds to one explicit Kraus operator
//! of the update POVM: a product of energy-filter diagonals and
//! steered-collapse factors times the square root of the trajectory's
//! decision probability. The pairwise balance identity satisfied by
//! these operators is checked entrywise in [`quantum_balance_check`];
//! it holds exactly when the observe/control pair satisfies the
//! operator symmetry enforced by [`QuantumSpamModel::new`].

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::QmhError;
use crate::imprecise::{decision_continues, ImpreciseConfig, UpdateRecord};
use crate::model::{thermal_distribution, Distribution, EnergyTable, InverseTemperature, StochasticKernel};
use crate::rng::RandomStream;
use crate::trajectory::{decision_weight, Trajectory};
use crate::Result;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// State vectors must be normalized to within this tolerance.
pub const STATE_NORM_TOL: f64 = 1e-12;

/// Hermiticity and unit-trace tolerance for density matrices.
pub const DENSITY_TOL: f64 = 1e-12;

/// Density-matrix eigenvalues may undershoot zero by this much.
pub const PSD_TOL: f64 = 1e-10;

/// Tolerance for channel completeness, unitarity, and the
/// observe/control operator symmetry.
pub const SPAM_TOL: f64 = 1e-10;

/// Dense-simulation dimension cap.
pub const DIMENSION_LIMIT: usize = 64;

const RENORM_GUARD: f64 = 1e-14;

fn guard_dimension(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(QmhError::EmptyStateSpace);
    }
    if dim > DIMENSION_LIMIT {
        return Err(QmhError::SizeGuard {
            size: dim,
            limit: DIMENSION_LIMIT,
        });
    }
    Ok(())
}

fn real(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn max_entry_gap(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

fn max_dev_from_identity(m: &CMatrix) -> f64 {
    let d = m.nrows();
    let mut worst: f64 = 0.0;
    for r in 0..d {
        for c in 0..d {
            let target = if r == c { real(1.0) } else { real(0.0) };
            worst = worst.max((m[(r, c)] - target).norm());
        }
    }
    worst
}

/// Pure state in the energy eigenbasis.
#[derive(Debug, Clone)]
pub struct QuantumState {
    amplitudes: CVector,
}

impl QuantumState {
    pub fn new(amplitudes: CVector) -> Result<Self> {
        guard_dimension(amplitudes.len())?;
        let norm = amplitudes.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > STATE_NORM_TOL {
            return Err(QmhError::UnnormalizedState(amplitudes.len(), norm));
        }
        Ok(Self { amplitudes })
    }

    /// Rescales a nonzero vector onto the unit sphere.
    pub fn from_unnormalized(vector: CVector) -> Result<Self> {
        guard_dimension(vector.len())?;
        let norm = vector.norm();
        if !norm.is_finite() || norm <= RENORM_GUARD {
            return Err(QmhError::UnnormalizedState(vector.len(), norm));
        }
        Ok(Self {
            amplitudes: vector.map(|z| z / norm),
        })
    }

    pub fn basis_state(dim: usize, a: usize) -> Result<Self> {
        guard_dimension(dim)?;
        if a >= dim {
            return Err(QmhError::DimensionMismatch {
                expected: dim,
                got: a + 1,
            });
        }
        let mut amplitudes = CVector::zeros(dim);
        amplitudes[a] = real(1.0);
        Ok(Self { amplitudes })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn population(&self, a: usize) -> f64 {
        self.amplitudes[a].norm_sqr()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|z| z.norm_sqr()).collect()
    }

    /// Index of the largest basis population.
    pub fn dominant_component(&self) -> usize {
        let mut best = 0;
        let mut best_p = -1.0;
        for (i, z) in self.amplitudes.iter().enumerate() {
            let p = z.norm_sqr();
            if p > best_p {
                best_p = p;
                best = i;
            }
        }
        best
    }

    /// Rank-one projector onto this state.
    pub fn projector(&self) -> CMatrix {
        &self.amplitudes * self.amplitudes.adjoint()
    }
}

/// Mixed state: Hermitian, positive semidefinite, unit trace.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    entries: CMatrix,
}

impl DensityMatrix {
    pub fn new(entries: CMatrix) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(QmhError::DimensionMismatch {
                expected: entries.nrows(),
                got: entries.ncols(),
            });
        }
        guard_dimension(entries.nrows())?;
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(QmhError::InvalidParameter {
                name: "density",
                reason: "non-finite entries".into(),
            });
        }
        let hermitian_gap = max_entry_gap(&entries, &entries.adjoint());
        if hermitian_gap > DENSITY_TOL {
            return Err(QmhError::InvalidParameter {
                name: "density",
                reason: format!("hermiticity violated by {hermitian_gap:.3e}"),
            });
        }
        let trace = entries.trace();
        if (trace.re - 1.0).abs() > DENSITY_TOL || trace.im.abs() > DENSITY_TOL {
            return Err(QmhError::InvalidParameter {
                name: "density",
                reason: format!("trace {trace} is not one"),
            });
        }
        let min_eig = entries
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_TOL {
            return Err(QmhError::InvalidParameter {
                name: "density",
                reason: format!("negative eigenvalue {min_eig:.3e}"),
            });
        }
        Ok(Self { entries })
    }

    pub fn from_state(state: &QuantumState) -> Self {
        Self {
            entries: state.projector(),
        }
    }

    /// Thermal mixture of energy eigenstates.
    pub fn thermal(energy: &EnergyTable, beta: InverseTemperature) -> Result<Self> {
        let p = thermal_distribution(energy, beta)?;
        let dim = energy.len();
        guard_dimension(dim)?;
        let entries = CMatrix::from_fn(dim, dim, |r, c| {
            if r == c {
                real(p.prob(r))
            } else {
                real(0.0)
            }
        });
        Ok(Self { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.entries[(i, i)].re).collect()
    }

    /// Real part of `tr(op rho)`.
    pub fn expectation(&self, op: &CMatrix) -> Result<f64> {
        if op.nrows() != self.dim() || op.ncols() != self.dim() {
            return Err(QmhError::DimensionMismatch {
                expected: self.dim(),
                got: op.nrows().max(op.ncols()),
            });
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for r in 0..self.dim() {
            for c in 0..self.dim() {
                acc += op[(r, c)] * self.entries[(c, r)];
            }
        }
        Ok(acc.re)
    }
}

/// Observation Kraus operators and label-conditioned control unitaries.
///
/// Construction enforces the three operator conditions the update
/// relies on: the observation operators form a complete measurement,
/// every control operator is unitary, and steering by `o` after
/// collapsing toward `i` equals the adjoint of steering by `i` after
/// collapsing toward `o`.
#[derive(Debug, Clone)]
pub struct QuantumSpamModel {
    k_o: Vec<CMatrix>,
    u_c: Vec<CMatrix>,
}

impl QuantumSpamModel {
    pub fn new(k_o: Vec<CMatrix>, u_c: Vec<CMatrix>) -> Result<Self> {
        if k_o.is_empty() || k_o.len() != u_c.len() {
            return Err(QmhError::InvalidSpam(format!(
                "need matching operator counts, got {} observations and {} controls",
                k_o.len(),
                u_c.len()
            )));
        }
        let dim = k_o[0].nrows();
        guard_dimension(dim)?;
        for m in k_o.iter().chain(u_c.iter()) {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(QmhError::InvalidSpam("operator dimensions differ".into()));
            }
            if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(QmhError::InvalidSpam("non-finite operator entries".into()));
            }
        }
        let mut completeness = CMatrix::zeros(dim, dim);
        for k in &k_o {
            completeness += k.adjoint() * k;
        }
        let gap = max_dev_from_identity(&completeness);
        if gap > SPAM_TOL {
            return Err(QmhError::InvalidSpam(format!(
                "observation operators incomplete by {gap:.3e}"
            )));
        }
        for (o, u) in u_c.iter().enumerate() {
            let gap = max_dev_from_identity(&(u.adjoint() * u));
            if gap > SPAM_TOL {
                return Err(QmhError::InvalidSpam(format!(
                    "control {o} non-unitary by {gap:.3e}"
                )));
            }
        }
        for (o, u) in u_c.iter().enumerate() {
            for (i, k) in k_o.iter().enumerate() {
                let lhs = u * k;
                let rhs = (u_c[i].clone() * &k_o[o]).adjoint();
                let gap = max_entry_gap(&lhs, &rhs);
                if gap > SPAM_TOL {
                    return Err(QmhError::InvalidSpam(format!(
                        "observe/control symmetry violated by {gap:.3e} at ({o}, {i})"
                    )));
                }
            }
        }
        Ok(Self { k_o, u_c })
    }

    /// Single uninformative outcome; observation and control do nothing.
    pub fn idle(dim: usize) -> Result<Self> {
        let eye = CMatrix::identity(dim, dim);
        Self::new(vec![eye.clone()], vec![eye])
    }

    pub fn dim(&self) -> usize {
        self.k_o[0].nrows()
    }

    pub fn obs_size(&self) -> usize {
        self.k_o.len()
    }

    pub fn k_o(&self, i: usize) -> &CMatrix {
        &self.k_o[i]
    }

    pub fn u_c(&self, o: usize) -> &CMatrix {
        &self.u_c[o]
    }

    /// Outcome probabilities of the observation measurement on `psi`.
    pub fn outcome_probabilities(&self, psi: &QuantumState) -> Result<Vec<f64>> {
        if psi.dim() != self.dim() {
            return Err(QmhError::DimensionMismatch {
                expected: self.dim(),
                got: psi.dim(),
            });
        }
        Ok(self
            .k_o
            .iter()
            .map(|k| (k * psi.amplitudes()).norm_squared())
            .collect())
    }

    /// Effective observable `sum_i f(i) K_O(i)^dag K_O(i)` whose thermal
    /// expectation is estimated by the first observed label of an
    /// update started from a thermal sample.
    pub fn observable_operator(&self, f: &[f64]) -> Result<CMatrix> {
        if f.len() != self.obs_size() {
            return Err(QmhError::DimensionMismatch {
                expected: self.obs_size(),
                got: f.len(),
            });
        }
        let dim = self.dim();
        let mut op = CMatrix::zeros(dim, dim);
        for (i, k) in self.k_o.iter().enumerate() {
            op += (k.adjoint() * k).map(|z| z * f[i]);
        }
        Ok(op)
    }
}

/// Hamiltonian diagonal in the simulation basis, together with the
/// spread of the filtered energy measurement.
#[derive(Debug, Clone)]
pub struct DiagonalHamiltonian {
    energy: EnergyTable,
    sigma: f64,
}

impl DiagonalHamiltonian {
    pub fn new(energy: EnergyTable, sigma: f64) -> Result<Self> {
        guard_dimension(energy.len())?;
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(QmhError::InvalidParameter {
                name: "sigma",
                reason: format!("{sigma} is not a valid spread"),
            });
        }
        Ok(Self { energy, sigma })
    }

    pub fn dim(&self) -> usize {
        self.energy.len()
    }

    pub fn energy(&self) -> &EnergyTable {
        &self.energy
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Filter amplitude of eigenstate `a` at measured energy `omega`:
    /// a fourth-root-normalized Gaussian whose square is the N(E(a),
    /// sigma^2) density. Requires positive spread.
    pub fn amplitude(&self, omega: f64, a: usize) -> f64 {
        let var = self.sigma * self.sigma;
        let gap = omega - self.energy.get(a);
        (-gap * gap / (4.0 * var)).exp()
            / (2.0 * std::f64::consts::PI * var).powf(0.25)
    }

    /// Diagonal filter operator at measured energy `omega`.
    pub fn filter(&self, omega: f64) -> CMatrix {
        let dim = self.dim();
        CMatrix::from_fn(dim, dim, |r, c| {
            if r == c {
                real(self.amplitude(omega, r))
            } else {
                real(0.0)
            }
        })
    }

    /// The Hamiltonian as a diagonal matrix.
    pub fn operator(&self) -> CMatrix {
        let dim = self.dim();
        CMatrix::from_fn(dim, dim, |r, c| {
            if r == c {
                real(self.energy.get(r))
            } else {
                real(0.0)
            }
        })
    }

    pub fn thermal(&self, beta: InverseTemperature) -> Result<DensityMatrix> {
        DensityMatrix::thermal(&self.energy, beta)
    }
}

/// Filtered energy measurement: samples an eigenvalue index by
/// population, draws `omega` from N(E(a), sigma^2), and applies the
/// diagonal filter at `omega`. The outcome law is the exact population
/// mixture of eigenvalue-centered normals.
pub fn qpe_measure(
    psi: &QuantumState,
    ham: &DiagonalHamiltonian,
    rng: &mut RandomStream,
) -> Result<(f64, QuantumState)> {
    if psi.dim() != ham.dim() {
        return Err(QmhError::DimensionMismatch {
            expected: ham.dim(),
            got: psi.dim(),
        });
    }
    if ham.sigma() <= 0.0 {
        return Err(QmhError::InvalidParameter {
            name: "sigma",
            reason: "zero spread degenerates to the noiseless classical limit".into(),
        });
    }
    let pick = Distribution::from_weights(&psi.populations())?.sample(rng);
    let omega = rng.normal(ham.energy().get(pick), ham.sigma());
    let filtered = CVector::from_fn(psi.dim(), |a, _| {
        psi.amplitudes()[a] * ham.amplitude(omega, a)
    });
    Ok((omega, QuantumState::from_unnormalized(filtered)?))
}

/// Observation measurement: outcome `i` has probability
/// `|K_O(i) psi|^2` and collapses the state through `K_O(i)`.
pub fn povm_measure(
    psi: &QuantumState,
    spam: &QuantumSpamModel,
    rng: &mut RandomStream,
) -> Result<(usize, QuantumState)> {
    let probs = spam.outcome_probabilities(psi)?;
    let outcome = Distribution::from_weights(&probs)?.sample(rng);
    let collapsed = spam.k_o(outcome) * psi.amplitudes();
    Ok((outcome, QuantumState::from_unnormalized(collapsed)?))
}

/// Observe/control pair built from an orthonormal basis split into
/// per-label blocks. With block vectors `kappa_n(o)` (column `o*m + n`
/// of `basis` for `m = dim / obs_size`), the observation operators
/// transfer each label block onto the block of the fixed
/// post-measurement label `j`, and each control unitary swaps its
/// label's block with block `j`. The pair satisfies every
/// [`QuantumSpamModel`] invariant by construction.
pub fn typical_spam_builder(
    basis: &CMatrix,
    j: usize,
    obs_size: usize,
) -> Result<QuantumSpamModel> {
    let dim = basis.nrows();
    if basis.ncols() != dim {
        return Err(QmhError::DimensionMismatch {
            expected: dim,
            got: basis.ncols(),
        });
    }
    guard_dimension(dim)?;
    if obs_size == 0 || dim % obs_size != 0 {
        return Err(QmhError::InvalidParameter {
            name: "obs_size",
            reason: format!("{obs_size} does not divide dimension {dim}"),
        });
    }
    if j >= obs_size {
        return Err(QmhError::InvalidParameter {
            name: "j",
            reason: format!("post-measurement label {j} out of range {obs_size}"),
        });
    }
    let gap = max_dev_from_identity(&(basis.adjoint() * basis));
    if gap > SPAM_TOL {
        return Err(QmhError::InvalidSpam(format!(
            "basis non-unitary by {gap:.3e}"
        )));
    }
    let block = dim / obs_size;
    let kappa = |o: usize, n: usize| basis.column(o * block + n).into_owned();
    let mut k_o = Vec::with_capacity(obs_size);
    for i in 0..obs_size {
        let mut k = CMatrix::zeros(dim, dim);
        for n in 0..block {
            k += kappa(j, n) * kappa(i, n).adjoint();
        }
        k_o.push(k);
    }
    let mut u_c = Vec::with_capacity(obs_size);
    for o in 0..obs_size {
        let mut u = CMatrix::identity(dim, dim);
        for n in 0..block {
            let swap_in = kappa(o, n);
            let home = kappa(j, n);
            u += &swap_in * home.adjoint() + &home * swap_in.adjoint()
                - &swap_in * swap_in.adjoint()
                - &home * home.adjoint();
        }
        u_c.push(u);
    }
    QuantumSpamModel::new(k_o, u_c)
}

fn unitary_apply(u: &CMatrix, psi: &QuantumState) -> Result<QuantumState> {
    QuantumState::from_unnormalized(u * psi.amplitudes())
}

/// One quantum update. The measurement schedule is: filtered energy,
/// observation, classical driver proposal, control toward the
/// proposal, filtered energy, then the shared delayed-rejection loop
/// alternating observation, control toward the previous label, and
/// energy. Decisions are taken by [`decision_continues`], the same
/// predicate the classical sampler runs.
///
/// `final_state` in the returned record is the index of the largest
/// output population, recorded for simulation-side diagnostics.
pub fn qmh_step(
    psi: &QuantumState,
    ham: &DiagonalHamiltonian,
    spam: &QuantumSpamModel,
    cfg: &ImpreciseConfig,
    rng: &mut RandomStream,
) -> Result<(UpdateRecord, QuantumState)> {
    if ham.dim() != spam.dim() || psi.dim() != spam.dim() {
        return Err(QmhError::DimensionMismatch {
            expected: spam.dim(),
            got: ham.dim().min(psi.dim()),
        });
    }
    if cfg.driver.size() != spam.obs_size() {
        return Err(QmhError::DimensionMismatch {
            expected: spam.obs_size(),
            got: cfg.driver.size(),
        });
    }
    if cfg.sigma != ham.sigma() {
        return Err(QmhError::InvalidParameter {
            name: "sigma",
            reason: format!(
                "decision spread {} differs from measurement spread {}",
                cfg.sigma,
                ham.sigma()
            ),
        });
    }
    let (omega0, state) = qpe_measure(psi, ham, rng)?;
    let (first_label, state) = povm_measure(&state, spam, rng)?;
    let proposal = cfg.driver.row(first_label).sample(rng);
    let state = unitary_apply(spam.u_c(proposal), &state)?;
    let (omega1, mut state) = qpe_measure(&state, ham, rng)?;
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
        let (label, observed) = povm_measure(&state, spam, rng)?;
        let steered = unitary_apply(spam.u_c(last_label), &observed)?;
        let (omega, next) = qpe_measure(&steered, ham, rng)?;
        state = next;
        u = rng.uniform();
        traj = traj.appended(label, omega);
        last_label = label;
    };
    let halted_at = traj.rounds();
    let record = UpdateRecord {
        trajectory: traj,
        final_state: state.dominant_component(),
        halted_at,
        truncated,
    };
    Ok((record, state))
}

/// Explicit Kraus operator of one recorded trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryKraus {
    pub trajectory: Trajectory,
    pub matrix: CMatrix,
    /// The trajectory has zero decision probability; `matrix` is zero.
    pub vanished: bool,
}

/// Operator product of the symmetric factors along a trajectory: the
/// slot-0 energy filter, then per move the collapse toward the next
/// observation, the steer by the previous label, and the next energy
/// filter.
fn kappa_matrix(
    traj: &Trajectory,
    ham: &DiagonalHamiltonian,
    spam: &QuantumSpamModel,
) -> Result<CMatrix> {
    if ham.dim() != spam.dim() {
        return Err(QmhError::DimensionMismatch {
            expected: spam.dim(),
            got: ham.dim(),
        });
    }
    if ham.sigma() <= 0.0 {
        return Err(QmhError::InvalidParameter {
            name: "sigma",
            reason: "energy filters need positive spread".into(),
        });
    }
    if traj.entries().iter().any(|&(o, _)| o >= spam.obs_size()) {
        return Err(QmhError::DimensionMismatch {
            expected: spam.obs_size(),
            got: traj.entries().iter().map(|e| e.0).max().unwrap() + 1,
        });
    }
    let mut acc = ham.filter(traj.energy(0));
    for m in 0..traj.rounds() {
        acc = spam.k_o(traj.observation(m + 1)) * acc;
        acc = spam.u_c(traj.observation(m)) * acc;
        acc = ham.filter(traj.energy(m + 1)) * acc;
    }
    Ok(acc)
}

/// Builds the Kraus operator of a trajectory: the symmetric operator
/// product scaled by the square root of the trajectory's decision
/// weight. `terminal` marks an update cut off at its round cap, whose
/// final branch keeps all remaining probability.
pub fn trajectory_kraus(
    traj: &Trajectory,
    ham: &DiagonalHamiltonian,
    spam: &QuantumSpamModel,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    terminal: bool,
) -> Result<TrajectoryKraus> {
    let kappa = kappa_matrix(traj, ham, spam)?;
    let dec = match decision_weight(traj, driver, beta, ham.sigma(), terminal) {
        Ok(v) => v,
        Err(QmhError::ImpossibleEvent) => 0.0,
        Err(e) => return Err(e),
    };
    if dec <= 0.0 {
        let dim = spam.dim();
        return Ok(TrajectoryKraus {
            trajectory: traj.clone(),
            matrix: CMatrix::zeros(dim, dim),
            vanished: true,
        });
    }
    let matrix = kappa.map(|z| z * dec.sqrt());
    if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(QmhError::InvalidParameter {
            name: "trajectory",
            reason: "Kraus entries overflowed".into(),
        });
    }
    Ok(TrajectoryKraus {
        trajectory: traj.clone(),
        matrix,
        vanished: false,
    })
}

/// Entrywise violation of the pairwise balance identity between a
/// trajectory and its time reversal. Each side is the symmetric
/// operator product of the raw trajectory, scaled by the square root
/// of the decision weight of the bias-shifted trajectory and by the
/// half Boltzmann weight of the raw oldest energy; the reversed side
/// enters through its adjoint. Returns `None` when either orientation
/// queries an acceptance with a vanished denominator.
pub fn quantum_balance_check(
    traj: &Trajectory,
    ham: &DiagonalHamiltonian,
    spam: &QuantumSpamModel,
    driver: &StochasticKernel,
    beta: InverseTemperature,
) -> Result<Option<f64>> {
    let sigma = ham.sigma();
    let shift = beta.value() * sigma * sigma;
    let reversed = traj.reversed();
    let forward_dec = match decision_weight(
        &traj.shifted_first(shift),
        driver,
        beta,
        sigma,
        false,
    ) {
        Ok(v) => v,
        Err(QmhError::ImpossibleEvent) => return Ok(None),
        Err(e) => return Err(e),
    };
    let backward_dec = match decision_weight(
        &reversed.shifted_first(shift),
        driver,
        beta,
        sigma,
        false,
    ) {
        Ok(v) => v,
        Err(QmhError::ImpossibleEvent) => return Ok(None),
        Err(e) => return Err(e),
    };
    let b = beta.value();
    let lhs_scale = forward_dec.sqrt() * (-0.5 * b * traj.energy(0)).exp();
    let rhs_scale = backward_dec.sqrt() * (-0.5 * b * traj.energy(traj.rounds())).exp();
    let lhs = kappa_matrix(traj, ham, spam)?.map(|z| z * lhs_scale);
    let rhs = kappa_matrix(&reversed, ham, spam)?
        .map(|z| z * rhs_scale)
        .adjoint();
    Ok(Some(max_entry_gap(&lhs, &rhs)))
}

/// Monte Carlo estimate of one application of the update channel.
#[derive(Debug, Clone)]
pub struct ChannelEstimate {
    pub mean: DensityMatrix,
    /// Entrywise standard errors (combined real and imaginary spread).
    pub entry_se: DMatrix<f64>,
    /// Fraction of shots that hit the round cap mid-decision.
    pub truncation_rate: f64,
    pub shots: u64,
}

/// Applies the update channel to `rho_in` by Monte Carlo: eigendecompose
/// the input, sample a pure component per shot, run one update, and
/// average the output projectors.
pub fn channel_apply_mc(
    rho_in: &DensityMatrix,
    ham: &DiagonalHamiltonian,
    spam: &QuantumSpamModel,
    cfg: &ImpreciseConfig,
    shots: u64,
    rng: &mut RandomStream,
) -> Result<ChannelEstimate> {
    if shots == 0 {
        return Err(QmhError::InvalidParameter {
            name: "shots",
            reason: "need at least one shot".into(),
        });
    }
    if rho_in.dim() != spam.dim() {
        return Err(QmhError::DimensionMismatch {
            expected: spam.dim(),
            got: rho_in.dim(),
        });
    }
    let dim = rho_in.dim();
    let eigen = rho_in.entries().clone().symmetric_eigen();
    let weights: Vec<f64> = eigen.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let sampler = Distribution::from_weights(&weights)?;
    let mut sum = CMatrix::zeros(dim, dim);
    let mut sum_sq_re = DMatrix::<f64>::zeros(dim, dim);
    let mut sum_sq_im = DMatrix::<f64>::zeros(dim, dim);
    let mut truncations = 0u64;
    for _ in 0..shots {
        let component = sampler.sample(rng);
        let psi = QuantumState::from_unnormalized(eigen.eigenvectors.column(component).into_owned())?;
        let (record, out) = qmh_step(&psi, ham, spam, cfg, rng)?;
        if record.truncated {
            truncations += 1;
        }
        let projector = out.projector();
        for r in 0..dim {
            for c in 0..dim {
                let z = projector[(r, c)];
                sum_sq_re[(r, c)] += z.re * z.re;
                sum_sq_im[(r, c)] += z.im * z.im;
            }
        }
        sum += projector;
    }
    let n = shots as f64;
    let mean_entries = sum.map(|z| z / n);
    let entry_se = DMatrix::from_fn(dim, dim, |r, c| {
        if shots < 2 {
            return 0.0;
        }
        let m = mean_entries[(r, c)];
        let var_re = (sum_sq_re[(r, c)] - n * m.re * m.re).max(0.0) / (n - 1.0);
        let var_im = (sum_sq_im[(r, c)] - n * m.im * m.im).max(0.0) / (n - 1.0);
        ((var_re + var_im) / n).sqrt()
    });
    Ok(ChannelEstimate {
        mean: DensityMatrix::new(mean_entries)?,
        entry_se,
        truncation_rate: truncations as f64 / n,
        shots,
    })
}

/// Trace distance `(1/2) ||r1 - r2||_1` via singular values.
pub fn trace_distance(r1: &DensityMatrix, r2: &DensityMatrix) -> Result<f64> {
    if r1.dim() != r2.dim() {
        return Err(QmhError::DimensionMismatch {
            expected: r1.dim(),
            got: r2.dim(),
        });
    }
    let diff = r1.entries() - r2.entries();
    Ok(0.5 * diff.singular_values().iter().sum::<f64>())
}

fn trace_norm(m: &CMatrix) -> f64 {
    m.singular_values().iter().sum()
}

/// Correlation decay between a chain and its remembered starting
/// eigenstate.
#[derive(Debug, Clone)]
pub struct PairMixingReport {
    /// Trace distance between the start-labeled pair state and the
    /// product of thermal states, per step count starting at zero.
    pub distances: Vec<f64>,
    /// Closed-form step-zero distance, one minus the thermal collision
    /// probability.
    pub initial_exact: f64,
    pub shots: u64,
}

/// Evolves each basis start `|a><a|` for `steps` updates (Monte Carlo,
/// `shots` chains per start) and reports the trace distance between
/// the pair state weighted by the thermal law and the uncorrelated
/// product, for each step count.
pub fn pair_mixing_check(
    ham: &DiagonalHamiltonian,
    spam: &QuantumSpamModel,
    cfg: &ImpreciseConfig,
    steps: usize,
    shots: u64,
    rng: &mut RandomStream,
) -> Result<PairMixingReport> {
    if shots == 0 {
        return Err(QmhError::InvalidParameter {
            name: "shots",
            reason: "need at least one shot".into(),
        });
    }
    let dim = ham.dim();
    let p = thermal_distribution(ham.energy(), cfg.beta)?;
    let rho = ham.thermal(cfg.beta)?;
    let mut sums = vec![vec![CMatrix::zeros(dim, dim); steps]; dim];
    for (a, per_start) in sums.iter_mut().enumerate() {
        for _ in 0..shots {
            let mut psi = QuantumState::basis_state(dim, a)?;
            for step_sum in per_start.iter_mut() {
                let (_, next) = qmh_step(&psi, ham, spam, cfg, rng)?;
                psi = next;
                *step_sum += psi.projector();
            }
        }
    }
    let mut distances = Vec::with_capacity(steps + 1);
    let initial_exact = 1.0 - p.collision();
    distances.push(initial_exact);
    for step in 0..steps {
        let mut acc = 0.0;
        for (a, per_start) in sums.iter().enumerate() {
            let mix = DensityMatrix::new(per_start[step].map(|z| z / shots as f64))?;
            acc += p.prob(a) * trace_distance(&mix, &rho)?;
        }
        distances.push(acc);
    }
    Ok(PairMixingReport {
        distances,
        initial_exact,
        shots,
    })
}

/// Heuristic one-step contraction estimate of the update channel on
/// traceless differences: a short power iteration where each channel
/// application is itself a Monte Carlo estimate. The result is a
/// statistical estimate with sampling bias, not a certified rate.
pub fn retention_estimate_mc(
    ham: &DiagonalHamiltonian,
    spam: &QuantumSpamModel,
    cfg: &ImpreciseConfig,
    iterations: usize,
    shots: u64,
    rng: &mut RandomStream,
) -> Result<f64> {
    if iterations == 0 {
        return Err(QmhError::InvalidParameter {
            name: "iterations",
            reason: "need at least one power iteration".into(),
        });
    }
    let dim = ham.dim();
    let rho = ham.thermal(cfg.beta)?;
    let mut x = QuantumState::basis_state(dim, 0)?.projector() - rho.entries();
    let mut ratio = 0.0;
    for _ in 0..iterations {
        let input_norm = trace_norm(&x);
        if input_norm <= 1e-12 {
            return Ok(0.0);
        }
        let eigen = x.clone().symmetric_eigen();
        let mut positive = CMatrix::zeros(dim, dim);
        let mut negative = CMatrix::zeros(dim, dim);
        let mut pos_trace = 0.0;
        let mut neg_trace = 0.0;
        for (k, &lambda) in eigen.eigenvalues.iter().enumerate() {
            let vec = eigen.eigenvectors.column(k).into_owned();
            let proj = &vec * vec.adjoint();
            if lambda >= 0.0 {
                positive += proj.map(|z| z * lambda);
                pos_trace += lambda;
            } else {
                negative += proj.map(|z| z * -lambda);
                neg_trace += -lambda;
            }
        }
        let mut output = CMatrix::zeros(dim, dim);
        if pos_trace > 1e-12 {
            let part = DensityMatrix::new(positive.map(|z| z / pos_trace))?;
            let pushed = channel_apply_mc(&part, ham, spam, cfg, shots, rng)?;
            output += pushed.mean.entries().map(|z| z * pos_trace);
        }
        if neg_trace > 1e-12 {
            let part = DensityMatrix::new(negative.map(|z| z / neg_trace))?;
            let pushed = channel_apply_mc(&part, ham, spam, cfg, shots, rng)?;
            output -= pushed.mean.entries().map(|z| z * neg_trace);
        }
        let trace = output.trace();
        let correction = trace / dim as f64;
        for r in 0..dim {
            output[(r, r)] -= correction;
        }
        ratio = trace_norm(&output) / input_norm;
        x = output;
    }
    Ok(ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halting::{halting_table, HaltingParams};
    use crate::imprecise::{imh_step, ClassicalSpamModel, SpamMhModel};
    use crate::model::{tv_distance, StateSpace};
    use crate::trajectory::decision_partial_sums;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    fn random_complex_matrix(dim: usize, rng: &mut RandomStream) -> CMatrix {
        CMatrix::from_fn(dim, dim, |_, _| {
            Complex64::new(rng.normal(0.0, 1.0), rng.normal(0.0, 1.0))
        })
    }

    fn random_unitary(dim: usize, rng: &mut RandomStream) -> CMatrix {
        random_complex_matrix(dim, rng).qr().q()
    }

    fn random_state(dim: usize, rng: &mut RandomStream) -> QuantumState {
        let v = CVector::from_fn(dim, |_, _| {
            Complex64::new(rng.normal(0.0, 1.0), rng.normal(0.0, 1.0))
        });
        QuantumState::from_unnormalized(v).unwrap()
    }

    fn random_driver(size: usize, rng: &mut RandomStream) -> StochasticKernel {
        let rows = (0..size)
            .map(|_| {
                let w: Vec<f64> = (0..size).map(|_| 0.05 + rng.uniform()).collect();
                Distribution::from_weights(&w).unwrap()
            })
            .collect();
        StochasticKernel::from_rows(rows).unwrap()
    }

    fn beta(value: f64) -> InverseTemperature {
        InverseTemperature::new(value).unwrap()
    }

    #[test]
    fn state_and_density_invariants_are_enforced() {
        let bad = CVector::from_vec(vec![real(1.0), real(1.0)]);
        assert!(matches!(
            QuantumState::new(bad),
            Err(QmhError::UnnormalizedState(2, _))
        ));
        let psi = QuantumState::basis_state(3, 1).unwrap();
        assert_abs_diff_eq!(psi.population(1), 1.0);
        assert_eq!(psi.dominant_component(), 1);

        let energy = EnergyTable::new(vec![0.0, 0.5, 1.25]).unwrap();
        let rho = DensityMatrix::thermal(&energy, beta(1.0)).unwrap();
        assert_abs_diff_eq!(rho.diagonal().iter().sum::<f64>(), 1.0, epsilon = 1e-14);

        let mut skewed = rho.entries().clone();
        skewed[(0, 1)] = real(0.2);
        assert!(DensityMatrix::new(skewed).is_err());
        let mut heavy = rho.entries().clone();
        heavy[(0, 0)] += real(0.1);
        assert!(DensityMatrix::new(heavy).is_err());
    }

    #[test]
    fn typical_builder_satisfies_operator_conditions() {
        let mut rng = RandomStream::derive(61, 0, "quantum-spam");
        let eye = CMatrix::identity(4, 4);
        let spam = typical_spam_builder(&eye, 1, 4).unwrap();
        for i in 0..4 {
            let expected = CMatrix::from_fn(4, 4, |r, c| {
                if r == 1 && c == i {
                    real(1.0)
                } else {
                    real(0.0)
                }
            });
            assert!(max_entry_gap(spam.k_o(i), &expected) < 1e-12);
        }

        for &(dim, obs) in &[(4usize, 2usize), (6, 3), (6, 2)] {
            let basis = random_unitary(dim, &mut rng);
            let spam = typical_spam_builder(&basis, obs - 1, obs).unwrap();
            let mut worst: f64 = 0.0;
            for o in 0..obs {
                for i in 0..obs {
                    let lhs = spam.u_c(o) * spam.k_o(i);
                    let rhs = (spam.u_c(i) * spam.k_o(o)).adjoint();
                    worst = worst.max(max_entry_gap(&lhs, &rhs));
                }
            }
            assert!(worst < 1e-12, "symmetry violation {worst}");
        }

        let basis = random_unitary(4, &mut rng);
        assert!(typical_spam_builder(&basis, 0, 3).is_err());
        assert!(typical_spam_builder(&basis, 1, 2).is_ok());
        assert!(typical_spam_builder(&basis, 2, 2).is_err());
        assert!(typical_spam_builder(&basis, 5, 4).is_err());
    }

    #[test]
    fn typical_builder_is_covariant_under_block_relabeling() {
        let mut rng = RandomStream::derive(62, 0, "quantum-relabel");
        let basis = random_unitary(6, &mut rng);
        let spam = typical_spam_builder(&basis, 0, 3).unwrap();
        let mut swapped = basis.clone();
        for n in 0..2 {
            swapped.swap_columns(2 + n, 4 + n);
        }
        let relabeled = typical_spam_builder(&swapped, 0, 3).unwrap();
        assert!(max_entry_gap(relabeled.k_o(1), spam.k_o(2)) < 1e-13);
        assert!(max_entry_gap(relabeled.k_o(2), spam.k_o(1)) < 1e-13);
        assert!(max_entry_gap(relabeled.u_c(1), spam.u_c(2)) < 1e-13);
        assert!(max_entry_gap(relabeled.u_c(2), spam.u_c(1)) < 1e-13);
        assert!(max_entry_gap(relabeled.k_o(0), spam.k_o(0)) < 1e-13);
    }

    #[test]
    fn energy_measurement_preserves_eigenstates_and_samples_the_filter_law() {
        let mut rng = RandomStream::derive(63, 0, "quantum-qpe");
        let energy = EnergyTable::new(vec![-0.4, 0.3, 1.1]).unwrap();
        let sigma = 0.35;
        let ham = DiagonalHamiltonian::new(energy, sigma).unwrap();
        let psi = QuantumState::basis_state(3, 1).unwrap();
        let runs = 4000;
        let mut sum = 0.0;
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let (omega, out) = qpe_measure(&psi, &ham, &mut rng).unwrap();
            assert_abs_diff_eq!(out.population(1), 1.0, epsilon = 1e-12);
            sum += omega;
            samples.push(omega);
        }
        let mean = sum / runs as f64;
        let se = sigma / (runs as f64).sqrt();
        assert!((mean - 0.3).abs() < 4.0 * se, "mean {mean}");
        let var = samples.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>()
            / (runs as f64 - 1.0);
        let m4 = samples
            .iter()
            .map(|w| (w - mean).powi(4))
            .sum::<f64>()
            / runs as f64;
        let var_se = ((m4 - var * var) / runs as f64).sqrt();
        assert!(
            (var - sigma * sigma).abs() < 4.0 * var_se,
            "variance {var} vs {}",
            sigma * sigma
        );
    }

    #[test]
    fn energy_measurement_collapses_well_separated_superpositions() {
        let mut rng = RandomStream::derive(64, 0, "quantum-collapse");
        let ham =
            DiagonalHamiltonian::new(EnergyTable::new(vec![0.0, 10.0]).unwrap(), 0.05).unwrap();
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let even = QuantumState::new(CVector::from_vec(vec![real(half), real(half)])).unwrap();
        for _ in 0..50 {
            let (omega, collapsed) = qpe_measure(&even, &ham, &mut rng).unwrap();
            let winner = collapsed.dominant_component();
            assert!(collapsed.population(winner) > 1.0 - 1e-9);
            assert!((omega - ham.energy().get(winner)).abs() < 10.0 * 0.05);
            let (again, stayed) = qpe_measure(&collapsed, &ham, &mut rng).unwrap();
            assert_eq!(stayed.dominant_component(), winner);
            assert!((again - ham.energy().get(winner)).abs() < 10.0 * 0.05);
        }
    }

    #[test]
    fn observation_measurement_matches_operator_probabilities() {
        let mut rng = RandomStream::derive(65, 0, "quantum-povm");
        let basis = random_unitary(4, &mut rng);
        let spam = typical_spam_builder(&basis, 0, 2).unwrap();
        for _ in 0..40 {
            let psi = random_state(4, &mut rng);
            let probs = spam.outcome_probabilities(&psi).unwrap();
            assert_abs_diff_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        }
        let psi = random_state(4, &mut rng);
        let probs = spam.outcome_probabilities(&psi).unwrap();
        let shots = 20_000;
        let mut counts = vec![0u64; 2];
        for _ in 0..shots {
            let (i, out) = povm_measure(&psi, &spam, &mut rng).unwrap();
            counts[i] += 1;
            assert_abs_diff_eq!(out.amplitudes().norm(), 1.0, epsilon = 1e-12);
        }
        for i in 0..2 {
            let p_hat = counts[i] as f64 / shots as f64;
            let se = (probs[i] * (1.0 - probs[i]) / shots as f64).sqrt();
            assert!(
                (p_hat - probs[i]).abs() < 4.0 * se + 1e-9,
                "outcome {i}: {p_hat} vs {}",
                probs[i]
            );
        }

        let projective = typical_spam_builder(&CMatrix::identity(2, 2), 0, 2).unwrap();
        let eigen = QuantumState::basis_state(2, 1).unwrap();
        for _ in 0..20 {
            let (i, _) = povm_measure(&eigen, &projective, &mut rng).unwrap();
            assert_eq!(i, 1);
        }
    }

    #[test]
    fn update_shares_its_outcome_law_with_the_classical_sampler() {
        let mut rng_q = RandomStream::derive(66, 0, "quantum-law-q");
        let mut rng_c = RandomStream::derive(66, 1, "quantum-law-c");
        let energy = EnergyTable::new(vec![0.0, 0.4, 1.0]).unwrap();
        let sigma = 0.4;
        let b = beta(0.8);
        let driver = random_driver(3, &mut rng_q);
        let cfg = ImpreciseConfig::new(sigma, 3, driver, b).unwrap();
        let ham = DiagonalHamiltonian::new(energy.clone(), sigma).unwrap();
        let spam_q = typical_spam_builder(&CMatrix::identity(3, 3), 1, 3).unwrap();
        let model_c = SpamMhModel::new(
            StateSpace::new(3).unwrap(),
            energy,
            ClassicalSpamModel::direct_access(3).unwrap(),
        )
        .unwrap();

        let runs = 30_000;
        let mut counts_q: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
        let mut counts_c: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
        let mut psi = QuantumState::basis_state(3, 0).unwrap();
        for step in 0..runs {
            let (record, out) = qmh_step(&psi, &ham, &spam_q, &cfg, &mut rng_q).unwrap();
            assert_abs_diff_eq!(out.amplitudes().norm(), 1.0, epsilon = 1e-10);
            psi = out;
            let mut key: Vec<usize> =
                record.trajectory.entries().iter().map(|e| e.0).collect();
            key.push(record.truncated as usize);
            *counts_q.entry(key).or_default() += 1;
            if step == 0 {
                assert_eq!(record.halted_at + 1, record.trajectory.len());
            }
        }
        let mut state = 0usize;
        for _ in 0..runs {
            let record = imh_step(&model_c, &cfg, state, &mut rng_c).unwrap();
            state = record.final_state;
            let mut key: Vec<usize> =
                record.trajectory.entries().iter().map(|e| e.0).collect();
            key.push(record.truncated as usize);
            *counts_c.entry(key).or_default() += 1;
        }

        let keys: Vec<Vec<usize>> = counts_q
            .keys()
            .chain(counts_c.keys())
            .cloned()
            .collect();
        let n = runs as f64;
        for key in keys {
            let c_q = *counts_q.get(&key).unwrap_or(&0) as f64;
            let c_c = *counts_c.get(&key).unwrap_or(&0) as f64;
            if c_q + c_c < 25.0 {
                continue;
            }
            let pooled = (c_q + c_c) / (2.0 * n);
            let se = (pooled * (1.0 - pooled) * 2.0 / n).sqrt();
            assert!(
                (c_q / n - c_c / n).abs() < 4.0 * se,
                "law gap at {key:?}: {} vs {}",
                c_q / n,
                c_c / n
            );
        }
    }

    #[test]
    fn idle_channel_reproduces_the_halting_law() {
        let mut rng = RandomStream::derive(67, 0, "quantum-idle");
        let sigma = 1.0;
        let b = beta(1.0);
        let n_max = 12;
        let ham = DiagonalHamiltonian::new(EnergyTable::new(vec![0.3, 0.3]).unwrap(), sigma)
            .unwrap();
        let spam = QuantumSpamModel::idle(2).unwrap();
        let driver =
            StochasticKernel::from_rows(vec![Distribution::uniform(1).unwrap()]).unwrap();
        let cfg = ImpreciseConfig::new(sigma, n_max, driver, b).unwrap();
        let table = halting_table(HaltingParams::new(1.0, n_max).unwrap(), n_max).unwrap();

        let runs = 20_000u64;
        let mut counts = vec![0u64; n_max + 1];
        let mut overflow = 0u64;
        let psi = QuantumState::basis_state(2, 0).unwrap();
        for _ in 0..runs {
            let (record, out) = qmh_step(&psi, &ham, &spam, &cfg, &mut rng).unwrap();
            assert_abs_diff_eq!(out.population(0), 1.0, epsilon = 1e-12);
            if record.truncated {
                overflow += 1;
            } else {
                counts[record.halted_at] += 1;
            }
        }
        for n in 1..=n_max {
            let expected = table.p(n);
            let p_hat = counts[n] as f64 / runs as f64;
            let se = (expected * (1.0 - expected) / runs as f64).sqrt().max(1e-5);
            assert!(
                (p_hat - expected).abs() < 4.0 * se,
                "halt {n}: {p_hat} vs {expected}"
            );
        }
        let tail = table.tail(n_max + 1);
        let tail_hat = overflow as f64 / runs as f64;
        let se = (tail * (1.0 - tail) / runs as f64).sqrt().max(1e-5);
        assert!(
            (tail_hat - tail).abs() < 4.0 * se,
            "overflow {tail_hat} vs {tail}"
        );
    }

    #[test]
    fn single_round_idle_kraus_matches_the_hand_assembled_form() {
        let energy = EnergyTable::new(vec![0.0, 0.9]).unwrap();
        let sigma = 0.45;
        let b = beta(1.1);
        let ham = DiagonalHamiltonian::new(energy, sigma).unwrap();
        let spam = QuantumSpamModel::idle(2).unwrap();
        let driver =
            StochasticKernel::from_rows(vec![Distribution::uniform(1).unwrap()]).unwrap();
        let traj = Trajectory::new(vec![(0, 0.25), (0, 0.85)]).unwrap();
        let built = trajectory_kraus(&traj, &ham, &spam, &driver, b, false).unwrap();
        assert!(!built.vanished);
        let accept =
            crate::trajectory::accept_explicit(&traj, &driver, b, sigma).unwrap();
        for a in 0..2 {
            let expected =
                ham.amplitude(0.85, a) * ham.amplitude(0.25, a) * accept.sqrt();
            assert_abs_diff_eq!(built.matrix[(a, a)].re, expected, epsilon = 1e-14);
            assert_abs_diff_eq!(built.matrix[(a, a)].im, 0.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(built.matrix[(0, 1)].norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(built.matrix[(1, 0)].norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn kraus_amplitudes_square_to_classical_branch_densities() {
        let energy = EnergyTable::new(vec![0.0, 0.5, 1.2]).unwrap();
        let sigma = 0.35;
        let b = beta(0.9);
        let ham = DiagonalHamiltonian::new(energy.clone(), sigma).unwrap();
        let spam_q = typical_spam_builder(&CMatrix::identity(3, 3), 1, 3).unwrap();
        let model_c = SpamMhModel::new(
            StateSpace::new(3).unwrap(),
            energy,
            ClassicalSpamModel::direct_access(3).unwrap(),
        )
        .unwrap();
        let mut rng = RandomStream::derive(68, 0, "quantum-branch");
        let driver = random_driver(3, &mut rng);

        for &(rounds, n_max) in &[(1usize, 4usize), (2, 4), (3, 3)] {
            let o0 = 2;
            let o1 = 0;
            let labels: Vec<usize> = (0..=rounds)
                .map(|k| if k % 2 == 0 { o0 } else { o1 })
                .collect();
            let entries: Vec<(usize, f64)> = labels
                .iter()
                .map(|&l| (l, 2.0 * rng.uniform() - 0.5))
                .collect();
            let traj = Trajectory::new(entries).unwrap();
            let path: Vec<usize> = (0..=rounds)
                .map(|k| if k % 2 == 0 { o1 } else { o0 })
                .collect();
            let cfg = ImpreciseConfig::new(sigma, n_max, driver.clone(), b).unwrap();
            let terminal = rounds == n_max;
            let built =
                trajectory_kraus(&traj, &ham, &spam_q, &driver, b, terminal).unwrap();
            let density =
                crate::imprecise::branch_probability(&traj, &path, &model_c, &cfg)
                    .unwrap();
            let amp = built.matrix[(path[rounds], path[0])].norm();
            assert_abs_diff_eq!(amp * amp, density, epsilon = 1e-12);
            let off_mass: f64 = built
                .matrix
                .iter()
                .map(|z| z.norm_sqr())
                .sum::<f64>()
                - amp * amp;
            assert!(off_mass < 1e-20, "stray amplitude {off_mass}");
        }
    }

    fn well_conditioned(
        traj: &Trajectory,
        driver: &StochasticKernel,
        b: InverseTemperature,
        sigma: f64,
    ) -> bool {
        let shift = b.value() * sigma * sigma;
        for t in [traj.shifted_first(shift), traj.reversed().shifted_first(shift)] {
            let Ok(sums) = decision_partial_sums(&t, driver, b, sigma) else {
                return false;
            };
            let n = t.rounds();
            let den = sums[..n].iter().copied().fold(f64::INFINITY, f64::min);
            if !(den > 5e-2) {
                return false;
            }
        }
        true
    }

    #[test]
    fn balance_identity_holds_across_random_models() {
        let mut rng = RandomStream::derive(69, 0, "quantum-balance");
        let dims = [2usize, 4, 6];
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 300 {
            attempts += 1;
            assert!(attempts < 30_000, "conditioning guard rejected too much");
            let dim = dims[attempts % dims.len()];
            let obs = match dim {
                2 => 2,
                4 => [2, 4][attempts % 2],
                _ => [2, 3, 6][attempts % 3],
            };
            let basis = random_unitary(dim, &mut rng);
            let spam = typical_spam_builder(&basis, attempts % obs, obs).unwrap();
            let driver = random_driver(obs, &mut rng);
            let rounds = 1 + rng.below(3);
            let entries: Vec<(usize, f64)> = (0..=rounds)
                .map(|_| (rng.below(obs), 3.0 * rng.uniform() - 1.5))
                .collect();
            let traj = Trajectory::new(entries).unwrap();
            let b = beta(0.1 + 0.9 * rng.uniform());
            let sigma = 0.1 + 0.7 * rng.uniform();
            if !well_conditioned(&traj, &driver, b, sigma) {
                continue;
            }
            let energy = EnergyTable::new(
                (0..dim).map(|_| 2.0 * rng.uniform() - 1.0).collect(),
            )
            .unwrap();
            let ham = DiagonalHamiltonian::new(energy, sigma).unwrap();
            let violation = quantum_balance_check(&traj, &ham, &spam, &driver, b)
                .unwrap()
                .expect("well-conditioned trajectory");
            assert!(violation < 1e-10, "violation {violation}");
            checked += 1;
        }
    }

    #[test]
    fn broken_control_symmetry_is_detected_and_scales_linearly() {
        let mut rng = RandomStream::derive(70, 0, "quantum-mutation");
        let basis = random_unitary(2, &mut rng);
        let spam = typical_spam_builder(&basis, 0, 2).unwrap();
        let driver = random_driver(2, &mut rng);
        let b = beta(0.7);
        let sigma = 0.4;
        let ham = DiagonalHamiltonian::new(EnergyTable::new(vec![0.0, 0.6]).unwrap(), sigma)
            .unwrap();
        let traj = Trajectory::new(vec![(0, 0.1), (1, 0.4), (0, -0.2)]).unwrap();
        assert!(well_conditioned(&traj, &driver, b, sigma));
        let clean = quantum_balance_check(&traj, &ham, &spam, &driver, b)
            .unwrap()
            .unwrap();
        assert!(clean < 1e-12);

        let violation_at = |eps: f64| {
            let mut u_c: Vec<CMatrix> = (0..2).map(|o| spam.u_c(o).clone()).collect();
            u_c[1][(0, 0)] += real(eps);
            let mutated = QuantumSpamModel {
                k_o: (0..2).map(|i| spam.k_o(i).clone()).collect(),
                u_c,
            };
            quantum_balance_check(&traj, &ham, &mutated, &driver, b)
                .unwrap()
                .unwrap()
        };
        let small = violation_at(1e-4);
        let large = violation_at(2e-4);
        assert!(small > 1e-6, "mutation missed: {small}");
        let ratio = large / small;
        assert!((1.8..=2.2).contains(&ratio), "nonlinear response {ratio}");
    }

    #[test]
    fn channel_estimate_is_stationary_on_the_thermal_state() {
        let mut rng = RandomStream::derive(71, 0, "quantum-channel");
        let energy = EnergyTable::new(vec![0.0, 0.7]).unwrap();
        let sigma = 0.3;
        let b = beta(0.9);
        let basis = random_unitary(2, &mut rng);
        let spam = typical_spam_builder(&basis, 0, 2).unwrap();
        let driver = random_driver(2, &mut rng);
        let cfg = ImpreciseConfig::new(sigma, 6, driver, b).unwrap();
        let ham = DiagonalHamiltonian::new(energy, sigma).unwrap();
        let rho = ham.thermal(b).unwrap();
        let estimate = channel_apply_mc(&rho, &ham, &spam, &cfg, 6000, &mut rng).unwrap();
        let drift = trace_distance(&estimate.mean, &rho).unwrap();
        let se_budget: f64 = estimate.entry_se.iter().sum();
        assert!(
            drift <= estimate.truncation_rate + 2.0 * se_budget + 1e-6,
            "drift {drift}, truncation {}, SE budget {se_budget}",
            estimate.truncation_rate
        );
    }

    #[test]
    fn diagonal_channels_keep_the_estimate_diagonal() {
        let mut rng = RandomStream::derive(72, 0, "quantum-diagonal");
        let energy = EnergyTable::new(vec![0.0, 0.5, 1.0]).unwrap();
        let sigma = 0.35;
        let b = beta(1.0);
        let spam = typical_spam_builder(&CMatrix::identity(3, 3), 2, 3).unwrap();
        let driver = random_driver(3, &mut rng);
        let cfg = ImpreciseConfig::new(sigma, 4, driver, b).unwrap();
        let ham = DiagonalHamiltonian::new(energy, sigma).unwrap();
        let rho = ham.thermal(b).unwrap();
        let estimate = channel_apply_mc(&rho, &ham, &spam, &cfg, 3000, &mut rng).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                if r == c {
                    continue;
                }
                let magnitude = estimate.mean.entries()[(r, c)].norm();
                let se = estimate.entry_se[(r, c)];
                assert!(
                    magnitude <= 4.0 * se + 1e-12,
                    "off-diagonal ({r},{c}) = {magnitude}, se {se}"
                );
            }
        }
    }

    #[test]
    fn pair_correlations_start_at_the_collision_gap_and_decay() {
        let mut rng = RandomStream::derive(73, 0, "quantum-pair");
        let energy = EnergyTable::new(vec![0.0, 0.8]).unwrap();
        let sigma = 0.3;
        let b = beta(1.0);
        let basis = random_unitary(2, &mut rng);
        let spam = typical_spam_builder(&basis, 0, 2).unwrap();
        let driver = random_driver(2, &mut rng);
        let cfg = ImpreciseConfig::new(sigma, 5, driver, b).unwrap();
        let ham = DiagonalHamiltonian::new(energy, sigma).unwrap();
        let p = thermal_distribution(ham.energy(), b).unwrap();
        let report = pair_mixing_check(&ham, &spam, &cfg, 3, 4000, &mut rng).unwrap();
        assert_abs_diff_eq!(report.distances[0], 1.0 - p.collision(), epsilon = 1e-15);
        for w in report.distances.windows(2) {
            assert!(w[1] <= w[0] + 0.04, "correlation grew: {:?}", report.distances);
        }
        for d in &report.distances {
            assert!((0.0..=1.0 + 1e-9).contains(d));
        }
    }

    #[test]
    fn fully_repreparing_channel_decorrelates_in_one_step() {
        let mut rng = RandomStream::derive(74, 0, "quantum-reprepare");
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let hadamard = CMatrix::from_row_slice(
            2,
            2,
            &[real(half), real(half), real(half), -real(half)],
        );
        let spam = typical_spam_builder(&hadamard, 0, 2).unwrap();
        let driver =
            StochasticKernel::from_rows(vec![Distribution::uniform(2).unwrap(); 2]).unwrap();
        let cfg = ImpreciseConfig::new(0.5, 4, driver, beta(0.0)).unwrap();
        let ham =
            DiagonalHamiltonian::new(EnergyTable::new(vec![0.0, 1.0]).unwrap(), 0.5).unwrap();
        let report = pair_mixing_check(&ham, &spam, &cfg, 1, 4000, &mut rng).unwrap();
        assert_abs_diff_eq!(report.distances[0], 0.5, epsilon = 1e-15);
        assert!(
            report.distances[1] < 0.03,
            "residual correlation {}",
            report.distances[1]
        );
    }

    #[test]
    fn trace_distance_reduces_to_classical_total_variation() {
        let r0 = DensityMatrix::from_state(&QuantumState::basis_state(2, 0).unwrap());
        let r1 = DensityMatrix::from_state(&QuantumState::basis_state(2, 1).unwrap());
        assert_abs_diff_eq!(trace_distance(&r0, &r0).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(trace_distance(&r0, &r1).unwrap(), 1.0, epsilon = 1e-12);

        let p = Distribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let q = Distribution::new(vec![0.6, 0.1, 0.3]).unwrap();
        let diag = |d: &Distribution| {
            DensityMatrix::new(CMatrix::from_fn(3, 3, |r, c| {
                if r == c {
                    real(d.prob(r))
                } else {
                    real(0.0)
                }
            }))
            .unwrap()
        };
        assert_abs_diff_eq!(
            trace_distance(&diag(&p), &diag(&q)).unwrap(),
            tv_distance(&p, &q).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn thermal_inputs_estimate_trace_formula_observables() {
        let mut rng = RandomStream::derive(75, 0, "quantum-estimators");
        let energy = EnergyTable::new(vec![0.0, 0.3, 0.9, 1.4]).unwrap();
        let sigma = 0.25;
        let b = beta(1.0);
        let basis = random_unitary(4, &mut rng);
        let spam = typical_spam_builder(&basis, 1, 2).unwrap();
        let driver = random_driver(2, &mut rng);
        let cfg = ImpreciseConfig::new(sigma, 8, driver, b).unwrap();
        let ham = DiagonalHamiltonian::new(energy, sigma).unwrap();
        let rho = ham.thermal(b).unwrap();
        let p = thermal_distribution(ham.energy(), b).unwrap();
        let f = [0.4, -1.3];
        let f_op = spam.observable_operator(&f).unwrap();
        let mu_f = rho.expectation(&f_op).unwrap();
        let mu_omega = rho.expectation(&ham.operator()).unwrap();

        let runs = 30_000;
        let mut sum_f = 0.0;
        let mut omegas = Vec::with_capacity(runs);
        for _ in 0..runs {
            let a = p.sample(&mut rng);
            let psi = QuantumState::basis_state(4, a).unwrap();
            let (record, _) = qmh_step(&psi, &ham, &spam, &cfg, &mut rng).unwrap();
            sum_f += f[record.trajectory.observation(1)];
            omegas.push(record.trajectory.energy(0));
        }
        let n = runs as f64;
        let mean_f = sum_f / n;
        let se_f = {
            let spread: f64 = f.iter().map(|v| (v - mu_f) * (v - mu_f)).fold(0.0, f64::max);
            (spread / n).sqrt()
        };
        assert!(
            (mean_f - mu_f).abs() < 4.0 * se_f,
            "label estimator {mean_f} vs {mu_f}"
        );

        let mean_w = omegas.iter().sum::<f64>() / n;
        let var_w = omegas
            .iter()
            .map(|w| (w - mean_w) * (w - mean_w))
            .sum::<f64>()
            / (n - 1.0);
        let se_w = (var_w / n).sqrt();
        assert!(
            (mean_w - mu_omega).abs() < 4.0 * se_w,
            "energy estimator {mean_w} vs {mu_omega}"
        );

        let var_intrinsic: f64 = (0..4)
            .map(|a| {
                let gap = ham.energy().get(a) - mu_omega;
                gap * gap * p.prob(a)
            })
            .sum();
        let expected_var = var_intrinsic + sigma * sigma;
        let m4 = omegas
            .iter()
            .map(|w| (w - mean_w).powi(4))
            .sum::<f64>()
            / n;
        let var_se = ((m4 - var_w * var_w).max(0.0) / n).sqrt();
        assert!(
            (var_w - expected_var).abs() < 4.0 * var_se,
            "variance split {var_w} vs {expected_var}"
        );
    }

    #[test]
    fn retention_heuristic_stays_in_range() {
        let mut rng = RandomStream::derive(76, 0, "quantum-retention");
        let energy = EnergyTable::new(vec![0.0, 0.6]).unwrap();
        let sigma = 0.3;
        let b = beta(1.0);
        let basis = random_unitary(2, &mut rng);
        let spam = typical_spam_builder(&basis, 0, 2).unwrap();
        let driver = random_driver(2, &mut rng);
        let cfg = ImpreciseConfig::new(sigma, 5, driver, b).unwrap();
        let ham = DiagonalHamiltonian::new(energy, sigma).unwrap();
        let estimate =
            retention_estimate_mc(&ham, &spam, &cfg, 2, 2000, &mut rng).unwrap();
        assert!(
            (0.0..=1.1).contains(&estimate),
            "retention estimate {estimate}"
        );
    }
}
