//! Verification suite: the library's balance and identity checks run
//! on seeded random instances (plus the configured model when one is
//! given), each reported as a machine-readable pass/fail entry.
//!
//! With the mutation flag set, every check is re-run in a deliberately
//! broken variant and must detect the breakage; a silent mutation is a
//! verification failure just like a failed check.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;
use serde_json::json;

use qmhlab_core::classical::{build_pm_kernel, check_detailed_balance, MhModel};
use qmhlab_core::imprecise::{branch_balance_check, gaussian_identity_check};
use qmhlab_core::model::{
    Distribution, EnergyTable, InverseTemperature, StateSpace, StochasticKernel,
};
use qmhlab_core::quad::GaussHermite;
use qmhlab_core::quantum::{
    quantum_balance_check, trajectory_kraus, typical_spam_builder, DiagonalHamiltonian,
    QuantumSpamModel,
};
use qmhlab_core::rng::RandomStream;
use qmhlab_core::trajectory::{
    accept_explicit, accept_explicit_offset, accept_recursive, decision_partial_sums,
    decision_weight_offset, Trajectory,
};

use crate::artifacts::{Session, CODE_VERSION};
use crate::config::{self, Experiment};
use crate::CliError;

pub const CHECK_NAMES: [&str; 6] = [
    "classical_balance",
    "branch_balance",
    "acceptance_equivalence",
    "quantum_spam",
    "quantum_balance",
    "gaussian_identity",
];

#[derive(Debug, Serialize)]
pub struct MutationResult {
    pub threshold: f64,
    pub worst: f64,
    pub detected: bool,
}

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub tolerance: f64,
    pub worst: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutation: Option<MutationResult>,
}

impl CheckResult {
    fn new(name: &'static str, cases: usize, tolerance: f64, worst: f64) -> Self {
        Self {
            name,
            cases,
            tolerance,
            worst,
            pass: worst <= tolerance,
            mutation: None,
        }
    }

    fn with_mutation(mut self, worst: f64) -> Self {
        self.mutation = Some(MutationResult {
            threshold: MUTATION_THRESHOLD,
            worst,
            detected: worst > MUTATION_THRESHOLD,
        });
        self
    }

    fn ok(&self) -> bool {
        self.pass && self.mutation.as_ref().map(|m| m.detected).unwrap_or(true)
    }
}

const MUTATION_THRESHOLD: f64 = 1e-6;

/// Runs the configured checks and writes `report.json`. Returns whether
/// everything passed (and, under mutation, every breakage was caught).
pub fn run_verify(exp: &Experiment, session: &mut Session) -> Result<bool, CliError> {
    let cfg = &exp.config;
    let names: Vec<&str> = match &cfg.checks {
        Some(list) => list.iter().map(|s| s.as_str()).collect(),
        None => CHECK_NAMES.to_vec(),
    };
    let mutation = cfg.mutation;

    let configured = configured_model(exp)?;
    let mut results = Vec::new();
    for name in &names {
        let mut rng = RandomStream::derive(cfg.seed, 0, &format!("verify-{name}"));
        let result = match *name {
            "classical_balance" => classical_balance(&mut rng, configured.as_ref(), mutation),
            "branch_balance" => branch_balance(&mut rng, mutation),
            "acceptance_equivalence" => acceptance_equivalence(&mut rng, mutation),
            "quantum_spam" => quantum_spam(&mut rng, mutation),
            "quantum_balance" => quantum_balance(&mut rng, mutation),
            "gaussian_identity" => gaussian_identity(mutation),
            other => {
                return Err(CliError::config("checks", format!("unknown check `{other}`")))
            }
        }?;
        results.push(result);
    }

    let all_pass = results.iter().all(|r| r.pass);
    let all_detected = results
        .iter()
        .all(|r| r.mutation.as_ref().map(|m| m.detected).unwrap_or(true));
    let ok = results.iter().all(CheckResult::ok);

    for r in &results {
        let verdict = if r.pass { "pass" } else { "FAIL" };
        let mutated = match &r.mutation {
            Some(m) if m.detected => ", mutation detected".to_string(),
            Some(m) => format!(", mutation UNDETECTED (worst {:.3e})", m.worst),
            None => String::new(),
        };
        println!(
            "check {}: {verdict} (worst {:.3e}, tol {:.0e}, {} cases{mutated})",
            r.name, r.worst, r.tolerance, r.cases
        );
    }

    session.write_json(
        "report.json",
        &json!({
            "format": "qmhlab-verify-report",
            "config_hash": session.hash,
            "code_version": CODE_VERSION,
            "seed": cfg.seed,
            "mutation": mutation,
            "checks": results,
            "all_pass": all_pass,
            "all_mutations_detected": all_detected,
        }),
    )?;
    Ok(ok)
}

/// The model a config describes, when it describes one usable here: a
/// classical chain with an explicit single proposal kernel.
fn configured_model(exp: &Experiment) -> Result<Option<MhModel>, CliError> {
    let cfg = &exp.config;
    let (Some(spec), Some(kernel_spec)) = (&cfg.model, &cfg.kernel) else {
        return Ok(None);
    };
    let (space, energy, beta) = config::build_model_parts(spec)?;
    let kernels = config::build_kernel_cycle(kernel_spec, space.size())?;
    if kernels.len() != 1 {
        return Ok(None);
    }
    MhModel::new(space, energy, beta, kernels.into_iter().next().unwrap())
        .map(Some)
        .map_err(|e| CliError::config("kernel", e.to_string()))
}

fn random_driver(size: usize, rng: &mut RandomStream) -> StochasticKernel {
    let rows = (0..size)
        .map(|_| {
            let w: Vec<f64> = (0..size).map(|_| 0.05 + rng.uniform()).collect();
            Distribution::from_weights(&w).expect("positive weights")
        })
        .collect();
    StochasticKernel::from_rows(rows).expect("square rows")
}

fn random_model(size: usize, rng: &mut RandomStream) -> MhModel {
    let energy = EnergyTable::new((0..size).map(|_| 2.5 * rng.uniform() - 1.0).collect())
        .expect("finite energies");
    let beta = InverseTemperature::new(0.2 + 1.3 * rng.uniform()).expect("positive");
    let driver = random_driver(size, rng);
    MhModel::new(StateSpace::new(size).expect("nonempty"), energy, beta, driver)
        .expect("consistent sizes")
}

fn random_trajectory(rounds: usize, obs: usize, rng: &mut RandomStream) -> Trajectory {
    let entries: Vec<(usize, f64)> = (0..=rounds)
        .map(|_| (rng.below(obs), 2.0 * rng.uniform() - 1.0))
        .collect();
    Trajectory::new(entries).expect("at least two entries")
}

/// Both orientations of the bias-shifted trajectory keep their partial
/// sums clear of zero, so balance comparisons stay well-defined.
fn well_conditioned(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
) -> bool {
    let shift = beta.value() * sigma * sigma;
    for t in [traj.shifted_first(shift), traj.reversed().shifted_first(shift)] {
        match decision_partial_sums(&t, driver, beta, sigma) {
            Ok(sums) => {
                let n = t.rounds();
                let den = sums[..n].iter().copied().fold(f64::INFINITY, f64::min);
                if den < 5e-2 {
                    return false;
                }
            }
            Err(_) => return false,
        }
    }
    true
}

fn random_unitary(dim: usize, rng: &mut RandomStream) -> DMatrix<Complex64> {
    DMatrix::from_fn(dim, dim, |_, _| {
        Complex64::new(rng.normal(0.0, 1.0), rng.normal(0.0, 1.0))
    })
    .qr()
    .q()
}

fn max_entry_gap(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn max_dev_from_identity(m: &DMatrix<Complex64>) -> f64 {
    let id = DMatrix::<Complex64>::identity(m.nrows(), m.ncols());
    max_entry_gap(m, &id)
}

fn classical_balance(
    rng: &mut RandomStream,
    configured: Option<&MhModel>,
    mutation: bool,
) -> Result<CheckResult, CliError> {
    let mut worst: f64 = 0.0;
    let mut worst_mutated: f64 = 0.0;
    let mut cases = 0;
    let mut run_case = |model: &MhModel| -> Result<(), CliError> {
        let kernel = build_pm_kernel(model).map_err(|e| CliError::Internal(e.to_string()))?;
        let thermal = model.thermal().map_err(|e| CliError::Internal(e.to_string()))?;
        let report = check_detailed_balance(&kernel, &thermal)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        worst = worst.max(report.max_flow_violation).max(report.stationarity_l1);
        cases += 1;
        Ok(())
    };
    if let Some(model) = configured {
        run_case(model)?;
    }
    let mut models = Vec::new();
    for _ in 0..40 {
        let size = 2 + rng.below(5);
        let model = random_model(size, rng);
        run_case(&model)?;
        models.push(model);
    }
    if mutation {
        // A kernel balanced for the right temperature cannot also
        // balance a colder one.
        for model in &models {
            let kernel =
                build_pm_kernel(model).map_err(|e| CliError::Internal(e.to_string()))?;
            let beta = InverseTemperature::new(model.beta.value() * 1.5)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            let wrong = qmhlab_core::model::thermal_distribution(&model.energy, beta)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            let report = check_detailed_balance(&kernel, &wrong)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            worst_mutated = worst_mutated.max(report.max_flow_violation);
        }
    }
    let result = CheckResult::new("classical_balance", cases, 1e-12, worst);
    Ok(if mutation { result.with_mutation(worst_mutated) } else { result })
}

fn branch_balance(rng: &mut RandomStream, mutation: bool) -> Result<CheckResult, CliError> {
    let mut worst: f64 = 0.0;
    let mut worst_mutated: f64 = 0.0;
    let mut cases = 0;
    let mut attempts = 0;
    while cases < 400 && attempts < 40_000 {
        attempts += 1;
        let obs = 2 + rng.below(3);
        let driver = random_driver(obs, rng);
        let traj = random_trajectory(1 + rng.below(4), obs, rng);
        let beta = InverseTemperature::new(0.2 + 0.8 * rng.uniform()).expect("positive");
        let sigma = 0.2 + 0.5 * rng.uniform();
        if !well_conditioned(&traj, &driver, beta, sigma) {
            continue;
        }
        let Some(v) = branch_balance_check(&traj, &driver, beta, sigma)
            .map_err(|e| CliError::Internal(e.to_string()))?
        else {
            continue;
        };
        worst = worst.max(v);
        cases += 1;
        if mutation && cases % 4 == 0 {
            worst_mutated = worst_mutated.max(bias_free_gap(&traj, &driver, beta, sigma));
        }
    }
    let result = CheckResult::new("branch_balance", cases, 1e-12, worst);
    Ok(if mutation { result.with_mutation(worst_mutated) } else { result })
}

/// Balance gap when the noise-bias correction is dropped from the
/// decision weights but the energy shift is kept.
fn bias_free_gap(
    traj: &Trajectory,
    driver: &StochasticKernel,
    beta: InverseTemperature,
    sigma: f64,
) -> f64 {
    let shift = beta.value() * sigma * sigma;
    let fwd = decision_weight_offset(&traj.shifted_first(shift), driver, beta, 0.0, false);
    let bwd = decision_weight_offset(
        &traj.reversed().shifted_first(shift),
        driver,
        beta,
        0.0,
        false,
    );
    match (fwd, bwd) {
        (Ok(f), Ok(b)) => {
            let lhs = f * (-beta.value() * traj.energy(0)).exp();
            let rhs = b * (-beta.value() * traj.energy(traj.rounds())).exp();
            (lhs - rhs).abs()
        }
        _ => 0.0,
    }
}

fn acceptance_equivalence(
    rng: &mut RandomStream,
    mutation: bool,
) -> Result<CheckResult, CliError> {
    let mut worst: f64 = 0.0;
    let mut worst_mutated: f64 = 0.0;
    let mut cases = 0;
    let mut attempts = 0;
    while cases < 400 && attempts < 40_000 {
        attempts += 1;
        let obs = 2 + rng.below(3);
        let driver = random_driver(obs, rng);
        let traj = random_trajectory(1 + rng.below(5), obs, rng);
        let beta = InverseTemperature::new(0.2 + 1.3 * rng.uniform()).expect("positive");
        let sigma = 0.2 + 0.5 * rng.uniform();
        let explicit = match accept_explicit(&traj, &driver, beta, sigma) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let recursive = match accept_recursive(&traj, &driver, beta, sigma) {
            Ok(v) => v,
            Err(_) => continue,
        };
        worst = worst.max((explicit - recursive).abs());
        cases += 1;
        if mutation {
            if let Ok(unbiased) = accept_explicit_offset(&traj, &driver, beta, 0.0) {
                worst_mutated = worst_mutated.max((explicit - unbiased).abs());
            }
        }
    }
    let result = CheckResult::new("acceptance_equivalence", cases, 1e-12, worst);
    Ok(if mutation { result.with_mutation(worst_mutated) } else { result })
}

fn spam_defects(spam: &QuantumSpamModel) -> f64 {
    let dim = spam.dim();
    let obs = spam.obs_size();
    let mut completeness = DMatrix::<Complex64>::zeros(dim, dim);
    for i in 0..obs {
        completeness += spam.k_o(i).adjoint() * spam.k_o(i);
    }
    let mut worst = max_dev_from_identity(&completeness);
    for o in 0..obs {
        worst = worst.max(max_dev_from_identity(&(spam.u_c(o).adjoint() * spam.u_c(o))));
    }
    for o in 0..obs {
        for i in 0..obs {
            let lhs = spam.u_c(o) * spam.k_o(i);
            let rhs = (spam.u_c(i) * spam.k_o(o)).adjoint();
            worst = worst.max(max_entry_gap(&lhs, &rhs));
        }
    }
    worst
}

fn quantum_spam(rng: &mut RandomStream, mutation: bool) -> Result<CheckResult, CliError> {
    let mut worst: f64 = 0.0;
    let mut worst_mutated: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..30 {
        let dim = [2usize, 4, 6][rng.below(3)];
        let divisors: Vec<usize> = (1..=dim).filter(|d| dim.is_multiple_of(*d)).collect();
        let obs = divisors[rng.below(divisors.len())];
        let j = rng.below(obs);
        let basis = random_unitary(dim, rng);
        let spam = typical_spam_builder(&basis, j, obs)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        worst = worst.max(spam_defects(&spam));
        cases += 1;
        if mutation {
            // Inflating one measurement operator breaks completeness.
            let mut sum = DMatrix::<Complex64>::zeros(dim, dim);
            for i in 0..obs {
                let k = if i == 0 {
                    spam.k_o(i).map(|z| z * 1.001)
                } else {
                    spam.k_o(i).clone()
                };
                sum += k.adjoint() * k;
            }
            worst_mutated = worst_mutated.max(max_dev_from_identity(&sum));
        }
    }
    let result = CheckResult::new("quantum_spam", cases, 1e-10, worst);
    Ok(if mutation { result.with_mutation(worst_mutated) } else { result })
}

fn quantum_balance(rng: &mut RandomStream, mutation: bool) -> Result<CheckResult, CliError> {
    let mut worst: f64 = 0.0;
    let mut worst_mutated: f64 = 0.0;
    let mut cases = 0;
    let mut attempts = 0;
    while cases < 150 && attempts < 40_000 {
        attempts += 1;
        let dim = [2usize, 4][rng.below(2)];
        let divisors: Vec<usize> = (1..=dim).filter(|d| dim.is_multiple_of(*d)).collect();
        let obs = divisors[rng.below(divisors.len())];
        let basis = random_unitary(dim, rng);
        let spam = match typical_spam_builder(&basis, rng.below(obs), obs) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let energy = EnergyTable::new((0..dim).map(|_| 2.0 * rng.uniform() - 1.0).collect())
            .expect("finite");
        let sigma = 0.2 + 0.5 * rng.uniform();
        let ham = DiagonalHamiltonian::new(energy, sigma)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let driver = random_driver(obs, rng);
        let beta = InverseTemperature::new(0.2 + 1.3 * rng.uniform()).expect("positive");
        let traj = random_trajectory(1 + rng.below(3), obs, rng);
        if !well_conditioned(&traj, &driver, beta, sigma) {
            continue;
        }
        let Some(v) = quantum_balance_check(&traj, &ham, &spam, &driver, beta)
            .map_err(|e| CliError::Internal(e.to_string()))?
        else {
            continue;
        };
        worst = worst.max(v);
        cases += 1;
        if mutation && cases % 3 == 0 {
            worst_mutated =
                worst_mutated.max(shift_free_gap(&traj, &ham, &spam, &driver, beta)?);
        }
    }
    let result = CheckResult::new("quantum_balance", cases, 1e-10, worst);
    Ok(if mutation { result.with_mutation(worst_mutated) } else { result })
}

/// Pairwise operator gap when the decision weights skip the bias shift
/// of the oldest energy, which the balance identity requires.
fn shift_free_gap(
    traj: &Trajectory,
    ham: &DiagonalHamiltonian,
    spam: &QuantumSpamModel,
    driver: &StochasticKernel,
    beta: InverseTemperature,
) -> Result<f64, CliError> {
    let b = beta.value();
    let forward = trajectory_kraus(traj, ham, spam, driver, beta, false)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let backward = trajectory_kraus(&traj.reversed(), ham, spam, driver, beta, false)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    if forward.vanished || backward.vanished {
        return Ok(0.0);
    }
    let lhs_scale = (-0.5 * b * traj.energy(0)).exp();
    let rhs_scale = (-0.5 * b * traj.energy(traj.rounds())).exp();
    let lhs = forward.matrix.map(|z| z * lhs_scale);
    let rhs = backward.matrix.map(|z| z * rhs_scale).adjoint();
    Ok(max_entry_gap(&lhs, &rhs))
}

type Probe = (&'static str, Box<dyn Fn(f64) -> f64>);

fn gaussian_identity(mutation: bool) -> Result<CheckResult, CliError> {
    let probes: Vec<Probe> = vec![
        ("constant", Box::new(|_| 1.0)),
        ("linear", Box::new(|w| w)),
        ("quadratic", Box::new(|w| w * w)),
        ("oscillating", Box::new(f64::sin)),
    ];
    let mut worst: f64 = 0.0;
    let mut worst_mutated: f64 = 0.0;
    let mut cases = 0;
    for e_value in [-0.5, 0.0, 0.7] {
        for beta in [0.5, 1.0] {
            let beta = InverseTemperature::new(beta).expect("positive");
            for sigma in [0.2, 0.5] {
                for (_, f) in &probes {
                    let gap = gaussian_identity_check(e_value, beta, sigma, f)
                        .map_err(|e| CliError::Internal(e.to_string()))?;
                    worst = worst.max(gap);
                    cases += 1;
                }
                if mutation {
                    worst_mutated =
                        worst_mutated.max(discount_free_gap(e_value, beta, sigma)?);
                }
            }
        }
    }
    let result = CheckResult::new("gaussian_identity", cases, 1e-8, worst);
    Ok(if mutation { result.with_mutation(worst_mutated) } else { result })
}

/// Identity gap when the Gaussian bias discount is left out entirely.
fn discount_free_gap(
    e_value: f64,
    beta: InverseTemperature,
    sigma: f64,
) -> Result<f64, CliError> {
    let quad = GaussHermite::new(48).map_err(|e| CliError::Internal(e.to_string()))?;
    let b = beta.value();
    let f = |w: f64| w * w;
    let lhs = quad.gaussian_expectation(e_value, sigma, |w| (-b * e_value).exp() * f(w));
    let shift = b * sigma * sigma;
    let rhs = quad.gaussian_expectation(e_value, sigma, |w| (-b * w).exp() * f(w + shift));
    Ok((lhs - rhs).abs())
}
