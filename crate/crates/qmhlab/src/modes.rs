//! Mode runners: seeded chain orchestration and artifact writing.
//!
//! Chains are embarrassingly parallel. Every chain draws from its own
//! derived random stream, so results are independent of how many
//! worker threads actually ran, and re-running a configuration
//! reproduces its trace files byte for byte.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::json;

use qmhlab_core::classical::{build_pm_kernel, chain_retention, mh_step, MhModel};
use qmhlab_core::diagnostics::{
    coarse_retention_from_trace, epsilon_max_estimate, error_bound_denominator, n_mix_bound,
    minimized_t_mix, sigma_opt, t_mix, CoarseRetention, CostModelInputs, EpsilonMaxReport,
    TraceProvenance,
};
use qmhlab_core::halting::{
    analytic_s, halting_table, r_mn, simulate_halting, HaltingParams,
};
use qmhlab_core::imprecise::{
    estimators, imh_step, thermal_energy_stats, thermal_observable_stats, ImpreciseConfig,
    SpamMhModel, UpdateRecord,
};
use qmhlab_core::model::retention_rate;
use qmhlab_core::quantum::{qmh_step, DiagonalHamiltonian, QuantumState};
use qmhlab_core::rng::RandomStream;

use crate::artifacts::{csv_preamble, Session, CODE_VERSION};
use crate::config::{self, Experiment, Mode};
use crate::CliError;

/// Worker cap: `QMHLAB_THREADS` when set, else the machine's
/// parallelism.
fn worker_cap() -> usize {
    std::env::var("QMHLAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Runs `job` once per chain index on a capped worker pool, returning
/// results in chain order.
fn run_chain_workers<T: Send>(
    chains: u64,
    job: impl Fn(u64) -> Result<T, CliError> + Sync,
) -> Result<Vec<T>, CliError> {
    let n = chains as usize;
    let workers = worker_cap().min(n).max(1);
    if workers == 1 {
        return (0..chains).map(job).collect();
    }
    let next = AtomicU64::new(0);
    let slots: Vec<Mutex<Option<Result<T, CliError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let c = next.fetch_add(1, Ordering::Relaxed);
                if c >= chains {
                    break;
                }
                let result = job(c);
                *slots[c as usize].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker finished"))
        .collect()
}

fn mean_and_batch_se(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let batches = values.len().min(100);
    let batch = values.len() / batches;
    let used = batch * batches;
    let mut means = Vec::with_capacity(batches);
    for k in 0..batches {
        means.push(values[k * batch..(k + 1) * batch].iter().sum::<f64>() / batch as f64);
    }
    let mean = values[..used].iter().sum::<f64>() / used as f64;
    if batches < 2 {
        return (mean, f64::NAN);
    }
    let bm = means.iter().sum::<f64>() / batches as f64;
    let var =
        means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>() / (batches as f64 - 1.0);
    (mean, (var / batches as f64).sqrt())
}

/// One trace line of a delayed-rejection run. `n` is the round at
/// which the update halted; the trajectory lists `(label, energy)`
/// pairs oldest first. The hidden-state fields appear only in oracle
/// mode, `state_fidelity` only for quantum chains.
#[derive(Serialize)]
struct TraceRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    chain: Option<u64>,
    step: u64,
    n: usize,
    truncated: bool,
    trajectory: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    state: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    state_fidelity: Option<f64>,
}

fn jsonl_meta(exp: &Experiment, kind: &str) -> String {
    let cfg = &exp.config;
    let meta = json!({
        "meta": {
            "format": "qmhlab-trajectory",
            "kind": kind,
            "config_hash": exp.hash,
            "code_version": CODE_VERSION,
            "seed": cfg.seed,
            "chains": cfg.chains(),
            "steps": cfg.steps,
            "burn_in": cfg.burn_in(),
            "oracle_mode": cfg.oracle_mode,
        }
    });
    format!("{meta}\n")
}

pub fn dispatch(exp: &Experiment, session: &mut Session) -> Result<(), CliError> {
    match exp.config.mode {
        Mode::Classical => run_classical(exp, session),
        Mode::Imprecise => run_imprecise(exp, session),
        Mode::Quantum => run_quantum(exp, session),
        Mode::Halting => run_halting(exp, session),
        Mode::Cost => run_cost(exp, session),
        Mode::Verify => unreachable!("verify runs through the verification suite"),
    }
}

fn observable_scores(exp: &Experiment, obs_size: usize) -> Vec<f64> {
    exp.config
        .observable
        .clone()
        .unwrap_or_else(|| (0..obs_size).map(|i| i as f64).collect())
}

fn run_classical(exp: &Experiment, session: &mut Session) -> Result<(), CliError> {
    let cfg = &exp.config;
    let spec = cfg.model.as_ref().expect("validated");
    let (space, energy, beta) = config::build_model_parts(spec)?;
    let kernels = config::build_kernel_cycle(cfg.kernel.as_ref().expect("validated"), space.size())?;
    let models: Vec<MhModel> = kernels
        .into_iter()
        .map(|driver| MhModel::new(space.clone(), energy.clone(), beta, driver))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::config("kernel", e.to_string()))?;

    let chains = cfg.chains();
    let steps = cfg.steps.expect("validated");
    let burn_in = cfg.burn_in();
    let start = cfg.start_state();
    let with_chain_col = chains > 1;

    struct ChainOut {
        part: PathBuf,
        accepted: u64,
        visits: Vec<u64>,
        energies: Vec<f64>,
    }

    let parts: Vec<PathBuf> = (0..chains)
        .map(|c| session.register(&format!("trace.csv.part{c}")))
        .collect();
    let models_ref = &models;
    let energy_ref = &energy;
    let parts_ref = &parts;
    let outs = run_chain_workers(chains, |c| {
        let mut rng = RandomStream::derive(cfg.seed, c, "classical");
        let mut state = start;
        let mut lines = String::new();
        let mut accepted = 0u64;
        let mut visits = vec![0u64; space.size()];
        let mut energies = Vec::with_capacity(steps as usize);
        for t in 0..burn_in + steps {
            let model = &models_ref[(t % models_ref.len() as u64) as usize];
            let out = mh_step(model, state, &mut rng)?;
            state = out.next;
            if t < burn_in {
                continue;
            }
            let step = t - burn_in;
            if with_chain_col {
                lines.push_str(&format!(
                    "{c},{step},{state},{},{}\n",
                    out.proposal, out.accepted as u8
                ));
            } else {
                lines.push_str(&format!(
                    "{step},{state},{},{}\n",
                    out.proposal, out.accepted as u8
                ));
            }
            accepted += out.accepted as u64;
            visits[state] += 1;
            energies.push(energy_ref.get(state));
        }
        let part = parts_ref[c as usize].clone();
        std::fs::write(&part, lines)?;
        Ok(ChainOut {
            part,
            accepted,
            visits,
            energies,
        })
    })?;

    let mut header = csv_preamble("classical trace", &session.hash, cfg.seed, chains);
    if with_chain_col {
        header.push_str("chain,step,state,proposal,accepted\n");
    } else {
        header.push_str("step,state,proposal,accepted\n");
    }
    session.write_bytes("trace.csv", header.as_bytes())?;
    let part_paths: Vec<PathBuf> = outs.iter().map(|o| o.part.clone()).collect();
    session.merge_parts("trace.csv", &part_paths)?;

    let total = (chains * steps) as f64;
    let accepted: u64 = outs.iter().map(|o| o.accepted).sum();
    let mut visits = vec![0u64; space.size()];
    for o in &outs {
        for (a, v) in o.visits.iter().enumerate() {
            visits[a] += v;
        }
    }
    let series: Vec<f64> = outs.iter().flat_map(|o| o.energies.iter().copied()).collect();
    let (mean_energy, se_energy) = mean_and_batch_se(&series);
    let thermal = models[0]
        .thermal()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let thermal_mean: f64 = (0..space.size())
        .map(|a| thermal.prob(a) * energy.get(a))
        .sum();

    let (retention, retention_kind) = if models.len() == 1 {
        (
            chain_retention(&models[0]).map_err(|e| CliError::Internal(e.to_string()))?,
            "single",
        )
    } else {
        let mut composed = build_pm_kernel(&models[0])
            .map_err(|e| CliError::Internal(e.to_string()))?;
        for model in &models[1..] {
            let next = build_pm_kernel(model).map_err(|e| CliError::Internal(e.to_string()))?;
            composed = composed
                .compose(&next)
                .map_err(|e| CliError::Internal(e.to_string()))?;
        }
        (retention_rate(&composed), "cycle_composed")
    };

    session.write_json(
        "summary.json",
        &json!({
            "format": "qmhlab-summary",
            "mode": "classical",
            "config_hash": session.hash,
            "code_version": CODE_VERSION,
            "seed": cfg.seed,
            "chains": chains,
            "steps": steps,
            "burn_in": cfg.burn_in(),
            "acceptance_rate": accepted as f64 / total,
            "estimator": {
                "mean_energy": mean_energy,
                "se_energy": se_energy,
                "count": series.len(),
            },
            "thermal_reference": { "mean_energy": thermal_mean },
            "state_histogram": visits,
            "retention": { "value": retention, "kind": retention_kind },
        }),
    )?;
    Ok(())
}

struct DelayedChains {
    per_chain: Vec<Vec<UpdateRecord>>,
    obs_size: usize,
    scores: Vec<f64>,
    n_max: usize,
}

/// Shared summary content of the delayed-rejection modes: estimator
/// means with both independence-assuming and batch standard errors,
/// truncation rate, and the halting histogram.
fn delayed_summary(exp: &Experiment, data: &DelayedChains) -> Result<serde_json::Value, CliError> {
    let all: Vec<UpdateRecord> = data
        .per_chain
        .iter()
        .flat_map(|r| r.iter().cloned())
        .collect();
    let report =
        estimators(&all, &data.scores).map_err(|e| CliError::Internal(e.to_string()))?;
    let omega_series: Vec<f64> = all.iter().map(|r| r.trajectory.energy(0)).collect();
    let f_series: Vec<f64> = all
        .iter()
        .map(|r| data.scores[r.trajectory.observation(1)])
        .collect();
    let (_, se_omega_batched) = mean_and_batch_se(&omega_series);
    let (_, se_f_batched) = mean_and_batch_se(&f_series);
    let truncated = all.iter().filter(|r| r.truncated).count();
    let mut histogram = vec![0u64; data.n_max];
    for r in &all {
        if r.halted_at >= 1 && r.halted_at <= data.n_max {
            histogram[r.halted_at - 1] += 1;
        }
    }
    Ok(json!({
        "format": "qmhlab-summary",
        "mode": exp.config.mode.name(),
        "config_hash": exp.hash,
        "code_version": CODE_VERSION,
        "seed": exp.config.seed,
        "chains": exp.config.chains(),
        "steps": exp.config.steps,
        "burn_in": exp.config.burn_in(),
        "sigma": exp.config.sigma,
        "n_max": data.n_max,
        "estimator": {
            "mean_f": report.mean_f,
            "se_f": report.se_f,
            "se_f_batched": se_f_batched,
            "mean_omega": report.mean_omega,
            "se_omega": report.se_omega,
            "se_omega_batched": se_omega_batched,
            "count": report.count,
        },
        "eps_tilde": truncated as f64 / all.len() as f64,
        "truncated_count": truncated,
        "halting_histogram": histogram,
        "halting_histogram_first_round": 1,
    }))
}

fn run_imprecise_chains(
    exp: &Experiment,
    session: &mut Session,
    purpose: &'static str,
) -> Result<DelayedChains, CliError> {
    let cfg = &exp.config;
    let spec = cfg.model.as_ref().expect("validated");
    let (space, energy, beta) = config::build_model_parts(spec)?;
    let spam = config::build_classical_spam(cfg.spam.as_ref().expect("validated"), space.size())?;
    let obs_size = spam.obs_size();
    let driver = config::build_driver(cfg, obs_size)?;
    let sigma = cfg.sigma.expect("validated");
    let n_max = cfg.n_max.expect("validated");
    let model = SpamMhModel::new(space, energy, spam)
        .map_err(|e| CliError::config("spam", e.to_string()))?;
    let icfg = ImpreciseConfig::new(sigma, n_max, driver, beta)
        .map_err(|e| CliError::config("sigma", e.to_string()))?;

    let chains = cfg.chains();
    let steps = cfg.steps.expect("validated");
    let burn_in = cfg.burn_in();
    let start = cfg.start_state();
    let oracle = cfg.oracle_mode;
    let with_chain = chains > 1;

    let parts: Vec<PathBuf> = (0..chains)
        .map(|c| session.register(&format!("trace.jsonl.part{c}")))
        .collect();
    let model_ref = &model;
    let icfg_ref = &icfg;
    let parts_ref = &parts;
    let per_chain = run_chain_workers(chains, |c| {
        let mut rng = RandomStream::derive(cfg.seed, c, purpose);
        let mut state = start;
        let mut lines = String::new();
        let mut records = Vec::with_capacity(steps as usize);
        for t in 0..burn_in + steps {
            let rec = imh_step(model_ref, icfg_ref, state, &mut rng)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            state = rec.final_state;
            if t < burn_in {
                continue;
            }
            let row = TraceRecord {
                chain: with_chain.then_some(c),
                step: t - burn_in,
                n: rec.halted_at,
                truncated: rec.truncated,
                trajectory: rec.trajectory.entries().to_vec(),
                state: oracle.then_some(rec.final_state),
                state_fidelity: None,
            };
            lines.push_str(&serde_json::to_string(&row).expect("record serializes"));
            lines.push('\n');
            records.push(rec);
        }
        std::fs::write(&parts_ref[c as usize], lines)?;
        Ok(records)
    })?;

    session.write_bytes("trace.jsonl", jsonl_meta(exp, purpose).as_bytes())?;
    session.merge_parts("trace.jsonl", &parts)?;
    Ok(DelayedChains {
        per_chain,
        obs_size,
        scores: observable_scores(exp, obs_size),
        n_max,
    })
}

fn run_imprecise(exp: &Experiment, session: &mut Session) -> Result<(), CliError> {
    let data = run_imprecise_chains(exp, session, "imprecise")?;
    let mut summary = delayed_summary(exp, &data)?;

    let cfg = &exp.config;
    let spec = cfg.model.as_ref().expect("validated");
    let (space, energy, beta) = config::build_model_parts(spec)?;
    let spam = config::build_classical_spam(cfg.spam.as_ref().expect("validated"), space.size())?;
    let model = SpamMhModel::new(space, energy, spam)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let (ref_f, ref_f_var) = thermal_observable_stats(&model, beta, &data.scores)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let (ref_omega, ref_omega_var) =
        thermal_energy_stats(&model, beta, cfg.sigma.expect("validated"))
            .map_err(|e| CliError::Internal(e.to_string()))?;
    summary["thermal_reference"] = json!({
        "mean_f": ref_f,
        "var_f": ref_f_var,
        "mean_omega": ref_omega,
        "var_omega": ref_omega_var,
    });
    session.write_json("summary.json", &summary)?;
    Ok(())
}

fn run_quantum(exp: &Experiment, session: &mut Session) -> Result<(), CliError> {
    let cfg = &exp.config;
    let spec = cfg.model.as_ref().expect("validated");
    let (space, energy, beta) = config::build_model_parts(spec)?;
    let dim = space.size();
    let spam = config::build_quantum_spam(cfg.spam.as_ref().expect("validated"), dim)?;
    let obs_size = spam.obs_size();
    let driver = config::build_driver(cfg, obs_size)?;
    let sigma = cfg.sigma.expect("validated");
    let n_max = cfg.n_max.expect("validated");
    let ham = DiagonalHamiltonian::new(energy, sigma)
        .map_err(|e| CliError::config("sigma", e.to_string()))?;
    let icfg = ImpreciseConfig::new(sigma, n_max, driver, beta)
        .map_err(|e| CliError::config("sigma", e.to_string()))?;

    let chains = cfg.chains();
    let steps = cfg.steps.expect("validated");
    let burn_in = cfg.burn_in();
    let start = cfg.start_state();
    let oracle = cfg.oracle_mode;
    let with_chain = chains > 1;

    let parts: Vec<PathBuf> = (0..chains)
        .map(|c| session.register(&format!("trace.jsonl.part{c}")))
        .collect();
    let ham_ref = &ham;
    let spam_ref = &spam;
    let icfg_ref = &icfg;
    let parts_ref = &parts;
    let per_chain = run_chain_workers(chains, |c| {
        let mut rng = RandomStream::derive(cfg.seed, c, "quantum");
        let mut psi = QuantumState::basis_state(dim, start)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let mut lines = String::new();
        let mut records = Vec::with_capacity(steps as usize);
        for t in 0..burn_in + steps {
            let (rec, next) = qmh_step(&psi, ham_ref, spam_ref, icfg_ref, &mut rng)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            psi = next;
            if t < burn_in {
                continue;
            }
            let row = TraceRecord {
                chain: with_chain.then_some(c),
                step: t - burn_in,
                n: rec.halted_at,
                truncated: rec.truncated,
                trajectory: rec.trajectory.entries().to_vec(),
                state: oracle.then_some(rec.final_state),
                state_fidelity: oracle.then(|| psi.population(rec.final_state)),
            };
            lines.push_str(&serde_json::to_string(&row).expect("record serializes"));
            lines.push('\n');
            records.push(rec);
        }
        std::fs::write(&parts_ref[c as usize], lines)?;
        Ok(records)
    })?;

    session.write_bytes("trace.jsonl", jsonl_meta(exp, "quantum").as_bytes())?;
    session.merge_parts("trace.jsonl", &parts)?;

    let data = DelayedChains {
        per_chain,
        obs_size,
        scores: observable_scores(exp, obs_size),
        n_max,
    };
    let mut summary = delayed_summary(exp, &data)?;
    let rho = ham
        .thermal(beta)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let ref_omega = rho
        .expectation(&ham.operator())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let f_op = spam
        .observable_operator(&data.scores)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let ref_f = rho
        .expectation(&f_op)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    summary["thermal_reference"] = json!({
        "mean_f": ref_f,
        "mean_omega": ref_omega,
    });
    session.write_json("summary.json", &summary)?;
    Ok(())
}

fn run_halting(exp: &Experiment, session: &mut Session) -> Result<(), CliError> {
    let cfg = &exp.config;
    let delta = config::effective_delta(cfg)?;
    let n_max = cfg.n_max.expect("validated");
    let runs = cfg.runs.expect("validated");
    let n_limit = cfg.n_limit.unwrap_or(20);
    let params = HaltingParams::new(delta, n_max)
        .map_err(|e| CliError::config("delta", e.to_string()))?;
    let table = halting_table(params, n_limit)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let mut rng = RandomStream::derive(cfg.seed, 0, "halting");
    let empirical = simulate_halting(params, runs, &mut rng)
        .map_err(|e| CliError::Internal(e.to_string()))?;

    let mut csv = csv_preamble("halting table", &session.hash, cfg.seed, 1);
    csv.push_str(&format!("# delta={delta} n_max={n_max} runs={runs}\n"));
    csv.push_str("n,p_halt,t_n,s_n,empirical_p,se\n");
    for n in 1..=n_limit {
        let t_n = r_mn(params, 1, n - 1).map_err(|e| CliError::Internal(e.to_string()))?;
        let s_n = analytic_s(params, n).map_err(|e| CliError::Internal(e.to_string()))?;
        csv.push_str(&format!(
            "{n},{},{t_n},{s_n},{},{}\n",
            table.p(n),
            empirical.p_hat(n),
            empirical.se(n)
        ));
    }
    session.write_bytes("halting.csv", csv.as_bytes())?;

    session.write_json(
        "summary.json",
        &json!({
            "format": "qmhlab-summary",
            "mode": "halting",
            "config_hash": session.hash,
            "code_version": CODE_VERSION,
            "seed": cfg.seed,
            "delta": delta,
            "n_max": n_max,
            "n_limit": n_limit,
            "runs": runs,
            "overflow_rate": empirical.overflow_rate(),
            "analytic_tail_beyond_n_limit": table.tail(n_limit),
            "expected_rounds_capped": table.expected_capped(n_limit),
        }),
    )?;
    Ok(())
}

fn run_cost(exp: &Experiment, session: &mut Session) -> Result<(), CliError> {
    let data = run_imprecise_chains(exp, session, "imprecise")?;
    let summary = delayed_summary(exp, &data)?;
    session.write_json("summary.json", &summary)?;

    let cfg = &exp.config;
    let beta = cfg.model.as_ref().expect("validated").beta;
    let sigma = cfg.sigma.expect("validated");
    let sigma0 = cfg.sigma0.unwrap_or(0.0);
    let mut flags: Vec<String> = Vec::new();

    let total: usize = data.per_chain.iter().map(|r| r.len()).sum();
    let truncated: usize = data
        .per_chain
        .iter()
        .flat_map(|r| r.iter())
        .filter(|r| r.truncated)
        .count();
    let eps_tilde = truncated as f64 / total as f64;

    let mut retention: Option<CoarseRetention> = None;
    for records in &data.per_chain {
        let labels: Vec<usize> = records
            .iter()
            .map(|r| r.trajectory.observation(r.halted_at))
            .collect();
        let coarse = coarse_retention_from_trace(&labels, data.obs_size, TraceProvenance::Classical)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        if retention
            .as_ref()
            .map(|r| coarse.omega_bar > r.omega_bar)
            .unwrap_or(true)
        {
            retention = Some(coarse);
        }
    }
    let retention = retention.expect("at least one chain");
    if !retention.excluded_classes.is_empty() {
        flags.push(format!(
            "unobserved observation classes excluded from retention estimate: {:?}",
            retention.excluded_classes
        ));
    }

    let mut eps_report: Option<EpsilonMaxReport> = None;
    for records in &data.per_chain {
        let report =
            epsilon_max_estimate(records).map_err(|e| CliError::Internal(e.to_string()))?;
        if eps_report
            .as_ref()
            .map(|r| {
                report.eps_max > r.eps_max
                    || (report.eps_max == r.eps_max && report.upper_bound > r.upper_bound)
            })
            .unwrap_or(true)
        {
            eps_report = Some(report);
        }
    }
    let eps_report = eps_report.expect("at least one chain");

    let eps_for_model = if eps_tilde > 0.0 {
        eps_tilde
    } else {
        flags.push("no truncations observed; model formulas use the interval upper bound".into());
        eps_report.upper_bound.clamp(1e-300, 0.999_999)
    };

    let omega_bar = retention.omega_bar;
    let n_mix = if omega_bar < 1.0 {
        Some(n_mix_bound(omega_bar).map_err(|e| CliError::Internal(e.to_string()))?)
    } else {
        flags.push("retention estimate saturated at 1; mixing bounds diverge".into());
        None
    };
    let spread_choice =
        sigma_opt(beta, eps_for_model).map_err(|e| CliError::Internal(e.to_string()))?;
    let t_mix_value = if omega_bar < 1.0 && sigma > 0.0 {
        let inputs = CostModelInputs::new(omega_bar, eps_for_model, beta, sigma, sigma0)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        Some(t_mix(&inputs))
    } else {
        if sigma == 0.0 {
            flags.push("zero measurement spread is outside the cost model".into());
        }
        None
    };
    let t_mix_optimal = if omega_bar < 1.0 {
        Some(
            minimized_t_mix(omega_bar, eps_for_model, beta, sigma0)
                .map_err(|e| CliError::Internal(e.to_string()))?,
        )
    } else {
        None
    };
    let (denominator, vacuous) = error_bound_denominator(omega_bar, eps_report.upper_bound);
    if vacuous {
        flags.push("stationary error bound is vacuous: retention plus worst truncation reaches 1".into());
    }

    session.write_json(
        "report.json",
        &json!({
            "format": "qmhlab-cost-report",
            "config_hash": session.hash,
            "code_version": CODE_VERSION,
            "omega_bar": omega_bar,
            "eps_tilde": eps_tilde,
            "eps_max": eps_report.eps_max,
            "n_mix_bound": n_mix,
            "t_mix": t_mix_value,
            "t_mix_at_sigma_opt": t_mix_optimal,
            "sigma_opt": { "sigma": spread_choice.sigma, "t_max": spread_choice.t_max },
            "flags": flags,
            "sources": {
                "omega_bar": format!(
                    "measured: observation-level transition counts ({})",
                    retention.bias_label()
                ),
                "eps_tilde": "measured: truncation frequency",
                "eps_max": "estimate: worst conditioned truncation frequency (biased proxy)",
                "n_mix_bound": "model",
                "t_mix": "model",
                "t_mix_at_sigma_opt": "model",
                "sigma_opt": "model",
            },
            "metadata": {
                "omega_bins": eps_report.omega_bins,
                "eps_max_upper_bound": eps_report.upper_bound,
                "eps_max_argmax_group": eps_report.argmax_group,
                "eps_max_groups": eps_report.group_count,
                "eps_max_samples": eps_report.samples,
                "retention_samples": retention.samples,
                "error_bound_denominator": denominator,
                "beta": beta,
                "sigma": sigma,
                "sigma0": sigma0,
            },
        }),
    )?;
    Ok(())
}
