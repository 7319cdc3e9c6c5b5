//! Experiment configuration: JSON schema, validation, and the
//! canonical content hash that stamps every output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qmhlab_core::imprecise::ClassicalSpamModel;
use qmhlab_core::model::{
    Distribution, EnergyTable, InverseTemperature, StateSpace, StochasticKernel,
};
use qmhlab_core::quantum::{CMatrix, QuantumSpamModel};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classical,
    Imprecise,
    Quantum,
    Halting,
    Verify,
    Cost,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "classical" => Ok(Mode::Classical),
            "imprecise" => Ok(Mode::Imprecise),
            "quantum" => Ok(Mode::Quantum),
            "halting" => Ok(Mode::Halting),
            "verify" => Ok(Mode::Verify),
            "cost" => Ok(Mode::Cost),
            other => Err(CliError::config(
                "mode",
                format!("unknown mode `{other}`"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Classical => "classical",
            Mode::Imprecise => "imprecise",
            Mode::Quantum => "quantum",
            Mode::Halting => "halting",
            Mode::Verify => "verify",
            Mode::Cost => "cost",
        }
    }
}

/// State space, energies, and inverse temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub energies: Vec<f64>,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

/// Proposal kernel: inline row table, a cyclic list of tables, or a
/// file holding either.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSpec {
    Rows(Vec<Vec<f64>>),
    Cycle { cycle: Vec<Vec<Vec<f64>>> },
    Path { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizePair {
    pub states: usize,
    pub obs: usize,
}

/// Measurement/control channel pair: classical named families, explicit
/// classical tables, explicit quantum matrices (entries as `[re, im]`),
/// or a file holding one of those.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpamSpec {
    DirectAccess { direct_access: usize },
    Oblivious { oblivious: SizePair },
    MeasureReprepare { measure_reprepare: Vec<Vec<f64>> },
    Tables { observe: Vec<Vec<f64>>, control: Vec<Vec<f64>> },
    Quantum { k_o: Vec<ComplexMatrixSpec>, u_c: Vec<ComplexMatrixSpec> },
    Path { path: String },
}

pub type ComplexMatrixSpec = Vec<Vec<[f64; 2]>>;

/// One experiment, archivable as a single JSON document. `seed` is
/// mandatory: runs never draw entropy from the environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spam: Option<SpamSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chains: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_state: Option<usize>,
    /// Score per observation label for the label estimator; defaults to
    /// the label index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub oracle_mode: bool,
    /// Halting-law spread parameter; derived from `model.beta` and
    /// `sigma` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<u64>,
    /// Depth of the analytic halting table (default 20).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_limit: Option<usize>,
    /// Verification checks to run; absent means the full suite, an
    /// empty list means none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<String>>,
    /// Re-run each verification check with a deliberately broken
    /// variant and require the breakage to be detected.
    #[serde(default)]
    pub mutation: bool,
    /// Baseline halting spread for the sampling-cost model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config("config", format!("parse error: {e}")))
    }

    /// Replaces file references by their contents so the canonical hash
    /// covers what was actually run, not where it came from. `base` is
    /// the directory referenced paths resolve against.
    pub fn resolve(mut self, base: &Path) -> Result<Self, CliError> {
        if let Some(KernelSpec::Path { path }) = &self.kernel {
            let loaded: KernelSpec = load_json(base, path, "kernel.path")?;
            if matches!(loaded, KernelSpec::Path { .. }) {
                return Err(CliError::config(
                    "kernel.path",
                    "kernel files must hold tables, not further references".into(),
                ));
            }
            self.kernel = Some(loaded);
        }
        if let Some(SpamSpec::Path { path }) = &self.spam {
            let loaded: SpamSpec = load_json(base, path, "spam.path")?;
            if matches!(loaded, SpamSpec::Path { .. }) {
                return Err(CliError::config(
                    "spam.path",
                    "channel files must hold tables, not further references".into(),
                ));
            }
            self.spam = Some(loaded);
        }
        Ok(self)
    }

    /// Hex SHA-256 of the canonical serialized configuration, with the
    /// output directory blanked: two runs of the same experiment share
    /// a hash regardless of where their artifacts land.
    pub fn canonical_hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.output_dir = None;
        let bytes = serde_json::to_vec(&hashed).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex(&hasher.finalize())
    }

    pub fn chains(&self) -> u64 {
        self.chains.unwrap_or(1)
    }

    pub fn burn_in(&self) -> u64 {
        self.burn_in.unwrap_or(0)
    }

    pub fn start_state(&self) -> usize {
        self.start_state.unwrap_or(0)
    }
}

fn load_json<T: for<'de> Deserialize<'de>>(
    base: &Path,
    rel: &str,
    field: &str,
) -> Result<T, CliError> {
    let full = base.join(rel);
    let text = std::fs::read_to_string(&full).map_err(|e| {
        CliError::config(field, format!("cannot read {}: {e}", full.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(field, format!("parse error in {rel}: {e}")))
}

pub fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn require<'a, T>(opt: &'a Option<T>, field: &str) -> Result<&'a T, CliError> {
    opt.as_ref()
        .ok_or_else(|| CliError::config(field, "required for this mode".into()))
}

/// A validated configuration with core-library objects built from it.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self, CliError> {
        validate(&config)?;
        let hash = config.canonical_hash();
        Ok(Self { config, hash })
    }
}

fn positive(value: f64, field: &str) -> Result<f64, CliError> {
    if !value.is_finite() || value <= 0.0 {
        return Err(CliError::config(
            field,
            format!("{value} is not a positive finite number"),
        ));
    }
    Ok(value)
}

fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.chains() == 0 {
        return Err(CliError::config("chains", "must be at least 1".into()));
    }
    if matches!(cfg.steps, Some(0)) {
        return Err(CliError::config("steps", "must be at least 1".into()));
    }
    if matches!(cfg.runs, Some(0)) {
        return Err(CliError::config("runs", "must be at least 1".into()));
    }
    match cfg.mode {
        Mode::Classical => {
            let model = require(&cfg.model, "model")?;
            build_model_parts(model)?;
            let kernel = require(&cfg.kernel, "kernel")?;
            build_kernel_cycle(kernel, model.energies.len())?;
            require(&cfg.steps, "steps")?;
        }
        Mode::Imprecise | Mode::Cost => {
            let model = require(&cfg.model, "model")?;
            build_model_parts(model)?;
            let spam = require(&cfg.spam, "spam")?;
            let spam = build_classical_spam(spam, model.energies.len())?;
            build_driver(cfg, spam.obs_size())?;
            let sigma = *require(&cfg.sigma, "sigma")?;
            if !sigma.is_finite() || sigma < 0.0 {
                return Err(CliError::config(
                    "sigma",
                    format!("{sigma} is not a nonnegative spread"),
                ));
            }
            validate_cap(require(&cfg.n_max, "n_max")?)?;
            require(&cfg.steps, "steps")?;
            check_observable(cfg, spam.obs_size())?;
            check_start(cfg, model.energies.len())?;
            if let Some(s0) = cfg.sigma0 {
                if !s0.is_finite() || s0 < 0.0 {
                    return Err(CliError::config(
                        "sigma0",
                        format!("{s0} is not a nonnegative spread"),
                    ));
                }
            }
            if cfg.mode == Mode::Cost {
                let steps = *require(&cfg.steps, "steps")?;
                if steps < 1000 {
                    return Err(CliError::config(
                        "steps",
                        "cost diagnostics need at least 1000 updates per chain".into(),
                    ));
                }
            }
        }
        Mode::Quantum => {
            let model = require(&cfg.model, "model")?;
            build_model_parts(model)?;
            let spam = require(&cfg.spam, "spam")?;
            let spam = build_quantum_spam(spam, model.energies.len())?;
            build_driver(cfg, spam.obs_size())?;
            positive(*require(&cfg.sigma, "sigma")?, "sigma")?;
            validate_cap(require(&cfg.n_max, "n_max")?)?;
            require(&cfg.steps, "steps")?;
            check_observable(cfg, spam.obs_size())?;
            check_start(cfg, model.energies.len())?;
        }
        Mode::Halting => {
            effective_delta(cfg)?;
            let n_max = *require(&cfg.n_max, "n_max")?;
            validate_cap(&n_max)?;
            require(&cfg.runs, "runs")?;
            let n_limit = cfg.n_limit.unwrap_or(20);
            if n_limit == 0 || n_limit > n_max {
                return Err(CliError::config(
                    "n_limit",
                    format!("must be in 1..={n_max} (the simulation cap)"),
                ));
            }
        }
        Mode::Verify => {
            if let Some(checks) = &cfg.checks {
                for name in checks {
                    if !crate::verify::CHECK_NAMES.contains(&name.as_str()) {
                        return Err(CliError::config(
                            "checks",
                            format!(
                                "unknown check `{name}`; available: {}",
                                crate::verify::CHECK_NAMES.join(", ")
                            ),
                        ));
                    }
                }
            }
            if let Some(model) = &cfg.model {
                build_model_parts(model)?;
            }
        }
    }
    Ok(())
}

fn validate_cap(n_max: &usize) -> Result<(), CliError> {
    if *n_max == 0 {
        return Err(CliError::config("n_max", "must be at least 1".into()));
    }
    Ok(())
}

fn check_observable(cfg: &ExperimentConfig, obs_size: usize) -> Result<(), CliError> {
    if let Some(f) = &cfg.observable {
        if f.len() != obs_size {
            return Err(CliError::config(
                "observable",
                format!("has {} scores but the channel emits {obs_size} labels", f.len()),
            ));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(CliError::config("observable", "scores must be finite".into()));
        }
    }
    Ok(())
}

fn check_start(cfg: &ExperimentConfig, size: usize) -> Result<(), CliError> {
    let start = cfg.start_state();
    if start >= size {
        return Err(CliError::config(
            "start_state",
            format!("{start} out of range for {size} states"),
        ));
    }
    Ok(())
}

/// Halting spread: explicit `delta`, else (beta*sigma)^2 from the model.
pub fn effective_delta(cfg: &ExperimentConfig) -> Result<f64, CliError> {
    if let Some(delta) = cfg.delta {
        return positive(delta, "delta");
    }
    let (Some(model), Some(sigma)) = (&cfg.model, cfg.sigma) else {
        return Err(CliError::config(
            "delta",
            "required (or provide model.beta and sigma to derive it)".into(),
        ));
    };
    positive(model.beta * sigma * model.beta * sigma, "delta")
}

pub fn build_model_parts(
    spec: &ModelSpec,
) -> Result<(StateSpace, EnergyTable, InverseTemperature), CliError> {
    let energy = EnergyTable::new(spec.energies.clone())
        .map_err(|e| CliError::config("model.energies", e.to_string()))?;
    let beta = InverseTemperature::new(spec.beta)
        .map_err(|e| CliError::config("model.beta", e.to_string()))?;
    let space = match &spec.labels {
        Some(labels) => {
            if labels.len() != spec.energies.len() {
                return Err(CliError::config(
                    "model.labels",
                    format!(
                        "{} labels for {} energies",
                        labels.len(),
                        spec.energies.len()
                    ),
                ));
            }
            StateSpace::with_labels(labels.clone())
                .map_err(|e| CliError::config("model.labels", e.to_string()))?
        }
        None => StateSpace::new(spec.energies.len())
            .map_err(|e| CliError::config("model.energies", e.to_string()))?,
    };
    Ok((space, energy, beta))
}

fn rows_to_kernel(rows: &[Vec<f64>], size: usize, field: &str) -> Result<StochasticKernel, CliError> {
    if rows.len() != size {
        return Err(CliError::config(
            field,
            format!("{} rows for {size} states", rows.len()),
        ));
    }
    let dists = rows
        .iter()
        .map(|row| {
            if row.len() != size {
                return Err(CliError::config(
                    field,
                    format!("row of width {} in a {size}-state kernel", row.len()),
                ));
            }
            Distribution::new(row.clone()).map_err(|e| CliError::config(field, e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    StochasticKernel::from_rows(dists).map_err(|e| CliError::config(field, e.to_string()))
}

/// The single proposal driver over observation labels that the
/// delayed-rejection modes run; cyclic schedules are classical-only.
pub fn build_driver(cfg: &ExperimentConfig, obs_size: usize) -> Result<StochasticKernel, CliError> {
    let spec = require(&cfg.kernel, "kernel")?;
    match spec {
        KernelSpec::Rows(rows) => rows_to_kernel(rows, obs_size, "kernel"),
        KernelSpec::Cycle { .. } => Err(CliError::config(
            "kernel.cycle",
            "cyclic proposal schedules are supported in classical mode only".into(),
        )),
        KernelSpec::Path { .. } => Err(CliError::config(
            "kernel.path",
            "unresolved file reference".into(),
        )),
    }
}

/// The proposal kernels of one update cycle, in application order.
pub fn build_kernel_cycle(
    spec: &KernelSpec,
    size: usize,
) -> Result<Vec<StochasticKernel>, CliError> {
    match spec {
        KernelSpec::Rows(rows) => Ok(vec![rows_to_kernel(rows, size, "kernel")?]),
        KernelSpec::Cycle { cycle } => {
            if cycle.is_empty() {
                return Err(CliError::config("kernel.cycle", "must not be empty".into()));
            }
            cycle
                .iter()
                .map(|rows| rows_to_kernel(rows, size, "kernel.cycle"))
                .collect()
        }
        KernelSpec::Path { .. } => Err(CliError::config(
            "kernel.path",
            "unresolved file reference".into(),
        )),
    }
}

pub fn build_classical_spam(
    spec: &SpamSpec,
    state_size: usize,
) -> Result<ClassicalSpamModel, CliError> {
    let built = match spec {
        SpamSpec::DirectAccess { direct_access } => {
            if *direct_access != state_size {
                return Err(CliError::config(
                    "spam.direct_access",
                    format!("size {direct_access} does not match {state_size} states"),
                ));
            }
            ClassicalSpamModel::direct_access(state_size)
        }
        SpamSpec::Oblivious { oblivious } => {
            if oblivious.states != state_size {
                return Err(CliError::config(
                    "spam.oblivious.states",
                    format!("{} does not match {state_size} states", oblivious.states),
                ));
            }
            ClassicalSpamModel::oblivious(oblivious.states, oblivious.obs)
        }
        SpamSpec::MeasureReprepare { measure_reprepare } => {
            if measure_reprepare.len() != state_size {
                return Err(CliError::config(
                    "spam.measure_reprepare",
                    format!(
                        "{} rows for {state_size} states",
                        measure_reprepare.len()
                    ),
                ));
            }
            ClassicalSpamModel::measure_reprepare(measure_reprepare)
        }
        SpamSpec::Tables { observe, control } => {
            let obs_size = if state_size > 0 && !observe.is_empty() {
                observe[0].len() / state_size
            } else {
                0
            };
            let observe = observe
                .iter()
                .map(|row| Distribution::new(row.clone()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::config("spam.observe", e.to_string()))?;
            let control = control
                .iter()
                .map(|row| Distribution::new(row.clone()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::config("spam.control", e.to_string()))?;
            ClassicalSpamModel::new(state_size, obs_size, observe, control)
        }
        SpamSpec::Quantum { .. } => {
            return Err(CliError::config(
                "spam",
                "quantum matrices given where classical channels are needed".into(),
            ))
        }
        SpamSpec::Path { .. } => {
            return Err(CliError::config("spam.path", "unresolved file reference".into()))
        }
    };
    built.map_err(|e| CliError::config("spam", e.to_string()))
}

fn matrix_from_spec(spec: &ComplexMatrixSpec, field: &str) -> Result<CMatrix, CliError> {
    let rows = spec.len();
    if rows == 0 || spec.iter().any(|r| r.len() != rows) {
        return Err(CliError::config(field, "matrices must be square".into()));
    }
    Ok(CMatrix::from_fn(rows, rows, |i, j| {
        num_complex::Complex64::new(spec[i][j][0], spec[i][j][1])
    }))
}

pub fn build_quantum_spam(
    spec: &SpamSpec,
    dim: usize,
) -> Result<QuantumSpamModel, CliError> {
    let SpamSpec::Quantum { k_o, u_c } = spec else {
        return Err(CliError::config(
            "spam",
            "quantum mode needs k_o/u_c matrices".into(),
        ));
    };
    let k_o = k_o
        .iter()
        .map(|m| matrix_from_spec(m, "spam.k_o"))
        .collect::<Result<Vec<_>, _>>()?;
    let u_c = u_c
        .iter()
        .map(|m| matrix_from_spec(m, "spam.u_c"))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(m) = k_o.iter().chain(u_c.iter()).find(|m| m.nrows() != dim) {
        return Err(CliError::config(
            "spam",
            format!("{}x{} matrix for a dimension-{dim} model", m.nrows(), m.ncols()),
        ));
    }
    QuantumSpamModel::new(k_o, u_c).map_err(|e| CliError::config("spam", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(mode: &str) -> ExperimentConfig {
        let text = format!(
            r#"{{ "mode": "{mode}", "seed": 11, "model": {{ "energies": [0.0, 1.0], "beta": 1.0 }},
                 "kernel": [[0.5, 0.5], [0.5, 0.5]], "steps": 10 }}"#
        );
        serde_json::from_str(&text).unwrap()
    }

    #[test]
    fn hash_ignores_output_directory() {
        let mut a = minimal("classical");
        let mut b = minimal("classical");
        a.output_dir = Some(PathBuf::from("/tmp/here"));
        b.output_dir = Some(PathBuf::from("/somewhere/else"));
        assert_eq!(a.canonical_hash(), b.canonical_hash());
    }

    #[test]
    fn hash_tracks_every_semantic_field() {
        let base = minimal("classical");
        let mut seeded = base.clone();
        seeded.seed = 12;
        assert_ne!(base.canonical_hash(), seeded.canonical_hash());
        let mut warmer = base.clone();
        warmer.model.as_mut().unwrap().beta = 2.0;
        assert_ne!(base.canonical_hash(), warmer.canonical_hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(
            r#"{ "mode": "classical", "seed": 1, "stepz": 10 }"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{ "mode": "classical" }"#).is_err());
    }

    #[test]
    fn kernel_file_references_are_inlined_by_resolve() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("k.json"), "[[0.5, 0.5], [0.5, 0.5]]").unwrap();
        let mut cfg = minimal("classical");
        cfg.kernel = Some(KernelSpec::Path { path: "k.json".into() });
        let resolved = cfg.resolve(dir.path()).unwrap();
        assert!(matches!(resolved.kernel, Some(KernelSpec::Rows(_))));

        let mut nested = minimal("classical");
        std::fs::write(dir.path().join("n.json"), r#"{ "path": "k.json" }"#).unwrap();
        nested.kernel = Some(KernelSpec::Path { path: "n.json".into() });
        assert!(nested.resolve(dir.path()).is_err());
    }

    #[test]
    fn validation_names_the_failing_field() {
        let mut cfg = minimal("imprecise");
        let err = Experiment::prepare(cfg.clone()).unwrap_err();
        assert!(err.to_string().contains("spam"), "{err}");
        cfg.spam = Some(SpamSpec::DirectAccess { direct_access: 2 });
        cfg.sigma = Some(-0.5);
        cfg.n_max = Some(4);
        let err = Experiment::prepare(cfg).unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
    }

    #[test]
    fn driver_is_sized_by_observation_labels() {
        let mut cfg = minimal("imprecise");
        cfg.spam = Some(SpamSpec::Oblivious {
            oblivious: SizePair { states: 2, obs: 3 },
        });
        cfg.sigma = Some(0.3);
        cfg.n_max = Some(4);
        let err = Experiment::prepare(cfg.clone()).unwrap_err();
        assert!(err.to_string().contains("kernel"), "{err}");
        cfg.kernel = Some(KernelSpec::Rows(vec![
            vec![0.4, 0.3, 0.3],
            vec![0.3, 0.4, 0.3],
            vec![0.3, 0.3, 0.4],
        ]));
        assert!(Experiment::prepare(cfg).is_ok());
    }

    #[test]
    fn cyclic_kernels_are_classical_only() {
        let cycle = KernelSpec::Cycle {
            cycle: vec![
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                vec![vec![0.2, 0.8], vec![0.8, 0.2]],
            ],
        };
        let mut classical = minimal("classical");
        classical.kernel = Some(cycle.clone());
        assert!(Experiment::prepare(classical).is_ok());

        let mut imprecise = minimal("imprecise");
        imprecise.kernel = Some(cycle);
        imprecise.spam = Some(SpamSpec::DirectAccess { direct_access: 2 });
        imprecise.sigma = Some(0.3);
        imprecise.n_max = Some(4);
        let err = Experiment::prepare(imprecise).unwrap_err();
        assert!(err.to_string().contains("classical mode only"), "{err}");
    }

    #[test]
    fn halting_delta_derives_from_model_when_absent() {
        let mut cfg = minimal("halting");
        cfg.n_max = Some(16);
        cfg.runs = Some(100);
        cfg.sigma = Some(0.5);
        assert!((effective_delta(&cfg).unwrap() - 0.25).abs() < 1e-15);
        cfg.delta = Some(2.0);
        assert!((effective_delta(&cfg).unwrap() - 2.0).abs() < 1e-15);
        cfg.sigma = None;
        cfg.delta = None;
        cfg.model = None;
        assert!(effective_delta(&cfg).is_err());
    }
}
