//! Experiment harness around `qmhlab-core`: a JSON config describes one
//! run (chain simulation, halting table, verification suite, or cost
//! report), and the binary materializes its artifacts into a manifested
//! output directory.

pub mod artifacts;
pub mod config;
pub mod modes;
pub mod verify;

use std::path::{Path, PathBuf};

use thiserror::Error;

use config::{Experiment, ExperimentConfig, Mode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: String) -> Self {
        CliError::Config {
            field: field.into(),
            reason,
        }
    }
}

impl From<qmhlab_core::QmhError> for CliError {
    fn from(e: qmhlab_core::QmhError) -> Self {
        CliError::Internal(e.to_string())
    }
}

const USAGE: &str = "\
usage: qmhlab <config.json> [--mode MODE] [--seed N] [--out DIR]

Runs the experiment described by a JSON config file and writes its
artifacts (traces, summaries, reports, manifest) to the output
directory.

options:
  --mode MODE   override the config's mode
                (classical | imprecise | quantum | halting | verify | cost)
  --seed N      override the config's 64-bit seed
  --out DIR     override the config's output directory
  -h, --help    print this message

environment:
  QMHLAB_THREADS   caps the number of worker threads

exit codes: 0 success, 1 config or runtime error, 2 verification failure
";

struct CliArgs {
    config_path: PathBuf,
    mode: Option<Mode>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn parse_args(args: &[String]) -> Result<Option<CliArgs>, CliError> {
    let mut config_path = None;
    let mut mode = None;
    let mut seed = None;
    let mut out = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "-h" | "--help" => return Ok(None),
            "--mode" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::config("--mode", "missing value".to_string()))?;
                mode = Some(Mode::parse(v)?);
            }
            "--seed" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::config("--seed", "missing value".to_string()))?;
                seed = Some(v.parse::<u64>().map_err(|_| {
                    CliError::config("--seed", format!("`{v}` is not a 64-bit unsigned integer"))
                })?);
            }
            "--out" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::config("--out", "missing value".to_string()))?;
                out = Some(PathBuf::from(v));
            }
            flag if flag.starts_with('-') => {
                return Err(CliError::config(flag, "unknown flag".to_string()));
            }
            positional => {
                if config_path.is_some() {
                    return Err(CliError::config(
                        positional,
                        "only one config path is accepted".to_string(),
                    ));
                }
                config_path = Some(PathBuf::from(positional));
            }
        }
    }
    let config_path = config_path
        .ok_or_else(|| CliError::config("config", "no config file given".to_string()))?;
    Ok(Some(CliArgs {
        config_path,
        mode,
        seed,
        out,
    }))
}

fn execute(args: CliArgs) -> Result<bool, CliError> {
    let base = args
        .config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut cfg = ExperimentConfig::from_file(&args.config_path)?.resolve(&base)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output_dir = Some(out);
    }

    let exp = Experiment::prepare(cfg)?;
    let out_dir = exp
        .config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("qmhlab-out"));
    let mode = exp.config.mode;
    let mut session = artifacts::Session::open(&out_dir, &exp.hash, mode.name())?;

    let ok = match mode {
        Mode::Verify => verify::run_verify(&exp, &mut session)?,
        _ => {
            modes::dispatch(&exp, &mut session)?;
            true
        }
    };
    session.commit()?;
    println!(
        "qmhlab: mode={} config_hash={} out={}",
        mode.name(),
        exp.hash,
        out_dir.display()
    );
    Ok(ok)
}

/// Runs the CLI on already-split arguments and returns the process exit
/// code: 0 on success, 1 on config or runtime errors, 2 when a
/// verification run finds a violation or misses an injected one.
pub fn run_cli(args: Vec<String>) -> i32 {
    match parse_args(&args) {
        Ok(None) => {
            print!("{USAGE}");
            0
        }
        Ok(Some(parsed)) => match execute(parsed) {
            Ok(true) => 0,
            Ok(false) => {
                eprintln!("qmhlab: verification failed");
                2
            }
            Err(e) => {
                eprintln!("qmhlab: {e}");
                1
            }
        },
        Err(e) => {
            eprintln!("qmhlab: {e}");
            eprint!("{USAGE}");
            1
        }
    }
}
