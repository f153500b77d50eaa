//! Command implementations behind the `sortline` binary.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::metrics::Metrics;
use crate::scenario::{Scenario, ScenarioError, SimConfig};
use crate::sim::{self, RunOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid scenario: {0}")]
    Validation(ScenarioError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    /// 2 for validation failures, 3 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(ScenarioError::Io { .. }) | CliError::Io { .. } => 3,
            CliError::Validation(_) => 2,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Validation(e)
    }
}

/// Where an output goes: a file, or stdout for `-`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sink {
    Stdout,
    File(PathBuf),
}

impl Sink {
    pub fn parse(s: &str) -> Sink {
        if s == "-" {
            Sink::Stdout
        } else {
            Sink::File(PathBuf::from(s))
        }
    }

    fn write_with(&self, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
        let path = match self {
            Sink::Stdout => "<stdout>".to_owned(),
            Sink::File(p) => p.display().to_string(),
        };
        let wrap = |source| CliError::Io { path: path.clone(), source };
        match self {
            Sink::Stdout => {
                let stdout = io::stdout();
                let mut lock = stdout.lock();
                f(&mut lock).and_then(|_| lock.flush()).map_err(wrap)
            }
            Sink::File(p) => {
                let mut w = BufWriter::new(File::create(p).map_err(wrap)?);
                f(&mut w).and_then(|_| w.flush()).map_err(wrap)
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_rm: bool,
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<(Scenario, SimConfig), CliError> {
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = overrides.seed {
        scenario.seed = seed;
    }
    if overrides.no_rm {
        scenario.rm_enabled = false;
    }
    let cfg = scenario.resolve()?;
    Ok((scenario, cfg))
}

fn execute(cfg: SimConfig) -> Result<RunOutcome, CliError> {
    sim::run(cfg).map_err(|e| {
        CliError::Validation(ScenarioError::Invalid {
            field: "config".into(),
            message: e.to_string(),
        })
    })
}

pub fn run(
    path: &Path,
    trace: Option<&Sink>,
    metrics: &Sink,
    overrides: &Overrides,
) -> Result<RunOutcome, CliError> {
    let (_, cfg) = load(path, overrides)?;
    let outcome = execute(cfg)?;
    if let Some(sink) = trace {
        sink.write_with(|w| outcome.trace.write_jsonl(w))?;
    }
    metrics.write_with(|w| write_pretty(w, &outcome.metrics))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Comparison {
    pub scenario: Option<String>,
    pub rm_off: Metrics,
    pub rm_on: Metrics,
    pub delta_sorted_correct: i64,
}

/// Runs the scenario with the RMs forced off, then forced on, same seed.
pub fn compare(path: &Path, out: &Sink, overrides: &Overrides) -> Result<Comparison, CliError> {
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = overrides.seed {
        scenario.seed = seed;
    }
    scenario.rm_enabled = false;
    let off = execute(scenario.resolve()?)?.metrics;
    scenario.rm_enabled = true;
    let on = execute(scenario.resolve()?)?.metrics;
    let report = Comparison {
        scenario: scenario.name.clone(),
        delta_sorted_correct: on.sorted_correct as i64 - off.sorted_correct as i64,
        rm_off: off,
        rm_on: on,
    };
    out.write_with(|w| write_pretty(w, &report))?;
    Ok(report)
}

pub fn validate(path: &Path) -> Result<Scenario, CliError> {
    let scenario = Scenario::load(path)?;
    scenario.resolve()?;
    Ok(scenario)
}

fn write_pretty<T: Serialize>(w: &mut dyn Write, value: &T) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)
}
