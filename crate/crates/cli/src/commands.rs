//! The `run` and `sweep` commands.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use fedsurrogate::localupdate::{fmt_f64, run, write_metrics_csv, RunResult, Schedule};
use fedsurrogate::lrdecay::{run_decay, write_decay_csv};
use fedsurrogate::surrogate::surrogate_minimizer;
use fedsurrogate::{Error, Result};

use crate::config::{Prepared, RunConfig};

/// Exit codes of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const VERIFY_FAILED: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => exit::IO,
        _ => exit::CONFIG,
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let io = |e: std::io::Error| Error::Io(format!("cannot write {}: {e}", path.display()));
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

/// A finished run with its rendered metrics table.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub csv: Vec<u8>,
    pub n_decays: Option<usize>,
}

/// Executes a prepared run (with or without plateau decay) and renders CSV.
pub fn execute(prep: &Prepared) -> Result<RunOutput> {
    let mut csv = Vec::new();
    match &prep.decay {
        Some(d) => {
            let r = run_decay(&prep.pop, &prep.spec, d)?;
            write_decay_csv(&mut csv, &r)?;
            let n = r.decay.last().map(|row| row.n_decays).unwrap_or(0);
            Ok(RunOutput {
                result: r.run,
                csv,
                n_decays: Some(n),
            })
        }
        None => {
            let r = run(&prep.pop, &prep.spec)?;
            write_metrics_csv(&mut csv, &r)?;
            Ok(RunOutput {
                result: r,
                csv,
                n_decays: None,
            })
        }
    }
}

/// Runs a configuration; writes the CSV to `out` when given.
pub fn cmd_run(config: &RunConfig, base: Option<&Path>, out: Option<&Path>) -> Result<(Prepared, RunOutput)> {
    let prep = config.prepare(base)?;
    for w in &prep.warnings {
        log::warn!("{w}");
    }
    let output = execute(&prep)?;
    if let Some(p) = out {
        write_atomic(p, &output.csv)?;
    }
    Ok((prep, output))
}

/// Grid for a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Gamma(Vec<f64>),
    K(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Gamma(_) => "gamma",
            SweepAxis::K(_) => "k",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Gamma(v) => v.len(),
            SweepAxis::K(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, i: usize) -> f64 {
        match self {
            SweepAxis::Gamma(v) => v[i],
            SweepAxis::K(v) => v[i] as f64,
        }
    }

    fn apply(&self, i: usize, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        match self {
            SweepAxis::Gamma(v) => c.algorithm.gamma = Schedule::constant(v[i]),
            SweepAxis::K(v) => c.algorithm.theta = c.algorithm.theta.with_k(v[i])?,
        }
        Ok(c)
    }
}

/// Converged point of one grid setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: f64,
    pub final_x: Vec<f64>,
    /// `x*(γ, Θ)` when the client rate is constant.
    pub predicted_x: Option<Vec<f64>>,
    pub dist_to_x_star: f64,
    pub dist_to_predicted: Option<f64>,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub points: Vec<SweepPoint>,
    pub csv: Vec<u8>,
}

/// One run per grid value, all with the configured master seed, combined
/// into a long table keyed by `(axis, value, round)`.
pub fn cmd_sweep(config: &RunConfig, base: Option<&Path>, axis: &SweepAxis, out: Option<&Path>) -> Result<SweepOutput> {
    if axis.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    let configs = (0..axis.len())
        .map(|i| axis.apply(i, config))
        .collect::<Result<Vec<_>>>()?;
    let prepared = configs.iter().map(|c| c.prepare(base)).collect::<Result<Vec<_>>>()?;
    let runs: Vec<Result<RunOutput>> = prepared.par_iter().map(execute).collect();
    let mut csv = Vec::new();
    let mut points = Vec::with_capacity(axis.len());
    for (i, (prep, out)) in prepared.iter().zip(runs).enumerate() {
        let out = out?;
        let value = axis.value(i);
        let prefix = format!("{},{}", axis.name(), fmt_f64(value));
        let text = String::from_utf8(out.csv).expect("metrics CSV is UTF-8");
        for (j, line) in text.lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    writeln!(csv, "axis,value,{line}")?;
                }
            } else if let Some(comment) = line.strip_prefix("# ") {
                writeln!(csv, "# {prefix}: {comment}")?;
            } else {
                writeln!(csv, "{prefix},{line}")?;
            }
        }
        let predicted = prep
            .spec
            .gamma
            .constant_value()
            .and_then(|g| surrogate_minimizer(&prep.pop, g, &prep.spec.theta).ok());
        let x = &out.result.final_x;
        points.push(SweepPoint {
            axis: axis.name().to_string(),
            value,
            final_x: x.as_slice().to_vec(),
            dist_to_x_star: x.dist(&prep.pop.stats().x_star),
            dist_to_predicted: predicted.as_ref().map(|p| x.dist(p)),
            predicted_x: predicted.map(|p| p.into_inner()),
            diverged_at: out.result.diverged_at,
        });
    }
    if let Some(p) = out {
        write_atomic(p, &csv)?;
        write_atomic(&summary_path(p), serde_json::to_string_pretty(&points)?.as_bytes())?;
    }
    Ok(SweepOutput { points, csv })
}

/// `out.csv` → `out.summary.json`
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}
