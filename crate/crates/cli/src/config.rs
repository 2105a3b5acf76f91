//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedsurrogate::linalg::Vector;
use fedsurrogate::localupdate::{RunSpec, Schedule, ServerOptimizer, UpdateMode};
use fedsurrogate::lrdecay::DecayConfig;
use fedsurrogate::problem::{make_density_1d, make_synthetic, make_two_point, Population, SyntheticParams};
use fedsurrogate::surrogate::ThetaWeights;
use fedsurrogate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    TwoPoint,
    #[serde(rename = "density_1d")]
    Density1d {
        n_atoms: usize,
    },
    Synthetic {
        params: SyntheticParams,
    },
    File {
        path: PathBuf,
    },
}

impl ProblemConfig {
    /// Builds the population; relative file paths resolve against `base`.
    pub fn build(&self, base: Option<&Path>) -> Result<Population> {
        match self {
            ProblemConfig::TwoPoint => Ok(make_two_point()),
            ProblemConfig::Density1d { n_atoms } => make_density_1d(*n_atoms),
            ProblemConfig::Synthetic { params } => make_synthetic(params),
            ProblemConfig::File { path } => {
                let p = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                Population::load(&p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaConfig {
    Fedavg {
        k: usize,
    },
    Fomaml {
        k: usize,
    },
    /// K-step MAML, run as LocalUpdate with `Θ_{2K+1}`.
    Maml {
        k: usize,
    },
    Custom {
        weights: Vec<f64>,
    },
}

impl ThetaConfig {
    pub fn build(&self) -> Result<ThetaWeights> {
        match self {
            ThetaConfig::Fedavg { k } => ThetaWeights::fedavg(*k),
            ThetaConfig::Fomaml { k } => ThetaWeights::fomaml(*k),
            ThetaConfig::Maml { k } => ThetaWeights::maml_equiv(*k),
            ThetaConfig::Custom { weights } => ThetaWeights::new(weights.clone()),
        }
    }

    /// Same family with a different step count.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        match self {
            ThetaConfig::Fedavg { .. } => Ok(ThetaConfig::Fedavg { k }),
            ThetaConfig::Fomaml { .. } => Ok(ThetaConfig::Fomaml { k }),
            ThetaConfig::Maml { .. } => Ok(ThetaConfig::Maml { k }),
            ThetaConfig::Custom { .. } => Err(Error::InvalidParameter(
                "a K sweep needs theta of kind fedavg, fomaml or maml".into(),
            )),
        }
    }
}

fn default_batch() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub theta: ThetaConfig,
    pub gamma: Schedule,
    pub eta: Schedule,
    #[serde(default)]
    pub server: ServerOptimizer,
    #[serde(default)]
    pub mode: UpdateMode,
    /// Clients per round; all clients when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub rounds: usize,
    /// Initial iterate; the origin when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub algorithm: AlgorithmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayConfig>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
}

/// A validated configuration with its population built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pop: Population,
    pub spec: RunSpec,
    pub decay: Option<DecayConfig>,
    pub warnings: Vec<String>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Serde(m) => Error::Serde(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Builds and validates everything a run needs.
    pub fn prepare(&self, base: Option<&Path>) -> Result<Prepared> {
        let pop = self.problem.build(base)?;
        let alg = &self.algorithm;
        let theta = alg.theta.build()?;
        let x0 = match &alg.x0 {
            Some(v) => {
                let x = Vector::new(v.clone());
                x.check_dim(pop.dim()).map_err(|_| {
                    Error::InvalidParameter(format!(
                        "algorithm.x0 has {} entries but the problem has dimension {}",
                        v.len(),
                        pop.dim()
                    ))
                })?;
                x
            }
            None => Vector::zeros(pop.dim()),
        };
        let spec = RunSpec {
            theta,
            gamma: alg.gamma.clone(),
            eta: alg.eta.clone(),
            server: alg.server,
            mode: alg.mode,
            clients_per_round: alg.clients_per_round.unwrap_or(pop.len()),
            batch_size: alg.batch_size,
            rounds: alg.rounds,
            x0,
            master_seed: self.master_seed,
            workers: self.workers,
        };
        spec.validate(&pop).map_err(|e| match e {
            Error::InvalidParameter(m) => Error::InvalidParameter(format!("algorithm: {m}")),
            other => other,
        })?;
        if let Some(d) = &self.decay {
            d.validate()?;
        }
        let warnings = spec.warnings(&pop);
        Ok(Prepared {
            pop,
            spec,
            decay: self.decay.clone(),
            warnings,
        })
    }
}
