//! On-disk scenario and gain formats.
//!
//! A scenario file bundles everything one run needs: the agent model, the
//! graph collection, the switching schedule, and optional synthesis,
//! simulation, averaging, and validation sections with CLI-level defaults.
//! Gain files carry synthesized gains together with the certificates that
//! were checked when they were produced, so a later `simulate` does not have
//! to trust them blindly.

use anyhow::{Context, Result};
use consensus_core::graph::GraphConfig;
use consensus_core::linalg::Matrix;
use consensus_core::schedule::{SamplingStrategy, ScheduleConfig, SwitchingSchedule};
use consensus_core::sim::{InitialState, SimMode};
use consensus_core::synthesis::{AgentModel, AveragingParams, GainSet};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// A scenario or gain file that cannot be used at all, as opposed to one
/// that loads fine but describes a failing system. The distinction drives
/// the exit code: unusable input exits 2, domain failures exit 1.
#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("reading {what}: {source}")]
    Read {
        what: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{what} has schema version {found}, this build reads {expected}")]
    Schema {
        what: String,
        found: u32,
        expected: u32,
    },
    #[error("{what} lists no graphs")]
    NoGraphs { what: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub model: ModelSection,
    pub graphs: Vec<GraphConfig>,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging: Option<AveragingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    /// Coupling margin to synthesize against. Defaults to a third of the
    /// sampled estimate when absent.
    pub delta_bar: Option<f64>,
    pub margin: f64,
    /// Decay rate the observer-mode local stabilizer must enforce.
    pub decay: f64,
    pub mode: SimMode,
    pub strategy: SamplingStrategy,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            delta_bar: None,
            margin: 0.1,
            decay: 0.5,
            mode: SimMode::StateFeedback,
            strategy: SamplingStrategy::Grid { resolution: 0.1 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub step: f64,
    pub horizon: f64,
    pub initial: InitialSpec,
    pub max_samples: usize,
    pub overflow_limit: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            step: 1e-3,
            horizon: 30.0,
            initial: InitialSpec::Random {
                seed: 7,
                scale: 1.0,
            },
            max_samples: 100_000,
            overflow_limit: 1e12,
        }
    }
}

/// Initial condition: explicit vectors or a seeded draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialSpec {
    Explicit {
        leader: Vec<f64>,
        followers: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        estimates: Option<Vec<Vec<f64>>>,
    },
    Random {
        seed: u64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
}

fn default_scale() -> f64 {
    1.0
}

impl InitialSpec {
    pub fn build(&self, state_dim: usize, n_followers: usize) -> InitialState {
        match self {
            InitialSpec::Explicit {
                leader,
                followers,
                estimates,
            } => InitialState {
                leader: leader.clone(),
                followers: followers.clone(),
                estimates: estimates.clone(),
            },
            InitialSpec::Random { seed, scale } => {
                InitialState::random(state_dim, n_followers, *scale, *seed)
            }
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            InitialSpec::Explicit { .. } => None,
            InitialSpec::Random { seed, .. } => Some(*seed),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingSection {
    pub t_bound: f64,
    pub kappa_g: f64,
    pub kappa_v: f64,
    pub nu: f64,
}

impl AveragingSection {
    pub fn to_params(self) -> Result<AveragingParams> {
        AveragingParams::new(self.t_bound, self.kappa_g, self.kappa_v, self.nu)
            .context("averaging section")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    pub t_max: f64,
    pub tau_min: f64,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<ScenarioFile, LoadError> {
        let name = || format!("scenario {}", path.display());
        let text = fs::read_to_string(path).map_err(|source| LoadError::Read {
            what: name(),
            source,
        })?;
        let scenario: ScenarioFile =
            serde_json::from_str(&text).map_err(|source| LoadError::Parse {
                what: name(),
                source,
            })?;
        if scenario.schema_version != SCHEMA_VERSION {
            return Err(LoadError::Schema {
                what: name(),
                found: scenario.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        if scenario.graphs.is_empty() {
            return Err(LoadError::NoGraphs { what: name() });
        }
        Ok(scenario)
    }

    pub fn model(&self) -> Result<AgentModel> {
        let a = Matrix::from_rows(&self.model.a).context("model matrix A")?;
        let b = Matrix::from_rows(&self.model.b).context("model matrix B")?;
        let c = match &self.model.c {
            Some(rows) => Some(Matrix::from_rows(rows).context("model matrix C")?),
            None => None,
        };
        AgentModel::new(a, b, c).context("agent model")
    }

    pub fn schedule(&self) -> Result<SwitchingSchedule> {
        let graphs = self
            .graphs
            .iter()
            .enumerate()
            .map(|(i, g)| g.to_graph().with_context(|| format!("graph {i}")))
            .collect::<Result<Vec<_>>>()?;
        self.schedule
            .to_schedule(graphs)
            .context("switching schedule")
    }
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.to_rows()
}

fn rows_matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    Matrix::from_rows(rows).with_context(|| format!("gain file matrix {what}"))
}

/// Synthesized gains plus the certificates checked at synthesis time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainFile {
    pub schema_version: u32,
    pub mode: SimMode,
    pub delta_bar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_bar_estimate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<SamplingStrategy>,
    pub margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    pub p: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_o: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_o: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<Vec<f64>>>,
    pub certificates: Certificates,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificates {
    pub feedback_residual_norm: f64,
    pub p_min_eigenvalue: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer_residual_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_o_min_eigenvalue: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stabilizer_abscissa: Option<f64>,
    /// Spectral abscissa of each interval's averaged closed loop.
    pub averaged_abscissas: Vec<f64>,
}

impl GainFile {
    pub fn load(path: &Path) -> Result<GainFile, LoadError> {
        let name = || format!("gain file {}", path.display());
        let text = fs::read_to_string(path).map_err(|source| LoadError::Read {
            what: name(),
            source,
        })?;
        let gains: GainFile = serde_json::from_str(&text).map_err(|source| LoadError::Parse {
            what: name(),
            source,
        })?;
        if gains.schema_version != SCHEMA_VERSION {
            return Err(LoadError::Schema {
                what: name(),
                found: gains.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(gains)
    }

    pub fn from_gain_set(
        gains: &GainSet,
        mode: SimMode,
        decay: Option<f64>,
        estimate: Option<f64>,
        strategy: Option<SamplingStrategy>,
        certificates: Certificates,
    ) -> GainFile {
        GainFile {
            schema_version: SCHEMA_VERSION,
            mode,
            delta_bar: gains.delta_bar,
            delta_bar_estimate: estimate,
            strategy,
            margin: gains.margin,
            decay,
            p: matrix_rows(&gains.p),
            k: matrix_rows(&gains.k),
            p_o: gains.p_o.as_ref().map(matrix_rows),
            k_o: gains.k_o.as_ref().map(matrix_rows),
            f: gains.f.as_ref().map(matrix_rows),
            certificates,
        }
    }

    pub fn to_gain_set(&self) -> Result<GainSet> {
        Ok(GainSet {
            p: rows_matrix(&self.p, "P")?,
            k: rows_matrix(&self.k, "K")?,
            p_o: self.p_o.as_deref().map(|r| rows_matrix(r, "P_o")).transpose()?,
            k_o: self.k_o.as_deref().map(|r| rows_matrix(r, "K_o")).transpose()?,
            f: self.f.as_deref().map(|r| rows_matrix(r, "F")).transpose()?,
            delta_bar: self.delta_bar,
            margin: self.margin,
        })
    }
}
