//! Run configuration: a flat `key = value` TOML schema with dotted
//! sections, strict validation (unknown keys are hard errors), and the
//! manifest that makes a finished run reproducible.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, Grid1D};
use crate::onsager::{builtin_matrix_model, MatrixModel, ModelParams};
use crate::scheme::{Formulation, KappaModel, NewtonParams, ReactionModel, SchemeConfig};
use crate::thermo::MixtureState;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub n: usize,
    pub domain: DomainSection,
    pub time: TimeSection,
    #[serde(default)]
    pub epsilon: f64,
    pub boundary: BoundarySection,
    pub kappa: KappaSection,
    pub matrix: MatrixSection,
    #[serde(default)]
    pub reaction: ReactionSection,
    #[serde(default = "default_formulation")]
    pub formulation: String,
    #[serde(default)]
    pub newton: NewtonSection,
    pub initial: InitialSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub check: Option<CheckSection>,
    #[serde(default)]
    pub convergence: Option<ConvergenceSection>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_formulation() -> String {
    "potential".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub length: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub tau: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "one")]
    pub theta0: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KappaSection {
    pub c: f64,
    #[serde(rename = "C")]
    pub big_c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    pub model: String,
    #[serde(default)]
    pub params: MatrixParamsSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MatrixParamsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_star: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReactionSection {
    #[serde(default = "default_reaction")]
    pub model: String,
    #[serde(default)]
    pub c_r: f64,
}

fn default_reaction() -> String {
    "none".to_string()
}

impl Default for ReactionSection {
    fn default() -> Self {
        Self {
            model: default_reaction(),
            c_r: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NewtonSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_damping_min")]
    pub damping_min: f64,
    #[serde(default)]
    pub picard_fallback: bool,
}

fn default_tol() -> f64 {
    1e-11
}
fn default_max_iter() -> usize {
    25
}
fn default_damping_min() -> f64 {
    1e-8
}

impl Default for NewtonSection {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            damping_min: default_damping_min(),
            picard_fallback: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub theta: Profile,
    pub profiles: Vec<Profile>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Constant {
        value: f64,
    },
    Gaussian {
        base: f64,
        amplitude: f64,
        center: f64,
        width: f64,
    },
    Step {
        left: f64,
        right: f64,
        at: f64,
    },
    Cosine {
        base: f64,
        amplitude: f64,
        mode: u32,
    },
}

impl Profile {
    pub fn evaluate(&self, x: f64, length: f64) -> f64 {
        match self {
            Profile::Constant { value } => *value,
            Profile::Gaussian {
                base,
                amplitude,
                center,
                width,
            } => base + amplitude * (-((x - center) / width).powi(2) / 2.0).exp(),
            Profile::Step { left, right, at } => {
                if x < *at {
                    *left
                } else {
                    *right
                }
            }
            Profile::Cosine {
                base,
                amplitude,
                mode,
            } => base + amplitude * (*mode as f64 * std::f64::consts::PI * x / length).cos(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_dir")]
    pub dir: String,
}

fn default_stride() -> usize {
    1
}
fn default_dir() -> String {
    "out".to_string()
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            stride: default_stride(),
            dir: default_dir(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_floor")]
    pub floor_m2: f64,
    #[serde(default = "default_floor")]
    pub floor_m3: f64,
    #[serde(default = "default_rho_min")]
    pub rho_min: f64,
    #[serde(default = "default_rho_max")]
    pub rho_max: f64,
    #[serde(default = "default_theta_min")]
    pub theta_min: f64,
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
}

fn default_samples() -> usize {
    100
}
fn default_seed() -> u64 {
    7
}
fn default_floor() -> f64 {
    1e-12
}
fn default_rho_min() -> f64 {
    0.1
}
fn default_rho_max() -> f64 {
    2.0
}
fn default_theta_min() -> f64 {
    0.5
}
fn default_theta_max() -> f64 {
    2.0
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            seed: default_seed(),
            floor_m2: default_floor(),
            floor_m3: default_floor(),
            rho_min: default_rho_min(),
            rho_max: default_rho_max(),
            theta_min: default_theta_min(),
            theta_max: default_theta_max(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    #[serde(default)]
    pub spatial: Option<SpatialLadder>,
    #[serde(default)]
    pub temporal: Option<TemporalLadder>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpatialLadder {
    pub base_cells: usize,
    pub levels: usize,
    pub tau: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TemporalLadder {
    pub cells: usize,
    pub base_tau: f64,
    pub levels: usize,
    pub t_end: f64,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        // a manifest embeds the resolved config under [config]
        let value: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let config_text = if value.get("artifact_version").is_some() {
            let inner = value
                .get("config")
                .ok_or_else(|| invalid("config", "manifest carries no [config] table"))?;
            toml::to_string(inner).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            text.to_string()
        };
        let config: RunConfig =
            toml::from_str(&config_text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != SCHEMA_VERSION {
            return Err(invalid(
                "schema",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema),
            ));
        }
        if self.n < 2 {
            return Err(invalid("n", "at least two species are required"));
        }
        if !(self.domain.length > 0.0) {
            return Err(invalid("domain.length", "must be positive"));
        }
        let min_cells = if self.epsilon > 0.0 { 5 } else { Grid1D::MIN_CELLS };
        if self.domain.cells < min_cells {
            return Err(invalid(
                "domain.cells",
                format!("at least {min_cells} cells required"),
            ));
        }
        if !(self.time.tau > 0.0) {
            return Err(invalid("time.tau", "must be positive"));
        }
        if !(self.time.t_end >= 0.0) {
            return Err(invalid("time.t_end", "must be nonnegative"));
        }
        if self.epsilon < 0.0 {
            return Err(invalid("epsilon", "must be nonnegative"));
        }
        if self.boundary.lambda < 0.0 {
            return Err(invalid("boundary.lambda", "must be nonnegative"));
        }
        if !(self.boundary.theta0 > 0.0) {
            return Err(invalid("boundary.theta0", "must be positive"));
        }
        if !(self.kappa.c > 0.0) || !(self.kappa.big_c > 0.0) || self.kappa.c > self.kappa.big_c {
            return Err(invalid(
                "kappa",
                format!(
                    "growth constants must satisfy 0 < c <= C, got c = {}, C = {}",
                    self.kappa.c, self.kappa.big_c
                ),
            ));
        }
        match self.matrix.model.as_str() {
            "constant_pi" => {
                if self.matrix.params.c.is_none() {
                    return Err(invalid("matrix.params.c", "constant_pi requires `c`"));
                }
                if let Some(sigma) = &self.matrix.params.sigma {
                    if sigma.len() != self.n {
                        return Err(invalid("matrix.params.sigma", "length must equal n"));
                    }
                }
            }
            "maxwell_stefan" => {
                let b = self
                    .matrix
                    .params
                    .b
                    .as_ref()
                    .ok_or_else(|| invalid("matrix.params.b", "maxwell_stefan requires `b`"))?;
                if b.len() != self.n || b.iter().any(|row| row.len() != self.n) {
                    return Err(invalid("matrix.params.b", "must be an n-by-n matrix"));
                }
                for i in 0..self.n {
                    for j in 0..self.n {
                        if (b[i][j] - b[j][i]).abs() > 1e-13 * (1.0 + b[i][j].abs()) {
                            return Err(invalid("matrix.params.b", "must be symmetric"));
                        }
                        if i != j && b[i][j] <= 0.0 {
                            return Err(invalid(
                                "matrix.params.b",
                                "off-diagonal friction must be positive",
                            ));
                        }
                    }
                }
                if let Some(q) = &self.matrix.params.q_star {
                    if q.len() != self.n {
                        return Err(invalid("matrix.params.q_star", "length must equal n"));
                    }
                }
            }
            "degenerate_pirhopi" => {
                if let Some(q) = &self.matrix.params.q_star {
                    if q.len() != self.n {
                        return Err(invalid("matrix.params.q_star", "length must equal n"));
                    }
                }
            }
            other => {
                return Err(invalid(
                    "matrix.model",
                    format!("unknown model `{other}`"),
                ))
            }
        }
        match self.reaction.model.as_str() {
            "none" => {}
            "linear_pi_q" => {
                if !(self.reaction.c_r > 0.0) {
                    return Err(invalid("reaction.c_r", "must be positive for linear_pi_q"));
                }
            }
            other => {
                return Err(invalid(
                    "reaction.model",
                    format!("unknown model `{other}` (none | linear_pi_q)"),
                ))
            }
        }
        match self.formulation.as_str() {
            "potential" | "density" => {}
            other => {
                return Err(invalid(
                    "formulation",
                    format!("unknown formulation `{other}` (potential | density)"),
                ))
            }
        }
        if !(self.newton.tol > 0.0) {
            return Err(invalid("newton.tol", "must be positive"));
        }
        if self.newton.max_iter == 0 {
            return Err(invalid("newton.max_iter", "must be at least 1"));
        }
        if self.initial.profiles.len() != self.n {
            return Err(invalid(
                "initial.profiles",
                format!("expected {} profiles, got {}", self.n, self.initial.profiles.len()),
            ));
        }
        if self.output.stride == 0 {
            return Err(invalid("output.stride", "must be at least 1"));
        }
        if let Some(conv) = &self.convergence {
            if let Some(s) = &conv.spatial {
                if s.levels < 2 {
                    return Err(invalid(
                        "convergence.spatial.levels",
                        "a ladder needs at least two resolutions",
                    ));
                }
                if s.base_cells < min_cells {
                    return Err(invalid("convergence.spatial.base_cells", "too coarse"));
                }
            }
            if let Some(t) = &conv.temporal {
                if t.levels < 2 {
                    return Err(invalid(
                        "convergence.temporal.levels",
                        "a ladder needs at least two resolutions",
                    ));
                }
            }
            if conv.spatial.is_none() && conv.temporal.is_none() {
                return Err(invalid(
                    "convergence",
                    "at least one of `spatial` or `temporal` must be given",
                ));
            }
        }
        Ok(())
    }

    pub fn matrix_model(&self) -> Result<MatrixModel, ConfigError> {
        let params = ModelParams {
            c: self.matrix.params.c,
            sigma: self.matrix.params.sigma.clone(),
            b: self.matrix.params.b.as_ref().map(|rows| {
                DMatrix::from_fn(self.n, self.n, |i, j| rows[i][j])
            }),
            q_star: self.matrix.params.q_star.clone(),
        };
        builtin_matrix_model(&self.matrix.model, self.n, params)
            .map_err(|e| invalid("matrix", e.to_string()))
    }

    pub fn scheme_config(&self) -> Result<SchemeConfig, ConfigError> {
        let reaction = match self.reaction.model.as_str() {
            "none" => ReactionModel::None,
            _ => ReactionModel::LinearPiQ {
                c_r: self.reaction.c_r,
            },
        };
        let formulation = if self.formulation == "density" {
            Formulation::Density
        } else {
            Formulation::Potential
        };
        let kappa = KappaModel {
            c_kappa: self.kappa.c,
            big_c_kappa: self.kappa.big_c,
        };
        if !kappa.satisfies_growth_bounds(self.boundary.lambda) {
            return Err(invalid("kappa", "growth bounds violated on sampled ladder"));
        }
        Ok(SchemeConfig {
            tau: self.time.tau,
            epsilon: self.epsilon,
            lambda: self.boundary.lambda,
            theta0: self.boundary.theta0,
            kappa,
            matrix_model: self.matrix_model()?,
            reaction,
            formulation,
            newton: NewtonParams {
                tol: self.newton.tol,
                max_iter: self.newton.max_iter,
                damping_min: self.newton.damping_min,
                picard_fallback: self.newton.picard_fallback,
            },
        })
    }

    pub fn grid(&self) -> Result<Grid1D, ConfigError> {
        Grid1D::new(self.domain.length, self.domain.cells)
            .map_err(|e| invalid("domain", e.to_string()))
    }

    pub fn initial_state(&self) -> Result<MixtureState, ConfigError> {
        self.initial_state_on(self.grid()?)
    }

    /// Builds the initial state on an arbitrary grid (refinement ladders).
    pub fn initial_state_on(&self, grid: Grid1D) -> Result<MixtureState, ConfigError> {
        let length = self.domain.length;
        let rho: Vec<Field> = self
            .initial
            .profiles
            .iter()
            .map(|p| Field::from_fn(grid, |x| p.evaluate(x, length)))
            .collect();
        let theta = Field::from_fn(grid, |x| self.initial.theta.evaluate(x, length));
        for (i, r) in rho.iter().enumerate() {
            if r.min() <= 0.0 {
                return Err(invalid(
                    &format!("initial.profiles[{i}]"),
                    "density profile must be strictly positive",
                ));
            }
        }
        if theta.min() <= 0.0 {
            return Err(invalid("initial.theta", "temperature must be positive"));
        }
        MixtureState::new(rho, theta).map_err(|e| invalid("initial", e.to_string()))
    }
}

/// Everything needed to reproduce a finished run: the fully resolved
/// configuration, the artifact version, wall clock, produced files, and
/// which gates fired.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub wall_clock_seconds: f64,
    pub output_files: Vec<String>,
    pub gates: GateSummary,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateSummary {
    pub entropy_pass: bool,
    pub positivity_pass: bool,
    pub conservation_flagged: bool,
    pub violations: Vec<String>,
}
