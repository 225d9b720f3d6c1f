//! Experiment configuration read from TOML.
//!
//! ```toml
//! example = "5.1"            # "5.1", "5.2" or "custom" (then [problem] is required)
//! mesh_base = 8              # divisions of the coarsest mesh, multiple of 4
//! mesh_levels = [0, 1, 2]    # refinement levels of the study points
//! time_steps = [20]          # numbers of time intervals of the study points
//! control_discretization = "parameter"
//! samples_per_interval = 4   # parameter_variational only
//! tol_outer = 1e-8
//! tol_inner = 1e-10          # default min(1e-8, 1e-2 tol_outer)
//! outputs = "output"
//!
//! [reference]
//! level = 3
//! time_steps = 20
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::ControlDiscretization;
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::time_solver::coupled_inner_tolerance;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub level: usize,
    pub time_steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    example: Option<String>,
    problem: Option<ProblemSpec>,
    mesh_base: Option<usize>,
    mesh_levels: Option<Vec<usize>>,
    time_steps: Option<Vec<usize>>,
    reference: Option<ReferenceSpec>,
    control_discretization: Option<String>,
    samples_per_interval: Option<usize>,
    tol_outer: Option<f64>,
    tol_inner: Option<f64>,
    max_inner_iter: Option<usize>,
    accelerate: Option<bool>,
    bank_capacity: Option<usize>,
    nu0: Option<f64>,
    outputs: Option<PathBuf>,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub example: String,
    pub problem: ProblemSpec,
    pub mesh_base: usize,
    pub mesh_levels: Vec<usize>,
    pub time_steps: Vec<usize>,
    pub reference: Option<ReferenceSpec>,
    pub control_discretization: ControlDiscretization,
    pub tol_outer: f64,
    pub tol_inner: f64,
    pub max_inner_iter: usize,
    pub accelerate: bool,
    pub bank_capacity: usize,
    pub nu0: f64,
    pub outputs: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for one of the built-in examples.
    pub fn for_example(name: &str) -> Result<Self> {
        parse_config(&format!("example = \"{name}\""))
    }

    /// Study points in the order `(level, M)`, levels outermost.
    pub fn study_points(&self) -> Vec<(usize, usize)> {
        let mut pts = Vec::new();
        for &l in &self.mesh_levels {
            for &m in &self.time_steps {
                pts.push((l, m));
            }
        }
        pts
    }

    /// The resolved configuration as TOML, for output headers.
    pub fn echo(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("unserializable config: {e}"))
    }

    fn validate(&self) -> Result<()> {
        if self.mesh_base < 4 || !self.mesh_base.is_multiple_of(4) {
            return Err(Error::config("mesh_base", format!("must be a positive multiple of 4, got {}", self.mesh_base)));
        }
        if self.mesh_levels.is_empty() {
            return Err(Error::config("mesh_levels", "must not be empty"));
        }
        if self.mesh_levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("mesh_levels", "must be strictly increasing"));
        }
        if self.time_steps.is_empty() || self.time_steps.contains(&0) {
            return Err(Error::config("time_steps", "must be a non-empty list of positive integers"));
        }
        if self.time_steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("time_steps", "must be strictly increasing"));
        }
        if !(self.tol_outer > 0.0) {
            return Err(Error::config("tol_outer", "must be positive"));
        }
        if !(self.tol_inner > 0.0) {
            return Err(Error::config("tol_inner", "must be positive"));
        }
        if !(self.nu0 > 0.0) {
            return Err(Error::config("nu0", "must be positive"));
        }
        if !(self.problem.delta0 > 0.0) {
            return Err(Error::config("problem.delta0", "must be positive"));
        }
        if let Some(r) = &self.reference {
            for (l, m) in self.study_points() {
                if r.level < l || r.time_steps < m || (r.level == l && r.time_steps == m) {
                    return Err(Error::config(
                        "reference",
                        format!("({}, {}) is not strictly finer than study point ({l}, {m})", r.level, r.time_steps),
                    ));
                }
                if r.time_steps % m != 0 {
                    return Err(Error::config(
                        "reference.time_steps",
                        format!("{} is not a multiple of {m}; time grids must be nested", r.time_steps),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn parse_discretization(name: &str, samples: usize) -> Result<ControlDiscretization> {
    match name {
        "parameter" => Ok(ControlDiscretization::Parameter),
        "parameter_variational" => Ok(ControlDiscretization::ParameterVariational { samples }),
        "distributed_cellwise" => Ok(ControlDiscretization::DistributedCellwise),
        "distributed_variational" => Ok(ControlDiscretization::DistributedVariational),
        other => Err(Error::config(
            "control_discretization",
            format!("unknown value `{other}`; expected parameter, parameter_variational, distributed_cellwise or distributed_variational"),
        )),
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        let field = message
            .split('`')
            .nth(1)
            .filter(|_| message.contains("field"))
            .unwrap_or("document")
            .to_string();
        Error::config(field, message)
    })?;
    let example = raw.example.unwrap_or_else(|| "5.1".into());
    let problem = match (example.as_str(), raw.problem) {
        ("custom", Some(p)) => p,
        ("custom", None) => return Err(Error::config("problem", "example = \"custom\" needs a [problem] table")),
        (name, None) => ProblemSpec::by_name(name)
            .ok_or_else(|| Error::config("example", format!("unknown example `{name}`; expected 5.1, 5.2 or custom")))?,
        (_, Some(_)) => return Err(Error::config("problem", "only allowed with example = \"custom\"")),
    };
    let samples = raw.samples_per_interval.unwrap_or(4);
    if samples == 0 {
        return Err(Error::config("samples_per_interval", "must be positive"));
    }
    let control_discretization = match raw.control_discretization {
        Some(name) => parse_discretization(&name, samples)?,
        None => problem.default_discretization(),
    };
    let tol_outer = raw.tol_outer.unwrap_or(1e-8);
    let cfg = ExperimentConfig {
        example,
        problem,
        mesh_base: raw.mesh_base.unwrap_or(8),
        mesh_levels: raw.mesh_levels.unwrap_or_else(|| vec![0]),
        time_steps: raw.time_steps.unwrap_or_else(|| vec![20]),
        reference: raw.reference,
        control_discretization,
        tol_outer,
        tol_inner: raw.tol_inner.unwrap_or_else(|| coupled_inner_tolerance(tol_outer)),
        max_inner_iter: raw.max_inner_iter.unwrap_or(5000),
        accelerate: raw.accelerate.unwrap_or(true),
        bank_capacity: raw.bank_capacity.unwrap_or(200),
        nu0: raw.nu0.unwrap_or(1.0),
        outputs: raw.outputs.unwrap_or_else(|| PathBuf::from("output")),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_config(&text)
}
