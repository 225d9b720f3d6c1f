//! Problem data and its discretization on a given mesh and time grid.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{Bounds, ControlDiscretization, ControlOperatorSpec, ControlSpace};
use crate::distance::{DenseParameterObservation, ObservationOperator, SweepObservation};
use crate::error::Result;
use crate::fem::{l2_project, AssembledOperators, NodalField};
use crate::mesh::{build_unit_square, SubdomainSpec};
use crate::parabolic::{LinearSolver, TimeGrid};

/// Closed-form initial values and targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSpec {
    Zero,
    /// `4 sin(pi x^2) sin(pi y^3)`
    SinSquareSinCube,
    /// `4 sin(pi x^2) sin(pi y)^3`
    SinSquareSinPowCube,
    /// `-2 min(x, 1 - x, y, 1 - y)`
    NegativeBoundaryDistance,
    /// `sin(pi x) sin(pi y)`
    FirstEigenfunction,
}

impl FieldSpec {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            FieldSpec::Zero => 0.0,
            FieldSpec::SinSquareSinCube => 4.0 * (PI * x * x).sin() * (PI * y.powi(3)).sin(),
            FieldSpec::SinSquareSinPowCube => 4.0 * (PI * x * x).sin() * (PI * y).sin().powi(3),
            FieldSpec::NegativeBoundaryDistance => -2.0 * x.min(1.0 - x).min(y).min(1.0 - y),
            FieldSpec::FirstEigenfunction => (PI * x).sin() * (PI * y).sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub initial: FieldSpec,
    pub target: FieldSpec,
    pub control: ControlOperatorSpec,
    pub bounds: Bounds,
    pub delta0: f64,
}

impl ProblemSpec {
    /// Two form functions on `(0, 1/2) x (0, 1)` and `(1/2, 1) x (0, 1/2)`.
    pub fn example_5_1() -> Self {
        Self {
            name: "5.1".into(),
            initial: FieldSpec::SinSquareSinCube,
            target: FieldSpec::Zero,
            control: ControlOperatorSpec::Parameter {
                regions: vec![
                    SubdomainSpec { x0: 0.0, x1: 0.5, y0: 0.0, y1: 1.0 },
                    SubdomainSpec { x0: 0.5, x1: 1.0, y0: 0.0, y1: 0.5 },
                ],
            },
            bounds: Bounds { lower: -1.5, upper: 0.0 },
            delta0: 0.1,
        }
    }

    /// Distributed control on `(0, 3/4)^2`.
    pub fn example_5_2() -> Self {
        Self {
            name: "5.2".into(),
            initial: FieldSpec::SinSquareSinPowCube,
            target: FieldSpec::NegativeBoundaryDistance,
            control: ControlOperatorSpec::Distributed {
                omega: SubdomainSpec { x0: 0.0, x1: 0.75, y0: 0.0, y1: 0.75 },
            },
            bounds: Bounds { lower: -5.0, upper: 0.0 },
            delta0: 0.1,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "5.1" => Some(Self::example_5_1()),
            "5.2" => Some(Self::example_5_2()),
            _ => None,
        }
    }

    /// Discretization a problem is studied with unless configured otherwise.
    pub fn default_discretization(&self) -> ControlDiscretization {
        match self.control {
            ControlOperatorSpec::Parameter { .. } => ControlDiscretization::Parameter,
            ControlOperatorSpec::Distributed { .. } => ControlDiscretization::DistributedCellwise,
        }
    }
}

/// A problem on a fixed mesh level and time grid.
pub struct DiscreteProblem {
    pub spec: ProblemSpec,
    pub ops: Arc<AssembledOperators>,
    pub space: ControlSpace,
    pub grid: TimeGrid,
    /// `Pi_h u0`.
    pub u0: NodalField,
    /// `Pi_h u_d`.
    pub ud: NodalField,
    pub solver: LinearSolver,
    /// Use precomputed responses for parameter controls on uniform grids.
    pub dense_observation: bool,
}

impl DiscreteProblem {
    pub fn new(
        spec: &ProblemSpec,
        base: usize,
        level: usize,
        grid: TimeGrid,
        discretization: ControlDiscretization,
    ) -> Result<Self> {
        let ops = Arc::new(AssembledOperators::new(Arc::new(build_unit_square(base, level)?)));
        Self::on_operators(spec, ops, grid, discretization)
    }

    pub fn on_operators(
        spec: &ProblemSpec,
        ops: Arc<AssembledOperators>,
        grid: TimeGrid,
        discretization: ControlDiscretization,
    ) -> Result<Self> {
        let space = ControlSpace::new(&ops, &spec.control, discretization, spec.bounds)?;
        let initial = spec.initial;
        let target = spec.target;
        let u0 = l2_project(&ops, |x, y| initial.eval(x, y))?;
        let ud = l2_project(&ops, |x, y| target.eval(x, y))?;
        Ok(Self {
            spec: spec.clone(),
            ops,
            space,
            grid,
            u0,
            ud,
            solver: LinearSolver::default(),
            dense_observation: true,
        })
    }

    pub fn observation_operator(&self, nu: f64) -> Result<Box<dyn ObservationOperator + '_>> {
        let uniform = self.grid.steps().iter().all(|&k| k == self.grid.step(0));
        if self.dense_observation && uniform && self.space.parameter_forms().is_some() {
            Ok(Box::new(DenseParameterObservation::new(
                &self.ops,
                &self.space,
                &self.grid,
                nu,
                &self.u0,
                self.solver,
            )?))
        } else {
            Ok(Box::new(SweepObservation::new(
                &self.ops,
                &self.space,
                &self.grid,
                nu,
                &self.u0,
                self.solver,
            )?))
        }
    }

    /// `|Pi_h u0 - Pi_h u_d|_M - delta0`, the value function at `nu = 0`.
    pub fn initial_excess(&self) -> f64 {
        self.ops.l2_norm(&self.u0.sub(&self.ud)) - self.spec.delta0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_data() {
        let a = ProblemSpec::example_5_1();
        assert_eq!(a.bounds, Bounds { lower: -1.5, upper: 0.0 });
        assert_eq!(a.delta0, 0.1);
        match &a.control {
            ControlOperatorSpec::Parameter { regions } => assert_eq!(regions.len(), 2),
            _ => panic!(),
        }
        let b = ProblemSpec::example_5_2();
        assert_eq!(b.bounds.lower, -5.0);
        assert!((FieldSpec::NegativeBoundaryDistance.eval(0.5, 0.5) + 1.0).abs() < 1e-15);
        assert!((FieldSpec::SinSquareSinCube.eval(0.5f64.sqrt(), 0.5f64.powf(1.0 / 3.0)) - 4.0).abs() < 1e-12);
        assert!((FieldSpec::SinSquareSinPowCube.eval(0.5f64.sqrt(), 0.5) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn initial_state_violates_constraint() {
        for spec in [ProblemSpec::example_5_1(), ProblemSpec::example_5_2()] {
            let p = DiscreteProblem::new(&spec, 8, 0, TimeGrid::uniform(4).unwrap(), spec.default_discretization()).unwrap();
            assert!(p.initial_excess() > 0.0);
        }
    }
}
