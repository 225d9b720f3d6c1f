//! dG(0) time stepping of the transformed heat equation on the reference
//! interval `(0, 1)` and of its discrete adjoint.
//!
//! With interval coefficients `U_m` the state sweep reads
//! `(M + nu k_m A) U_m = M U_{m-1} + nu k_m b_m`, `U_0 = Pi_h u0`, where `b_m`
//! is the load of the control on `I_m`. The adjoint sweep runs backwards:
//! `(M + nu k_M A) Z_M = mu M v` and `(M + nu k_m A) Z_m = M Z_{m+1}`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fem::{AssembledOperators, NodalField};
use crate::linalg::{cg_solve_from, BandedCholesky, CsrMatrix};

/// Largest admitted ratio between the biggest and the smallest step.
pub const MAX_STEP_RATIO: f64 = 10.0;

/// Partition `0 = t_0 < ... < t_M = 1` of the reference interval.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    steps: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidTimeGrid("at least one interval is required".into()));
        }
        let k = 1.0 / intervals as f64;
        let mut nodes: Vec<f64> = (0..=intervals).map(|m| m as f64 / intervals as f64).collect();
        nodes[intervals] = 1.0;
        Ok(Self {
            nodes,
            steps: vec![k; intervals],
        })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 || (nodes[nodes.len() - 1] - 1.0).abs() > 1e-14 {
            return Err(Error::InvalidTimeGrid("nodes must run from 0 to 1".into()));
        }
        let steps: Vec<f64> = nodes.windows(2).map(|w| w[1] - w[0]).collect();
        if steps.iter().any(|&k| k <= 0.0 || !k.is_finite()) {
            return Err(Error::InvalidTimeGrid("nodes must be strictly increasing".into()));
        }
        let kmax = steps.iter().copied().fold(0.0, f64::max);
        let kmin = steps.iter().copied().fold(f64::INFINITY, f64::min);
        if kmax / kmin > MAX_STEP_RATIO {
            return Err(Error::InvalidTimeGrid(format!(
                "step ratio {:.3} exceeds {MAX_STEP_RATIO}",
                kmax / kmin
            )));
        }
        Ok(Self { nodes, steps })
    }

    /// Number of intervals `M`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Size of interval `m` (0-based).
    pub fn step(&self, m: usize) -> f64 {
        self.steps[m]
    }

    pub fn max_step(&self) -> f64 {
        self.steps.iter().copied().fold(0.0, f64::max)
    }

    /// For a grid refining `coarse`, the coarse interval containing each
    /// interval of `self`.
    pub fn parent_intervals(&self, coarse: &TimeGrid) -> Result<Vec<usize>> {
        let tol = 1e-12;
        let mut map = Vec::with_capacity(self.len());
        let mut c = 0;
        for m in 0..self.len() {
            let (a, b) = (self.nodes[m], self.nodes[m + 1]);
            while c + 1 < coarse.len() && coarse.nodes[c + 1] <= a + tol {
                c += 1;
            }
            if b > coarse.nodes[c + 1] + tol {
                return Err(Error::NotNested(format!(
                    "interval ({a}, {b}) crosses the coarse node {}",
                    coarse.nodes[c + 1]
                )));
            }
            map.push(c);
        }
        Ok(map)
    }
}

/// dG(0) coefficients, one field per interval.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub coeffs: Vec<NodalField>,
    /// `Pi_h u0` for state trajectories.
    pub initial_value: Option<NodalField>,
}

/// Final value `U_M`.
pub fn observation(traj: &Trajectory) -> &NodalField {
    traj.coeffs.last().expect("trajectories hold at least one interval")
}

/// Solver for the per-step systems `M + nu k_m A`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum LinearSolver {
    #[default]
    BandedCholesky,
    JacobiCg { tol: f64 },
}

enum StepSystem {
    Cholesky(BandedCholesky),
    Cg { matrix: CsrMatrix, tol: f64 },
}

/// Step systems of one `(nu, grid)` pair, factored once per distinct `nu k_m`.
pub struct Propagator<'a> {
    ops: &'a AssembledOperators,
    grid: TimeGrid,
    nu: f64,
    systems: Vec<StepSystem>,
    system_of_step: Vec<usize>,
}

impl<'a> Propagator<'a> {
    pub fn new(ops: &'a AssembledOperators, grid: &TimeGrid, nu: f64, solver: LinearSolver) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::NonPositiveTimeScale(nu));
        }
        let mut by_scale: HashMap<u64, usize> = HashMap::new();
        let mut systems = Vec::new();
        let mut system_of_step = Vec::with_capacity(grid.len());
        for &k in grid.steps() {
            let c = nu * k;
            let idx = match by_scale.get(&c.to_bits()) {
                Some(&i) => i,
                None => {
                    let matrix = ops.mass.linear_combination(1.0, &ops.stiffness, c);
                    let system = match solver {
                        LinearSolver::BandedCholesky => StepSystem::Cholesky(BandedCholesky::factor(&matrix)?),
                        LinearSolver::JacobiCg { tol } => StepSystem::Cg { matrix, tol },
                    };
                    systems.push(system);
                    by_scale.insert(c.to_bits(), systems.len() - 1);
                    systems.len() - 1
                }
            };
            system_of_step.push(idx);
        }
        Ok(Self {
            ops,
            grid: grid.clone(),
            nu,
            systems,
            system_of_step,
        })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn ops(&self) -> &AssembledOperators {
        self.ops
    }

    fn solve_step(&self, m: usize, rhs: Vec<f64>, guess: Option<&[f64]>) -> Result<Vec<f64>> {
        match &self.systems[self.system_of_step[m]] {
            StepSystem::Cholesky(chol) => {
                let mut x = rhs;
                chol.solve_in_place(&mut x);
                Ok(x)
            }
            StepSystem::Cg { matrix, tol } => {
                let x0 = guess.map_or_else(|| vec![0.0; rhs.len()], <[f64]>::to_vec);
                cg_solve_from(matrix, &rhs, x0, *tol)
            }
        }
    }

    /// Forward sweep. `load(m, b)` writes the control load on `I_m` into `b`
    /// (zeroed beforehand); `visit(m, U_m)` sees every coefficient.
    pub fn sweep_state(
        &self,
        u0: &[f64],
        mut load: impl FnMut(usize, &mut [f64]),
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<NodalField> {
        let n = self.ops.n_dofs();
        if u0.len() != n {
            return Err(Error::Dimension { expected: n, got: u0.len() });
        }
        let mut u = u0.to_vec();
        let mut b = vec![0.0; n];
        for m in 0..self.grid.len() {
            let mut rhs = self.ops.mass.mul_vec(&u);
            b.iter_mut().for_each(|x| *x = 0.0);
            load(m, &mut b);
            let c = self.nu * self.grid.step(m);
            for (r, bi) in rhs.iter_mut().zip(&b) {
                *r += c * bi;
            }
            u = self.solve_step(m, rhs, Some(&u))?;
            visit(m, &u);
        }
        Ok(NodalField(u))
    }

    pub fn state(&self, u0: &[f64], load: impl FnMut(usize, &mut [f64])) -> Result<Trajectory> {
        let mut coeffs = Vec::with_capacity(self.grid.len());
        self.sweep_state(u0, load, |_, u| coeffs.push(NodalField(u.to_vec())))?;
        Ok(Trajectory {
            grid: self.grid.clone(),
            coeffs,
            initial_value: Some(NodalField(u0.to_vec())),
        })
    }

    /// Backward sweep with terminal data `mu * v`; `visit(m, Z_m)` is called
    /// for `m = M-1, ..., 0`.
    pub fn sweep_adjoint(&self, terminal: &[f64], mu: f64, mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
        let n = self.ops.n_dofs();
        if terminal.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: terminal.len(),
            });
        }
        let mut z: Vec<f64> = self.ops.mass.mul_vec(terminal).into_iter().map(|x| mu * x).collect();
        let mut prev: Option<Vec<f64>> = None;
        for m in (0..self.grid.len()).rev() {
            if let Some(p) = &prev {
                z = self.ops.mass.mul_vec(p);
            }
            let zm = self.solve_step(m, z.clone(), prev.as_deref())?;
            visit(m, &zm);
            prev = Some(zm);
        }
        Ok(())
    }

    pub fn adjoint(&self, terminal: &[f64], mu: f64) -> Result<Trajectory> {
        let mut coeffs = vec![NodalField::default(); self.grid.len()];
        self.sweep_adjoint(terminal, mu, |m, z| coeffs[m] = NodalField(z.to_vec()))?;
        Ok(Trajectory {
            grid: self.grid.clone(),
            coeffs,
            initial_value: None,
        })
    }
}

/// State trajectory for per-interval loads `loads[m]` (no control if empty).
pub fn solve_state(
    ops: &AssembledOperators,
    grid: &TimeGrid,
    nu: f64,
    loads: &[NodalField],
    u0: &NodalField,
) -> Result<Trajectory> {
    if !loads.is_empty() && loads.len() != grid.len() {
        return Err(Error::Dimension {
            expected: grid.len(),
            got: loads.len(),
        });
    }
    let prop = Propagator::new(ops, grid, nu, LinearSolver::default())?;
    prop.state(u0, |m, b| {
        if let Some(l) = loads.get(m) {
            b.copy_from_slice(l);
        }
    })
}

/// Adjoint trajectory with terminal value `mu * terminal`.
pub fn solve_adjoint(
    ops: &AssembledOperators,
    grid: &TimeGrid,
    nu: f64,
    terminal: &NodalField,
    mu: f64,
) -> Result<Trajectory> {
    Propagator::new(ops, grid, nu, LinearSolver::default())?.adjoint(terminal, mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::l2_project;
    use crate::linalg::dot;
    use crate::mesh::build_unit_square;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn ops(base: usize) -> AssembledOperators {
        AssembledOperators::new(Arc::new(build_unit_square(base, 0).unwrap()))
    }

    #[test]
    fn time_grid_validation() {
        let g = TimeGrid::uniform(4).unwrap();
        assert_eq!(g.len(), 4);
        assert!((g.steps().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(TimeGrid::uniform(0).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.4, 1.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.05, 1.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.3, 1.0]).is_ok());
        let fine = TimeGrid::uniform(8).unwrap();
        assert_eq!(fine.parent_intervals(&g).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let odd = TimeGrid::uniform(3).unwrap();
        assert!(fine.parent_intervals(&odd).is_err());
    }

    #[test]
    fn zero_data_gives_zero_state() {
        let o = ops(4);
        let g = TimeGrid::uniform(5).unwrap();
        let traj = solve_state(&o, &g, 1.0, &[], &NodalField::zeros(o.n_dofs())).unwrap();
        assert_eq!(traj.coeffs.len(), 5);
        assert!(traj.coeffs.iter().all(|u| u.iter().all(|&v| v == 0.0)));
        let z = solve_adjoint(&o, &g, 1.0, &NodalField::zeros(o.n_dofs()), 1.0).unwrap();
        assert!(z.coeffs.iter().all(|u| u.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_non_positive_nu() {
        let o = ops(4);
        let g = TimeGrid::uniform(2).unwrap();
        let u0 = NodalField::zeros(o.n_dofs());
        assert!(matches!(
            solve_state(&o, &g, 0.0, &[], &u0),
            Err(Error::NonPositiveTimeScale(_))
        ));
        assert!(solve_state(&o, &g, -1.0, &[], &u0).is_err());
    }

    #[test]
    fn observation_of_single_interval() {
        let o = ops(4);
        let g = TimeGrid::uniform(1).unwrap();
        let u0 = o.interpolate(|x, y| x * y * (1.0 - x) * (1.0 - y));
        let traj = solve_state(&o, &g, 0.5, &[], &u0).unwrap();
        assert_eq!(observation(&traj), &traj.coeffs[0]);
    }

    #[test]
    fn stability_without_control() {
        let o = ops(8);
        let u0 = l2_project(&o, |x, y| 4.0 * (PI * x * x).sin() * (PI * y.powi(3)).sin()).unwrap();
        for &(nu, m) in &[(0.1, 5), (1.0, 3), (10.0, 20)] {
            let g = TimeGrid::uniform(m).unwrap();
            let traj = solve_state(&o, &g, nu, &[], &u0).unwrap();
            let mut prev = o.l2_norm(&u0);
            for u in &traj.coeffs {
                let cur = o.l2_norm(u);
                assert!(cur <= prev + 1e-14);
                prev = cur;
            }
        }
    }

    #[test]
    fn time_scaling_matches_physical_steps() {
        // nu = 2 on the reference grid equals nu = 1 with doubled steps: the
        // step matrices coincide, so compare against a hand-written sweep
        let o = ops(8);
        let u0 = o.interpolate(|x, y| (PI * x).sin() * (PI * y).sin());
        let g = TimeGrid::uniform(4).unwrap();
        let traj = solve_state(&o, &g, 2.0, &[], &u0).unwrap();
        let sys = o.mass.linear_combination(1.0, &o.stiffness, 2.0 * 0.25);
        let mut u = u0.0.clone();
        for m in 0..4 {
            u = crate::linalg::cg_solve(&sys, &o.mass.mul_vec(&u), 1e-14).unwrap();
            for (a, b) in u.iter().zip(traj.coeffs[m].iter()) {
                assert!((a - b).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn adjoint_is_linear_in_multiplier() {
        let o = ops(8);
        let g = TimeGrid::uniform(6).unwrap();
        let v = o.interpolate(|x, y| x * y * (1.0 - x) * (1.0 - y));
        let z1 = solve_adjoint(&o, &g, 0.7, &v, 1.0).unwrap();
        let z2 = solve_adjoint(&o, &g, 0.7, &v, 2.0).unwrap();
        for (a, b) in z1.coeffs.iter().zip(&z2.coeffs) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn discrete_duality() {
        // sum_m nu k_m (b_m, Z_m) = mu (U_M, v)_M for u0 = 0
        let o = ops(8);
        let g = TimeGrid::uniform(16).unwrap();
        let n = o.n_dofs();
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let nu = 0.8;
        let mu = 1.7;
        let loads: Vec<NodalField> = (0..16)
            .map(|_| NodalField((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let v = NodalField((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let u = solve_state(&o, &g, nu, &loads, &NodalField::zeros(n)).unwrap();
        let z = solve_adjoint(&o, &g, nu, &v, mu).unwrap();
        let lhs: f64 = (0..16).map(|m| nu * g.step(m) * dot(&loads[m], &z.coeffs[m])).sum();
        let rhs = mu * o.mass_inner(observation(&u), &v);
        assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn cg_and_cholesky_sweeps_agree() {
        let o = ops(8);
        let g = TimeGrid::uniform(5).unwrap();
        let u0 = o.interpolate(|x, y| (PI * x).sin() * (PI * y).sin());
        let a = Propagator::new(&o, &g, 0.3, LinearSolver::BandedCholesky).unwrap();
        let b = Propagator::new(&o, &g, 0.3, LinearSolver::JacobiCg { tol: 1e-13 }).unwrap();
        let ua = a.state(&u0, |_, l| l.iter_mut().for_each(|x| *x = -1.0)).unwrap();
        let ub = b.state(&u0, |_, l| l.iter_mut().for_each(|x| *x = -1.0)).unwrap();
        for (x, y) in observation(&ua).iter().zip(observation(&ub).iter()) {
            assert!((x - y).abs() < 1e-11);
        }
    }
}
