//! Admissible controls, their discretizations and the control operator.
//!
//! Every discretization is described by per-interval degrees of freedom `d`
//! with a dual vector `L_d` (the load of the corresponding basis function).
//! `B q_m = sum_d q_{m,d} L_d` and the pairing of an adjoint field `z` with
//! dof `d` is `L_d . z`. For the variational distributed discretization the
//! dofs are the load coefficients themselves, so the control is only ever
//! materialized through its load, and atoms are built from the sign pattern
//! of the nodal adjoint.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{AssembledOperators, NodalField, Quadrature};
use crate::linalg::dot;
use crate::mesh::{Mesh, SubdomainSpec};
use crate::parabolic::TimeGrid;

/// Values of an atom where the switching function vanishes within this tolerance.
pub const TIE_TOLERANCE: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlOperatorSpec {
    /// `B q = sum_n q_n chi_{omega_n}`.
    Parameter { regions: Vec<SubdomainSpec> },
    /// Extension by zero from `omega`.
    Distributed { omega: SubdomainSpec },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlDiscretization {
    /// Piecewise constant in time with values in `R^{N_c}`.
    Parameter,
    /// Parameter control resolved on `samples` equal sub-intervals of every
    /// time interval; the state only sees interval means.
    ParameterVariational { samples: usize },
    /// Piecewise constant in time and cellwise constant on `omega`.
    DistributedCellwise,
    /// Piecewise constant in time, no spatial control grid.
    DistributedVariational,
}

impl ControlDiscretization {
    pub fn name(&self) -> &'static str {
        match self {
            ControlDiscretization::Parameter => "parameter",
            ControlDiscretization::ParameterVariational { .. } => "parameter_variational",
            ControlDiscretization::DistributedCellwise => "distributed_cellwise",
            ControlDiscretization::DistributedVariational => "distributed_variational",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::config("bounds", format!("need q_a < q_b, got ({lower}, {upper})")));
        }
        Ok(Self { lower, upper })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }

    /// Sign rule: `q_a` where `b > 0`, `q_b` where `b < 0`, midpoint otherwise.
    pub fn extremal(&self, b: f64) -> f64 {
        if b > TIE_TOLERANCE {
            self.lower
        } else if b < -TIE_TOLERANCE {
            self.upper
        } else {
            self.midpoint()
        }
    }
}

/// Coefficients `values[m * dofs + d]` on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Control {
    pub grid: TimeGrid,
    pub dofs: usize,
    pub values: Vec<f64>,
}

impl Control {
    pub fn constant(grid: &TimeGrid, dofs: usize, value: f64) -> Self {
        Self {
            grid: grid.clone(),
            dofs,
            values: vec![value; grid.len() * dofs],
        }
    }

    pub fn interval(&self, m: usize) -> &[f64] {
        &self.values[m * self.dofs..(m + 1) * self.dofs]
    }

    pub fn interval_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.values[m * self.dofs..(m + 1) * self.dofs]
    }

    /// `(1 - lambda) self + lambda other`.
    pub fn blend(&self, other: &Control, lambda: f64) -> Control {
        Control {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
enum Layout {
    Parameter { forms: Vec<Vec<f64>> },
    ParameterVariational { forms: Vec<Vec<f64>>, samples: usize },
    Cellwise(CellSet),
    Variational { cells: CellSet, support: Vec<bool> },
}

#[derive(Clone, Debug)]
struct CellSet {
    mesh: Arc<Mesh>,
    cells: Vec<usize>,
    areas: Vec<f64>,
    corner_dofs: Vec<[Option<usize>; 3]>,
    cell_to_dof: Vec<Option<usize>>,
}

impl CellSet {
    fn new(ops: &AssembledOperators, region: &SubdomainSpec) -> Result<Self> {
        let mesh = ops.mesh.clone();
        let cells = mesh.cells_in(region)?;
        let mut cell_to_dof = vec![None; mesh.n_triangles()];
        for (d, &t) in cells.iter().enumerate() {
            cell_to_dof[t] = Some(d);
        }
        Ok(Self {
            areas: cells.iter().map(|&t| mesh.area(t)).collect(),
            corner_dofs: cells
                .iter()
                .map(|&t| mesh.triangles[t].map(|v| ops.dofs.vertex_to_dof[v]))
                .collect(),
            cells,
            cell_to_dof,
            mesh,
        })
    }

    /// Exact load of the cellwise constant function `values`.
    fn add_load(&self, values: &[f64], out: &mut [f64]) {
        for (c, corners) in self.corner_dofs.iter().enumerate() {
            let w = values[c] * self.areas[c] / 3.0;
            for d in corners.iter().flatten() {
                out[*d] += w;
            }
        }
    }

    /// `\int_K z` per cell.
    fn integrals(&self, z: &[f64]) -> Vec<f64> {
        self.corner_dofs
            .iter()
            .zip(&self.areas)
            .map(|(corners, &a)| a / 3.0 * corners.iter().flatten().map(|&d| z[d]).sum::<f64>())
            .collect()
    }

    fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }
}

/// A discretized admissible set `Q_ad` together with the control operator.
#[derive(Clone, Debug)]
pub struct ControlSpace {
    pub spec: ControlOperatorSpec,
    pub discretization: ControlDiscretization,
    pub bounds: Bounds,
    n_state: usize,
    layout: Layout,
}

impl ControlSpace {
    pub fn new(
        ops: &AssembledOperators,
        spec: &ControlOperatorSpec,
        discretization: ControlDiscretization,
        bounds: Bounds,
    ) -> Result<Self> {
        let forms = |regions: &[SubdomainSpec]| -> Result<Vec<Vec<f64>>> {
            regions
                .iter()
                .map(|r| {
                    let set = CellSet::new(ops, r)?;
                    let mut load = vec![0.0; ops.n_dofs()];
                    set.add_load(&vec![1.0; set.cells.len()], &mut load);
                    Ok(load)
                })
                .collect()
        };
        let layout = match (spec, discretization) {
            (ControlOperatorSpec::Parameter { regions }, ControlDiscretization::Parameter) => {
                Layout::Parameter { forms: forms(regions)? }
            }
            (ControlOperatorSpec::Parameter { regions }, ControlDiscretization::ParameterVariational { samples }) => {
                if samples == 0 {
                    return Err(Error::config("samples", "need at least one sample per interval"));
                }
                Layout::ParameterVariational {
                    forms: forms(regions)?,
                    samples,
                }
            }
            (ControlOperatorSpec::Distributed { omega }, ControlDiscretization::DistributedCellwise) => {
                Layout::Cellwise(CellSet::new(ops, omega)?)
            }
            (ControlOperatorSpec::Distributed { omega }, ControlDiscretization::DistributedVariational) => {
                let cells = CellSet::new(ops, omega)?;
                let mut support = vec![false; ops.n_dofs()];
                for d in cells.corner_dofs.iter().flatten().flatten() {
                    support[*d] = true;
                }
                Layout::Variational { cells, support }
            }
            _ => {
                return Err(Error::config(
                    "control_discretization",
                    format!("{} does not fit the control operator", discretization.name()),
                ))
            }
        };
        Ok(Self {
            spec: spec.clone(),
            discretization,
            bounds,
            n_state: ops.n_dofs(),
            layout,
        })
    }

    pub fn dofs_per_interval(&self) -> usize {
        match &self.layout {
            Layout::Parameter { forms } => forms.len(),
            Layout::ParameterVariational { forms, samples } => forms.len() * samples,
            Layout::Cellwise(set) => set.cells.len(),
            Layout::Variational { .. } => self.n_state,
        }
    }

    /// Form loads and samples per interval of parameter layouts.
    pub fn parameter_forms(&self) -> Option<(&[Vec<f64>], usize)> {
        match &self.layout {
            Layout::Parameter { forms } => Some((forms, 1)),
            Layout::ParameterVariational { forms, samples } => Some((forms, *samples)),
            _ => None,
        }
    }

    /// Whether atoms take values in `{q_a, q_b, (q_a + q_b) / 2}` coefficientwise.
    pub fn has_extremal_coefficients(&self) -> bool {
        !self.is_variational_distributed()
    }

    pub fn is_variational_distributed(&self) -> bool {
        matches!(self.layout, Layout::Variational { .. })
    }

    /// Measure of `omega` (counting measure for parameter controls).
    pub fn omega_measure(&self) -> f64 {
        match &self.layout {
            Layout::Parameter { forms } | Layout::ParameterVariational { forms, .. } => forms.len() as f64,
            Layout::Cellwise(set) | Layout::Variational { cells: set, .. } => set.total_area(),
        }
    }

    /// Weight of dof `d` in `\int_\omega` and in the time integral over its
    /// interval (relative to `k_m`). Not defined for the variational
    /// distributed layout.
    pub fn dof_measure(&self, d: usize) -> f64 {
        match &self.layout {
            Layout::Parameter { .. } => 1.0,
            Layout::ParameterVariational { samples, .. } => 1.0 / *samples as f64,
            Layout::Cellwise(set) => set.areas[d],
            Layout::Variational { .. } => f64::NAN,
        }
    }

    pub fn midpoint_control(&self, grid: &TimeGrid) -> Control {
        let mut q = Control::constant(grid, self.dofs_per_interval(), self.bounds.midpoint());
        if let Layout::Variational { .. } = &self.layout {
            for m in 0..grid.len() {
                let load = self.constant_load(self.bounds.midpoint());
                q.interval_mut(m).copy_from_slice(&load);
            }
        }
        q
    }

    pub fn zero_control(&self, grid: &TimeGrid) -> Control {
        Control::constant(grid, self.dofs_per_interval(), 0.0)
    }

    /// Control constant in time and space with value `v`.
    pub fn constant_control(&self, grid: &TimeGrid, v: f64) -> Control {
        match &self.layout {
            Layout::Variational { .. } => {
                let load = self.constant_load(v);
                let mut q = self.zero_control(grid);
                for m in 0..grid.len() {
                    q.interval_mut(m).copy_from_slice(&load);
                }
                q
            }
            _ => Control::constant(grid, self.dofs_per_interval(), v),
        }
    }

    fn constant_load(&self, v: f64) -> Vec<f64> {
        let mut load = vec![0.0; self.n_state];
        if let Layout::Variational { cells, .. } = &self.layout {
            cells.add_load(&vec![v; cells.cells.len()], &mut load);
        }
        load
    }

    fn check_len(&self, q_m: &[f64]) -> Result<()> {
        if q_m.len() != self.dofs_per_interval() {
            return Err(Error::Dimension {
                expected: self.dofs_per_interval(),
                got: q_m.len(),
            });
        }
        Ok(())
    }

    /// Adds the load of `B q_m` to `out`.
    pub fn add_load(&self, q_m: &[f64], out: &mut [f64]) {
        match &self.layout {
            Layout::Parameter { forms } => {
                for (q, form) in q_m.iter().zip(forms) {
                    if *q != 0.0 {
                        for (o, f) in out.iter_mut().zip(form) {
                            *o += q * f;
                        }
                    }
                }
            }
            Layout::ParameterVariational { forms, samples } => {
                let nc = forms.len();
                for (n, form) in forms.iter().enumerate() {
                    let mean = (0..*samples).map(|s| q_m[s * nc + n]).sum::<f64>() / *samples as f64;
                    if mean != 0.0 {
                        for (o, f) in out.iter_mut().zip(form) {
                            *o += mean * f;
                        }
                    }
                }
            }
            Layout::Cellwise(set) => set.add_load(q_m, out),
            Layout::Variational { .. } => {
                for (o, q) in out.iter_mut().zip(q_m) {
                    *o += q;
                }
            }
        }
    }

    /// Load vector of `B q_m`.
    pub fn apply_b(&self, q_m: &[f64]) -> Result<NodalField> {
        self.check_len(q_m)?;
        let mut out = vec![0.0; self.n_state];
        self.add_load(q_m, &mut out);
        Ok(NodalField(out))
    }

    /// Dual pairing `L_d . z` for every dof, so that `(B q, z) = q . pairing(z)`.
    pub fn apply_bstar_dual(&self, z: &[f64]) -> Vec<f64> {
        match &self.layout {
            Layout::Parameter { forms } => forms.iter().map(|f| dot(f, z)).collect(),
            Layout::ParameterVariational { forms, samples } => {
                let per: Vec<f64> = forms.iter().map(|f| dot(f, z) / *samples as f64).collect();
                (0..*samples).flat_map(|_| per.iter().copied()).collect()
            }
            Layout::Cellwise(set) => set.integrals(z),
            Layout::Variational { support, .. } => z
                .iter()
                .zip(support)
                .map(|(v, &s)| if s { *v } else { 0.0 })
                .collect(),
        }
    }

    /// `B^* z` per dof: `\int e_n z` for parameter controls, cell means of `z`
    /// for cellwise controls, the nodal restriction to `omega` otherwise.
    pub fn apply_bstar(&self, z: &[f64]) -> Vec<f64> {
        let dual = self.apply_bstar_dual(z);
        match &self.layout {
            Layout::Parameter { .. } | Layout::Variational { .. } => dual,
            Layout::ParameterVariational { samples, .. } => dual.iter().map(|v| v * *samples as f64).collect(),
            Layout::Cellwise(set) => dual.iter().zip(&set.areas).map(|(v, a)| v / a).collect(),
        }
    }

    /// Normalizes pairing values of one interval to `B^* z` values.
    pub fn pairing_to_bstar(&self, d: usize, pairing: f64) -> f64 {
        match &self.layout {
            Layout::Parameter { .. } | Layout::Variational { .. } => pairing,
            Layout::ParameterVariational { samples, .. } => pairing * *samples as f64,
            Layout::Cellwise(set) => pairing / set.areas[d],
        }
    }

    /// Atom of the conditional gradient step for one interval, given the
    /// pairing values of the adjoint (`apply_bstar_dual`).
    pub fn select_atom_interval(&self, pairing: &[f64], out: &mut [f64]) {
        match &self.layout {
            Layout::Variational { cells, .. } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                variational_atom_load(cells, &self.bounds, pairing, out);
            }
            _ => {
                for (d, (o, p)) in out.iter_mut().zip(pairing).enumerate() {
                    *o = self.bounds.extremal(self.pairing_to_bstar(d, *p));
                }
            }
        }
    }

    /// Coefficientwise clamp into the bounds. Loads of the variational
    /// layout are returned unchanged.
    pub fn clamp_admissible(&self, q: &Control) -> Control {
        if self.is_variational_distributed() {
            return q.clone();
        }
        Control {
            values: q.values.iter().map(|&v| self.bounds.clamp(v)).collect(),
            ..q.clone()
        }
    }

    /// Interval means of a variational-in-time control; identity otherwise.
    pub fn interval_means(&self, q: &Control) -> Result<Control> {
        match &self.layout {
            Layout::ParameterVariational { forms, samples } => {
                let nc = forms.len();
                let mut out = Control::constant(&q.grid, nc, 0.0);
                for m in 0..q.grid.len() {
                    let qm = q.interval(m);
                    for n in 0..nc {
                        out.values[m * nc + n] = (0..*samples).map(|s| qm[s * nc + n]).sum::<f64>() / *samples as f64;
                    }
                }
                Ok(out)
            }
            _ => Ok(q.clone()),
        }
    }

    /// Time grid and per-sub-interval coefficients on which the control is
    /// piecewise constant.
    fn expanded(&self, q: &Control) -> Result<(TimeGrid, usize, Vec<f64>)> {
        match &self.layout {
            Layout::ParameterVariational { forms, samples } => {
                let nc = forms.len();
                let mut nodes = vec![0.0];
                for m in 0..q.grid.len() {
                    let (a, b) = (q.grid.nodes()[m], q.grid.nodes()[m + 1]);
                    for s in 1..=*samples {
                        nodes.push(if s == *samples { b } else { a + (b - a) * s as f64 / *samples as f64 });
                    }
                }
                let grid = TimeGrid::from_nodes(nodes)?;
                Ok((grid, nc, q.values.clone()))
            }
            Layout::Variational { .. } => Err(Error::Unsupported(
                "variational distributed controls have no explicit coefficients".into(),
            )),
            _ => Ok((q.grid.clone(), q.dofs, q.values.clone())),
        }
    }

    /// Parent cell map for spatially nested cellwise spaces: dof of `coarse`
    /// containing each dof of `self`.
    fn parent_dofs(&self, coarse: &ControlSpace) -> Result<Vec<usize>> {
        match (&self.layout, &coarse.layout) {
            (Layout::Cellwise(fine), Layout::Cellwise(cs)) => {
                if fine.mesh.base_divisions != cs.mesh.base_divisions || fine.mesh.level < cs.mesh.level {
                    return Err(Error::NotNested("cellwise controls on unrelated meshes".into()));
                }
                fine.cells
                    .iter()
                    .map(|&t| {
                        let parent = cs.mesh.locate(fine.mesh.barycenter(t));
                        cs.cell_to_dof[parent]
                            .ok_or_else(|| Error::NotNested("control domains differ".into()))
                    })
                    .collect()
            }
            _ => {
                let nc = |l: &Layout| match l {
                    Layout::Parameter { forms } | Layout::ParameterVariational { forms, .. } => Some(forms.len()),
                    _ => None,
                };
                match (nc(&self.layout), nc(&coarse.layout)) {
                    (Some(a), Some(b)) if a == b => Ok((0..a).collect()),
                    _ => Err(Error::NotNested("control spaces of different kinds".into())),
                }
            }
        }
    }

    /// Serializes as `m dof value` lines below a header.
    pub fn control_to_text(&self, q: &Control, header: &str) -> String {
        let mut out = String::new();
        for line in header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "# intervals {}", q.grid.len());
        let _ = writeln!(out, "# kind {}", self.discretization.name());
        let _ = writeln!(out, "# bounds {} {}", self.bounds.lower, self.bounds.upper);
        let _ = writeln!(out, "# dofs {}", q.dofs);
        for m in 0..q.grid.len() {
            for (d, v) in q.interval(m).iter().enumerate() {
                let _ = writeln!(out, "{m} {d} {v:e}");
            }
        }
        out
    }
}

/// Reads the coefficients written by [`ControlSpace::control_to_text`] onto `grid`.
pub fn control_from_text(text: &str, grid: &TimeGrid) -> Result<Control> {
    let mut dofs = None;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            if it.next() == Some("dofs") {
                dofs = it.next().and_then(|v| v.parse::<usize>().ok());
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse_err = || Error::config("control file", format!("malformed line {}", lineno + 1));
        if parts.len() != 3 {
            return Err(parse_err());
        }
        let m: usize = parts[0].parse().map_err(|_| parse_err())?;
        let d: usize = parts[1].parse().map_err(|_| parse_err())?;
        let v: f64 = parts[2].parse().map_err(|_| parse_err())?;
        entries.push((m, d, v));
    }
    let dofs = dofs.ok_or_else(|| Error::config("control file", "missing dofs header"))?;
    let mut q = Control::constant(grid, dofs, 0.0);
    for (m, d, v) in entries {
        if m >= grid.len() || d >= dofs {
            return Err(Error::Dimension {
                expected: grid.len() * dofs,
                got: m * dofs + d,
            });
        }
        q.values[m * dofs + d] = v;
    }
    Ok(q)
}

/// L2 projection onto piecewise constants in time: interval means of `f`
/// (one value per dof) by 5-point Gauss-Legendre quadrature.
pub fn project_pk(f: impl Fn(f64) -> Vec<f64>, grid: &TimeGrid, dofs: usize) -> Control {
    const X: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683,
        0.0,
        0.538_469_310_105_683,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.236_926_885_056_189,
        0.478_628_670_499_366,
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
    ];
    let mut q = Control::constant(grid, dofs, 0.0);
    for m in 0..grid.len() {
        let (a, b) = (grid.nodes()[m], grid.nodes()[m + 1]);
        let out = q.interval_mut(m);
        for (x, w) in X.iter().zip(W) {
            let t = 0.5 * (a + b) + 0.5 * (b - a) * x;
            for (o, v) in out.iter_mut().zip(f(t)) {
                *o += 0.5 * w * v;
            }
        }
    }
    q
}

/// Interval means of a control given on a refinement of `coarse`.
pub fn project_pk_nested(fine: &Control, coarse: &TimeGrid) -> Result<Control> {
    let parents = fine.grid.parent_intervals(coarse)?;
    let mut q = Control::constant(coarse, fine.dofs, 0.0);
    for (m, &c) in parents.iter().enumerate() {
        let w = fine.grid.step(m) / coarse.step(c);
        for d in 0..fine.dofs {
            q.values[c * fine.dofs + d] += w * fine.values[m * fine.dofs + d];
        }
    }
    Ok(q)
}

/// L2(omega) projection onto cellwise constants: cell means of `f` over the
/// cells of `omega`.
pub fn project_ph0(mesh: &Mesh, omega: &SubdomainSpec, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
    let pts = Quadrature::Degree4.points();
    Ok(mesh
        .cells_in(omega)?
        .into_iter()
        .map(|t| {
            let c = mesh.corners(t);
            pts.iter()
                .map(|(b, w)| {
                    let x = b[0] * c[0][0] + b[1] * c[1][0] + b[2] * c[2][0];
                    let y = b[0] * c[0][1] + b[1] * c[1][1] + b[2] * c[2][1];
                    w * f(x, y)
                })
                .sum()
        })
        .collect())
}

/// `\int_I \int_omega |q1 - q2|` for controls on nested time grids and
/// nested meshes. Parameter controls use the counting measure on `omega`.
pub fn l1_distance(s1: &ControlSpace, q1: &Control, s2: &ControlSpace, q2: &Control) -> Result<f64> {
    let (g1, d1, v1) = s1.expanded(q1)?;
    let (g2, d2, v2) = s2.expanded(q2)?;
    // orient so that `f` is at least as fine as `c` in time
    let ((gf, df, vf, sf), (gc, dc, vc, sc)) = if g1.len() >= g2.len() {
        ((g1, d1, v1, s1), (g2, d2, v2, s2))
    } else {
        ((g2, d2, v2, s2), (g1, d1, v1, s1))
    };
    let time_parent = gf.parent_intervals(&gc)?;
    // spatial nesting may go the other way round
    let (space_fine_is_f, dof_parent) = if df >= dc {
        (true, sf.parent_dofs(sc)?)
    } else {
        (false, sc.parent_dofs(sf)?)
    };
    let measure = |d: usize| {
        if space_fine_is_f {
            base_measure(sf, d)
        } else {
            base_measure(sc, d)
        }
    };
    let mut total = 0.0;
    for (m, &mc) in time_parent.iter().enumerate() {
        let k = gf.step(m);
        if space_fine_is_f {
            for d in 0..df {
                let a = vf[m * df + d];
                let b = vc[mc * dc + dof_parent[d]];
                total += k * measure(d) * (a - b).abs();
            }
        } else {
            for d in 0..dc {
                let a = vc[mc * dc + d];
                let b = vf[m * df + dof_parent[d]];
                total += k * measure(d) * (a - b).abs();
            }
        }
    }
    Ok(total)
}

/// Spatial measure of a dof of the expanded (sample-resolved) layout.
fn base_measure(space: &ControlSpace, d: usize) -> f64 {
    match &space.layout {
        Layout::Cellwise(set) => set.areas[d],
        _ => 1.0,
    }
}

/// Moments of `{z > 0}` on a triangle with linear `z` given at its corners:
/// returns `|{z > 0}| / |K|` and `\int_{z>0} lambda_i / |K|`.
pub fn positive_part_moments(z: [f64; 3]) -> (f64, [f64; 3]) {
    // corners of the reference triangle in barycentric coordinates
    let e = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut poly: Vec<[f64; 3]> = Vec::with_capacity(4);
    for i in 0..3 {
        let j = (i + 1) % 3;
        // corners on the zero line belong to the closure of the positive part
        if z[i] >= 0.0 {
            poly.push(e[i]);
        }
        if (z[i] >= 0.0) != (z[j] >= 0.0) {
            let t = z[i] / (z[i] - z[j]);
            if t > 0.0 && t < 1.0 {
                let mut p = [0.0; 3];
                for c in 0..3 {
                    p[c] = (1.0 - t) * e[i][c] + t * e[j][c];
                }
                poly.push(p);
            }
        }
    }
    if poly.len() < 3 {
        return (0.0, [0.0; 3]);
    }
    // fan triangulation in barycentric coordinates; reference area is 1/2 in (l1, l2)
    let mut frac = 0.0;
    let mut mom = [0.0; 3];
    for k in 1..poly.len() - 1 {
        let (a, b, c) = (poly[0], poly[k], poly[k + 1]);
        let area = 0.5 * ((b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2])).abs();
        let f = 2.0 * area;
        frac += f;
        for i in 0..3 {
            mom[i] += f * (a[i] + b[i] + c[i]) / 3.0;
        }
    }
    (frac, mom)
}

fn variational_atom_load(cells: &CellSet, bounds: &Bounds, z: &[f64], out: &mut [f64]) {
    for (c, corners) in cells.corner_dofs.iter().enumerate() {
        let zc = corners.map(|d| d.map_or(0.0, |d| z[d]));
        let area = cells.areas[c];
        if zc.iter().all(|&v| v == 0.0) {
            for d in corners.iter().flatten() {
                out[*d] += area / 3.0 * bounds.midpoint();
            }
            continue;
        }
        // {z = 0} is a null set otherwise
        let (_, mp) = positive_part_moments(zc);
        let (_, mm) = positive_part_moments(zc.map(|v| -v));
        for i in 0..3 {
            if let Some(d) = corners[i] {
                out[d] += area * (bounds.lower * mp[i] + bounds.upper * mm[i]);
            }
        }
    }
}
