//! P1 finite elements on [`Mesh`]: mass and stiffness matrices, load vectors,
//! the L2 projection onto the interior space and the discrete H^-1 norm.
//!
//! Global matrices returned by [`assemble_mass`] and [`assemble_stiffness`]
//! cover all vertices. [`AssembledOperators`] keeps the interior blocks; the
//! homogeneous Dirichlet condition is imposed by eliminating boundary
//! vertices.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use crate::error::Result;
use crate::linalg::{cg_solve, dot, CsrMatrix};
use crate::mesh::Mesh;

/// Coefficients of a P1 function on the interior vertices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodalField(pub Vec<f64>);

impl NodalField {
    pub fn zeros(n: usize) -> Self {
        NodalField(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self + a * other`
    pub fn axpy(&mut self, a: f64, other: &[f64]) {
        for (x, y) in self.0.iter_mut().zip(other) {
            *x += a * y;
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        NodalField(self.0.iter().map(|x| a * x).collect())
    }

    pub fn sub(&self, other: &[f64]) -> Self {
        NodalField(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }
}

impl Deref for NodalField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for NodalField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for NodalField {
    fn from(v: Vec<f64>) -> Self {
        NodalField(v)
    }
}

/// Symmetric quadrature rules on triangles in barycentric form; weights sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrature {
    /// 6 points, exact for degree 4.
    Degree4,
    /// 13 points, exact for degree 7.
    Degree7,
}

impl Quadrature {
    pub fn points(self) -> Vec<([f64; 3], f64)> {
        fn orbit3(a: f64, w: f64, out: &mut Vec<([f64; 3], f64)>) {
            let b = 1.0 - 2.0 * a;
            out.push(([a, a, b], w));
            out.push(([a, b, a], w));
            out.push(([b, a, a], w));
        }
        fn orbit6(a: f64, b: f64, w: f64, out: &mut Vec<([f64; 3], f64)>) {
            let c = 1.0 - a - b;
            for p in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                out.push((p, w));
            }
        }
        let mut pts = Vec::new();
        match self {
            Quadrature::Degree4 => {
                orbit3(0.445_948_490_915_965, 0.223_381_589_678_011, &mut pts);
                orbit3(0.091_576_213_509_771, 0.109_951_743_655_322, &mut pts);
            }
            Quadrature::Degree7 => {
                pts.push(([1.0 / 3.0; 3], -0.149_570_044_467_682));
                orbit3(0.260_345_966_079_040, 0.175_615_257_433_208, &mut pts);
                orbit3(0.065_130_102_902_216, 0.053_347_235_608_838, &mut pts);
                orbit6(0.048_690_315_425_316, 0.312_865_496_004_874, 0.077_113_760_890_257, &mut pts);
            }
        }
        pts
    }
}

fn map_point(corners: &[[f64; 2]; 3], bary: &[f64; 3]) -> [f64; 2] {
    [
        bary[0] * corners[0][0] + bary[1] * corners[1][0] + bary[2] * corners[2][0],
        bary[0] * corners[0][1] + bary[1] * corners[1][1] + bary[2] * corners[2][1],
    ]
}

/// `(area / 12) [[2,1,1],[1,2,1],[1,1,2]]`.
pub fn local_mass(corners: &[[f64; 2]; 3]) -> [[f64; 3]; 3] {
    let area = triangle_area(corners);
    let mut m = [[area / 12.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = area / 6.0;
    }
    m
}

/// `A_ij = e_i . e_j / (4 area)` with `e_i` the edge opposite vertex `i`.
pub fn local_stiffness(corners: &[[f64; 2]; 3]) -> [[f64; 3]; 3] {
    let area = triangle_area(corners);
    let edge = |i: usize| {
        let p = corners[(i + 1) % 3];
        let q = corners[(i + 2) % 3];
        [q[0] - p[0], q[1] - p[1]]
    };
    let e = [edge(0), edge(1), edge(2)];
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = (e[i][0] * e[j][0] + e[i][1] * e[j][1]) / (4.0 * area);
        }
    }
    a
}

fn triangle_area(c: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((c[1][0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1])).abs()
}

fn assemble_local(mesh: &Mesh, local: impl Fn(&[[f64; 2]; 3]) -> [[f64; 3]; 3]) -> CsrMatrix {
    let n = mesh.n_vertices();
    let mut triplets = Vec::with_capacity(9 * mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let tri = mesh.triangles[t];
        let a = local(&mesh.corners(t));
        for i in 0..3 {
            for j in 0..3 {
                triplets.push((tri[i], tri[j], a[i][j]));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Mass matrix on all vertices, integrated exactly.
pub fn assemble_mass(mesh: &Mesh) -> CsrMatrix {
    assemble_local(mesh, local_mass)
}

/// Stiffness matrix on all vertices.
pub fn assemble_stiffness(mesh: &Mesh) -> CsrMatrix {
    assemble_local(mesh, local_stiffness)
}

/// `b_i = \int f phi_i` on all vertices.
pub fn load_vector_full(mesh: &Mesh, f: impl Fn(f64, f64) -> f64, rule: Quadrature) -> Vec<f64> {
    let pts = rule.points();
    let mut b = vec![0.0; mesh.n_vertices()];
    for t in 0..mesh.n_triangles() {
        let corners = mesh.corners(t);
        let area = mesh.area(t);
        let tri = mesh.triangles[t];
        for (bary, w) in &pts {
            let x = map_point(&corners, bary);
            let fx = f(x[0], x[1]) * w * area;
            for i in 0..3 {
                b[tri[i]] += fx * bary[i];
            }
        }
    }
    b
}

/// `\int_\Omega f` by quadrature.
pub fn integrate(mesh: &Mesh, f: impl Fn(f64, f64) -> f64, rule: Quadrature) -> f64 {
    let pts = rule.points();
    (0..mesh.n_triangles())
        .map(|t| {
            let corners = mesh.corners(t);
            mesh.area(t)
                * pts
                    .iter()
                    .map(|(bary, w)| {
                        let x = map_point(&corners, bary);
                        w * f(x[0], x[1])
                    })
                    .sum::<f64>()
        })
        .sum()
}

/// Interior vertex numbering.
#[derive(Clone, Debug)]
pub struct DofMap {
    pub dof_to_vertex: Vec<usize>,
    pub vertex_to_dof: Vec<Option<usize>>,
}

impl DofMap {
    pub fn interior(mesh: &Mesh) -> Self {
        let mut dof_to_vertex = Vec::new();
        let mut vertex_to_dof = vec![None; mesh.n_vertices()];
        for (v, &b) in mesh.boundary_mask.iter().enumerate() {
            if !b {
                vertex_to_dof[v] = Some(dof_to_vertex.len());
                dof_to_vertex.push(v);
            }
        }
        Self {
            dof_to_vertex,
            vertex_to_dof,
        }
    }

    pub fn len(&self) -> usize {
        self.dof_to_vertex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dof_to_vertex.is_empty()
    }

    pub fn restrict_vector(&self, full: &[f64]) -> NodalField {
        NodalField(self.dof_to_vertex.iter().map(|&v| full[v]).collect())
    }

    /// Extends by zero to all vertices.
    pub fn extend_vector(&self, interior: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.vertex_to_dof.len()];
        for (d, &v) in self.dof_to_vertex.iter().enumerate() {
            full[v] = interior[d];
        }
        full
    }

    pub fn restrict_matrix(&self, full: &CsrMatrix) -> CsrMatrix {
        let mut triplets = Vec::new();
        for (r, &v) in self.dof_to_vertex.iter().enumerate() {
            for (c, val) in full.row(v) {
                if let Some(dc) = self.vertex_to_dof[c] {
                    triplets.push((r, dc, val));
                }
            }
        }
        CsrMatrix::from_triplets(self.len(), self.len(), triplets)
    }
}

/// Mass and stiffness matrices on the interior vertices of a mesh.
#[derive(Clone, Debug)]
pub struct AssembledOperators {
    pub mesh: Arc<Mesh>,
    pub dofs: DofMap,
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
}

impl AssembledOperators {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let dofs = DofMap::interior(&mesh);
        let mass = dofs.restrict_matrix(&assemble_mass(&mesh));
        let stiffness = dofs.restrict_matrix(&assemble_stiffness(&mesh));
        Self {
            mesh,
            dofs,
            mass,
            stiffness,
        }
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.len()
    }

    /// `(u, v)_{L2}`.
    pub fn mass_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.mass.inner(u, v)
    }

    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        self.mass.inner(u, u).max(0.0).sqrt()
    }

    /// Nodal interpolant on the interior vertices.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> NodalField {
        NodalField(
            self.dofs
                .dof_to_vertex
                .iter()
                .map(|&v| {
                    let p = self.mesh.vertices[v];
                    f(p[0], p[1])
                })
                .collect(),
        )
    }

    /// Evaluates the P1 function `u` at `p`.
    pub fn evaluate(&self, u: &[f64], p: [f64; 2]) -> f64 {
        let t = self.mesh.locate(p);
        let corners = self.mesh.corners(t);
        let bary = barycentric(&corners, p);
        self.mesh.triangles[t]
            .iter()
            .zip(bary)
            .map(|(&v, l)| self.dofs.vertex_to_dof[v].map_or(0.0, |d| u[d]) * l)
            .sum()
    }
}

pub fn barycentric(c: &[[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let det = (c[1][0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1]);
    let l1 = ((p[0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (p[1] - c[0][1])) / det;
    let l2 = ((c[1][0] - c[0][0]) * (p[1] - c[0][1]) - (p[0] - c[0][0]) * (c[1][1] - c[0][1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Interior load vector of `f` with the degree-4 rule.
pub fn load_vector(ops: &AssembledOperators, f: impl Fn(f64, f64) -> f64) -> NodalField {
    ops.dofs
        .restrict_vector(&load_vector_full(&ops.mesh, f, Quadrature::Degree4))
}

/// L2 projection onto the interior P1 space.
pub fn l2_project(ops: &AssembledOperators, f: impl Fn(f64, f64) -> f64) -> Result<NodalField> {
    let b = load_vector(ops, f);
    Ok(NodalField(cg_solve(&ops.mass, &b, 1e-13)?))
}

/// `sqrt(r^T A^{-1} r)` for a functional `r` given by its interior load vector.
pub fn h_minus1_norm(ops: &AssembledOperators, r: &[f64]) -> Result<f64> {
    let x = cg_solve(&ops.stiffness, r, 1e-12)?;
    Ok(dot(r, &x).max(0.0).sqrt())
}

/// Prolongation of an interior P1 field from `coarse` to the nested `fine` operators.
pub fn prolongate(coarse: &AssembledOperators, fine: &AssembledOperators, u: &[f64]) -> NodalField {
    NodalField(
        fine.dofs
            .dof_to_vertex
            .iter()
            .map(|&v| coarse.evaluate(u, fine.mesh.vertices[v]))
            .collect(),
    )
}
