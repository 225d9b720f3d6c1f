//! Structured triangulations of the unit square.
//!
//! Level `l` of a mesh with `base` divisions has `n = base * 2^l` squares per
//! side, each cut along its lower-left to upper-right diagonal. Vertices are
//! numbered row by row, triangle `2 * (j * n + i)` is the lower triangle of
//! square `(i, j)` and `2 * (j * n + i) + 1` the upper one. Uniform red
//! refinement of such a mesh is again a mesh of the same family, which keeps
//! all levels nested.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(x0, x1) x (y0, y1)` inside the unit square.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubdomainSpec {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl SubdomainSpec {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(x0 < x1 && y0 < y1 && in_unit(x0) && in_unit(x1) && in_unit(y0) && in_unit(y1)) {
            return Err(Error::InvalidMesh(format!(
                "subdomain ({x0}, {x1}) x ({y0}, {y1}) is not a rectangle inside the unit square"
            )));
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] > self.x0 && p[0] < self.x1 && p[1] > self.y0 && p[1] < self.y1
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub base_divisions: usize,
    pub level: usize,
    /// Vertices per side.
    pub n_side: usize,
    pub vertices: Vec<[f64; 2]>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub boundary_mask: Vec<bool>,
    pub cell_tags: Vec<u32>,
    pub h_max: f64,
    /// Triangle of the previous level containing each triangle, if this mesh
    /// was produced by [`refine`].
    pub parent: Option<Vec<usize>>,
}

/// Builds level `level` of the structured family with `base_divisions`
/// squares per side on level 0.
pub fn build_unit_square(base_divisions: usize, level: usize) -> Result<Mesh> {
    if base_divisions < 4 || !base_divisions.is_multiple_of(4) {
        return Err(Error::InvalidMesh(format!(
            "base_divisions must be a positive multiple of 4, got {base_divisions}"
        )));
    }
    if level > 12 {
        return Err(Error::InvalidMesh(format!("refinement level {level} is too large")));
    }
    let n = base_divisions << level;
    let n_side = n + 1;
    let mut vertices = Vec::with_capacity(n_side * n_side);
    let mut boundary_mask = Vec::with_capacity(n_side * n_side);
    for j in 0..n_side {
        for i in 0..n_side {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
            boundary_mask.push(i == 0 || j == 0 || i == n || j == n);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * n_side + i;
            let v10 = v00 + 1;
            let v01 = v00 + n_side;
            let v11 = v01 + 1;
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    Ok(Mesh {
        base_divisions,
        level,
        n_side,
        vertices,
        cell_tags: vec![0; triangles.len()],
        triangles,
        boundary_mask,
        h_max: std::f64::consts::SQRT_2 / n as f64,
        parent: None,
    })
}

/// Uniform red refinement. Tags are inherited from the parent triangles.
pub fn refine(mesh: &Mesh) -> Mesh {
    let mut fine = build_unit_square(mesh.base_divisions, mesh.level + 1)
        .expect("refining a valid mesh stays within the admitted levels");
    let parent: Vec<usize> = (0..fine.n_triangles())
        .map(|t| mesh.locate(fine.barycenter(t)))
        .collect();
    fine.cell_tags = parent.iter().map(|&p| mesh.cell_tags[p]).collect();
    fine.parent = Some(parent);
    fine
}

/// Sets `tag` on every triangle whose barycenter lies inside the rectangle.
pub fn tag_subdomain(mesh: &Mesh, spec: &SubdomainSpec, tag: u32) -> Result<Mesh> {
    let cells = mesh.cells_in(spec)?;
    let mut tagged = mesh.clone();
    for t in cells {
        tagged.cell_tags[t] = tag;
    }
    Ok(tagged)
}

impl Mesh {
    /// Squares per side.
    pub fn divisions(&self) -> usize {
        self.n_side - 1
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn corners(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [p, q, r] = self.corners(t);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
    }

    pub fn area(&self, t: usize) -> f64 {
        self.signed_area(t).abs()
    }

    pub fn barycenter(&self, t: usize) -> [f64; 2] {
        let [p, q, r] = self.corners(t);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    /// Triangle containing `p`; points on edges are assigned to one of the
    /// adjacent triangles.
    pub fn locate(&self, p: [f64; 2]) -> usize {
        let n = self.divisions();
        let fx = (p[0] * n as f64).clamp(0.0, n as f64);
        let fy = (p[1] * n as f64).clamp(0.0, n as f64);
        let i = (fx.floor() as usize).min(n - 1);
        let j = (fy.floor() as usize).min(n - 1);
        let lower = fx - i as f64 >= fy - j as f64;
        2 * (j * n + i) + usize::from(!lower)
    }

    /// Triangles tiling the rectangle. Fails if a side of the rectangle is
    /// not a grid line of level 0.
    pub fn cells_in(&self, spec: &SubdomainSpec) -> Result<Vec<usize>> {
        let base = self.base_divisions as f64;
        let on_grid = |v: f64| ((v * base).round() - v * base).abs() < 1e-12;
        if !(on_grid(spec.x0) && on_grid(spec.x1) && on_grid(spec.y0) && on_grid(spec.y1)) {
            return Err(Error::Alignment {
                x0: spec.x0,
                x1: spec.x1,
                y0: spec.y0,
                y1: spec.y1,
            });
        }
        Ok((0..self.n_triangles())
            .filter(|&t| spec.contains(self.barycenter(t)))
            .collect())
    }

    /// Number of distinct edges.
    pub fn n_edges(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// Plain-text dump: vertex lines `x y boundary_flag`, then triangle
    /// lines `i j k tag`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# vertices {}", self.n_vertices());
        for (v, b) in self.vertices.iter().zip(&self.boundary_mask) {
            let _ = writeln!(out, "{} {} {}", v[0], v[1], u8::from(*b));
        }
        let _ = writeln!(out, "# triangles {}", self.n_triangles());
        for (t, tag) in self.triangles.iter().zip(&self.cell_tags) {
            let _ = writeln!(out, "{} {} {} {}", t[0], t[1], t[2], tag);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_on_coarse_levels() {
        let m = build_unit_square(4, 0).unwrap();
        assert_eq!(m.n_vertices(), 25);
        assert_eq!(m.n_triangles(), 32);
        assert!((m.h_max - 2f64.sqrt() / 4.0).abs() < 1e-15);
        let m1 = build_unit_square(4, 1).unwrap();
        assert_eq!(m1.n_vertices(), 81);
        assert_eq!(m1.n_triangles(), 128);
        assert_eq!(build_unit_square(64, 0).unwrap().n_vertices(), 4225);
        assert_eq!(build_unit_square(8, 3).unwrap().n_vertices(), 4225);
    }

    #[test]
    fn rejects_bad_base() {
        assert!(build_unit_square(6, 0).is_err());
        assert!(build_unit_square(0, 0).is_err());
        assert!(build_unit_square(8, 0).is_ok());
    }

    #[test]
    fn areas_orientation_and_euler() {
        for level in 0..3 {
            let m = build_unit_square(4, level).unwrap();
            let mut total = 0.0;
            for t in 0..m.n_triangles() {
                assert!(m.signed_area(t) > 0.0);
                total += m.area(t);
            }
            assert!((total - 1.0).abs() < 1e-12);
            let euler = m.n_vertices() as i64 - m.n_edges() as i64 + m.n_triangles() as i64;
            assert_eq!(euler, 1);
        }
    }

    #[test]
    fn boundary_mask_matches_coordinates() {
        let m = build_unit_square(8, 0).unwrap();
        for (v, &b) in m.vertices.iter().zip(&m.boundary_mask) {
            let on = v[0] == 0.0 || v[0] == 1.0 || v[1] == 0.0 || v[1] == 1.0;
            assert_eq!(on, b);
        }
        assert_eq!(m.boundary_mask.iter().filter(|&&b| !b).count(), 49);
    }

    #[test]
    fn tagging_half_and_corner() {
        let m = build_unit_square(4, 0).unwrap();
        let half = SubdomainSpec::new(0.0, 0.5, 0.0, 1.0).unwrap();
        let cells = m.cells_in(&half).unwrap();
        assert_eq!(cells.len(), 16);
        let area: f64 = cells.iter().map(|&t| m.area(t)).sum();
        assert_eq!(area, 0.5);

        let corner = SubdomainSpec::new(0.0, 0.75, 0.0, 0.75).unwrap();
        let tagged = tag_subdomain(&m, &corner, 7).unwrap();
        let area: f64 = (0..m.n_triangles())
            .filter(|&t| tagged.cell_tags[t] == 7)
            .map(|t| m.area(t))
            .sum();
        assert_eq!(area, 0.5625);

        let bad = SubdomainSpec::new(0.0, 0.3, 0.0, 1.0).unwrap();
        assert!(matches!(m.cells_in(&bad), Err(Error::Alignment { .. })));
    }

    #[test]
    fn refinement_is_nested() {
        let coarse = tag_subdomain(
            &build_unit_square(4, 0).unwrap(),
            &SubdomainSpec::new(0.0, 0.75, 0.0, 0.75).unwrap(),
            1,
        )
        .unwrap();
        let fine = refine(&coarse);
        assert_eq!(fine.n_vertices(), 81);
        let parent = fine.parent.as_ref().unwrap();
        let mut children = vec![Vec::new(); coarse.n_triangles()];
        for (t, &p) in parent.iter().enumerate() {
            children[p].push(t);
        }
        for (p, kids) in children.iter().enumerate() {
            assert_eq!(kids.len(), 4);
            let sum: f64 = kids.iter().map(|&t| fine.area(t)).sum();
            assert!((sum - coarse.area(p)).abs() < 1e-14);
            // every child vertex lies in the closed parent triangle
            let [a, b, c] = coarse.corners(p);
            for &t in kids {
                for v in fine.corners(t) {
                    let l1 = ((b[0] - v[0]) * (c[1] - v[1]) - (c[0] - v[0]) * (b[1] - v[1])) / 2.0;
                    let l2 = ((c[0] - v[0]) * (a[1] - v[1]) - (a[0] - v[0]) * (c[1] - v[1])) / 2.0;
                    let l3 = ((a[0] - v[0]) * (b[1] - v[1]) - (b[0] - v[0]) * (a[1] - v[1])) / 2.0;
                    assert!(l1 >= -1e-15 && l2 >= -1e-15 && l3 >= -1e-15);
                }
            }
        }
        let tagged = |m: &Mesh| -> f64 {
            (0..m.n_triangles())
                .filter(|&t| m.cell_tags[t] == 1)
                .map(|t| m.area(t))
                .sum()
        };
        assert_eq!(tagged(&coarse), tagged(&fine));
        let twice = refine(&fine);
        assert!((twice.h_max - 2f64.sqrt() / 16.0).abs() < 1e-15);
    }

    #[test]
    fn piecewise_constant_integral_is_preserved() {
        let coarse = build_unit_square(4, 1).unwrap();
        let fine = refine(&coarse);
        let field: Vec<f64> = (0..coarse.n_triangles()).map(|t| (t as f64 * 0.37).sin()).collect();
        let ic: f64 = (0..coarse.n_triangles()).map(|t| field[t] * coarse.area(t)).sum();
        let parent = fine.parent.as_ref().unwrap();
        let ifine: f64 = (0..fine.n_triangles())
            .map(|t| field[parent[t]] * fine.area(t))
            .sum();
        assert!((ic - ifine).abs() < 1e-14);
    }

    #[test]
    fn locate_finds_containing_cell() {
        let m = build_unit_square(8, 0).unwrap();
        for t in 0..m.n_triangles() {
            assert_eq!(m.locate(m.barycenter(t)), t);
        }
    }

    #[test]
    fn text_dump_has_one_line_per_entity() {
        let m = build_unit_square(4, 0).unwrap();
        let text = m.to_text();
        let data_lines = text.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(data_lines, 25 + 32);
        assert!(text.lines().nth(1).unwrap() == "0 0 1");
    }
}
