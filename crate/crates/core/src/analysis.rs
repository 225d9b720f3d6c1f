//! Post-processing: measure of the near-zero set of the switching function,
//! growth exponent fits and convergence tables.

use std::fmt::Write as _;

use crate::control::{l1_distance, Control, ControlSpace};
use crate::error::{Error, Result};
use crate::parabolic::TimeGrid;

#[derive(Clone, Debug)]
pub struct StructuralReport {
    pub epsilons: Vec<f64>,
    /// `Phi(eps) = |{(t, x) : |B^* z| <= eps}|`.
    pub measures: Vec<f64>,
    /// `|I x omega|`.
    pub total: f64,
    pub max_abs: f64,
}

/// Geometric grid of `n` points in `[lo, hi]`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// 40 points geometric in `[1e-6, 1] * max |s|`.
pub fn default_epsilons(max_abs: f64) -> Vec<f64> {
    geometric_grid(1e-6 * max_abs, max_abs, 40)
}

/// `Phi(eps)` for switching values `s` (layout `m * dofs + d`), weighting
/// each coefficient by `k_m` times the spatial measure of its dof.
pub fn structural_measure(s: &[f64], space: &ControlSpace, grid: &TimeGrid, epsilons: Option<&[f64]>) -> StructuralReport {
    let dofs = space.dofs_per_interval();
    let mut items: Vec<(f64, f64)> = Vec::with_capacity(s.len());
    for m in 0..grid.len() {
        for d in 0..dofs {
            items.push((s[m * dofs + d].abs(), grid.step(m) * space.dof_measure(d)));
        }
    }
    weighted_sublevel_measure(items, epsilons)
}

/// `Phi(eps)` for `(|value|, weight)` pairs.
pub fn weighted_sublevel_measure(mut items: Vec<(f64, f64)>, epsilons: Option<&[f64]>) -> StructuralReport {
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max_abs = items.last().map_or(0.0, |x| x.0);
    let eps = epsilons.map_or_else(|| default_epsilons(max_abs), <[f64]>::to_vec);
    let mut cumulative = Vec::with_capacity(items.len());
    let mut acc = 0.0;
    for (_, w) in &items {
        acc += w;
        cumulative.push(acc);
    }
    let measures = eps
        .iter()
        .map(|&e| {
            let count = items.partition_point(|x| x.0 <= e);
            if count == 0 {
                0.0
            } else {
                cumulative[count - 1]
            }
        })
        .collect();
    StructuralReport {
        epsilons: eps,
        measures,
        total: acc,
        max_abs,
    }
}

impl StructuralReport {
    /// Central two decades `[1e-4, 1e-2] * max |s|` of the default grid.
    pub fn default_window(&self) -> (f64, f64) {
        (1e-4 * self.max_abs, 1e-2 * self.max_abs)
    }

    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::new();
        for line in header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "epsilon,measure");
        for (e, m) in self.epsilons.iter().zip(&self.measures) {
            let _ = writeln!(out, "{e:.17e},{m:.17e}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaFit {
    pub kappa: f64,
    /// Root mean square residual of the log-log fit.
    pub residual: f64,
    pub points: usize,
}

/// Least-squares slope of `log Phi` against `log eps` over the window.
pub fn fit_kappa(report: &StructuralReport, window: (f64, f64)) -> Result<KappaFit> {
    let pts: Vec<(f64, f64)> = report
        .epsilons
        .iter()
        .zip(&report.measures)
        .filter(|(e, m)| **e >= window.0 * (1.0 - 1e-12) && **e <= window.1 * (1.0 + 1e-12) && **m > 0.0)
        .map(|(e, m)| (e.ln(), m.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::DegenerateWindow(format!(
            "{} points with positive measure in [{:.3e}, {:.3e}]",
            pts.len(),
            window.0,
            window.1
        )));
    }
    let (slope, intercept) = least_squares(&pts);
    if !slope.is_finite() {
        return Err(Error::DegenerateWindow("all abscissae coincide".into()));
    }
    let residual = (pts.iter().map(|(x, y)| (y - slope * x - intercept).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    Ok(KappaFit {
        kappa: slope,
        residual,
        points: pts.len(),
    })
}

fn least_squares(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `log(e_{i-1} / e_i) / log(factor)` for consecutive errors.
pub fn eoc(errors: &[f64], factor: f64) -> Result<Vec<f64>> {
    if let Some(&e) = errors.iter().find(|&&e| !(e > 0.0)) {
        return Err(Error::NonPositiveError(e));
    }
    Ok(errors.windows(2).map(|w| (w[0] / w[1]).ln() / factor.ln()).collect())
}

/// Least-squares rate over a sequence refined by `factor` per step.
pub fn eoc_fit(errors: &[f64], factor: f64) -> Result<f64> {
    if let Some(&e) = errors.iter().find(|&&e| !(e > 0.0)) {
        return Err(Error::NonPositiveError(e));
    }
    if errors.len() < 2 {
        return Err(Error::DegenerateWindow("need two errors for a rate".into()));
    }
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .map(|(i, e)| (i as f64 * factor.ln(), e.ln()))
        .collect();
    Ok(-least_squares(&pts).0)
}

pub fn nu_error(nu: f64, nu_ref: f64) -> f64 {
    (nu - nu_ref).abs()
}

pub fn q_error_l1(space: &ControlSpace, q: &Control, space_ref: &ControlSpace, q_ref: &Control) -> Result<f64> {
    l1_distance(space, q, space_ref, q_ref)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EocRow {
    pub level: usize,
    pub m: usize,
    pub n: usize,
    pub err_nu: f64,
    pub err_q: f64,
    pub eoc_nu: Option<f64>,
    pub eoc_q: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EocTable {
    pub rows: Vec<EocRow>,
}

impl EocTable {
    /// Rows from errors; rates only between consecutive rows refined by 2
    /// in the studied parameter.
    pub fn from_errors(points: &[(usize, usize, usize)], err_nu: &[f64], err_q: &[f64]) -> Self {
        let mut rows = Vec::with_capacity(points.len());
        for (i, &(level, m, n)) in points.iter().enumerate() {
            let (eoc_nu, eoc_q) = if i > 0 {
                let (pl, pm, _) = points[i - 1];
                let refined = (m == 2 * pm && level == pl) || (level == pl + 1 && m == pm);
                if refined {
                    let rate = |a: f64, b: f64| (a > 0.0 && b > 0.0).then(|| (a / b).log2());
                    (rate(err_nu[i - 1], err_nu[i]), rate(err_q[i - 1], err_q[i]))
                } else {
                    (None, None)
                }
            } else {
                (None, None)
            };
            rows.push(EocRow {
                level,
                m,
                n,
                err_nu: err_nu[i],
                err_q: err_q[i],
                eoc_nu,
                eoc_q,
            });
        }
        Self { rows }
    }

    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::new();
        for line in header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "level,M,N,err_nu,err_q_l1,eoc_nu,eoc_q");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.17e},{:.17e},{},{}",
                r.level,
                r.m,
                r.n,
                r.err_nu,
                r.err_q,
                opt(r.eoc_nu),
                opt(r.eoc_q)
            );
        }
        out
    }
}
